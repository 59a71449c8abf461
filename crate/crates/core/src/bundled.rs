//! Small example networks and a pulse scenario to exercise the whole loop.

use crate::network::{JunctionSpec, LinkSpec, NetworkFile, StageSpec, TurnSpec};
use crate::scenario::{
    ControllerSettings, DemandSpec, EstimatorSettings, HistoricDemand, PulseSpec, Scenario, Seeds,
    SimulationSettings, SyntheticDemand,
};
use crate::simulator::SensorConfig;

/// Two links in series, each discharging through its own one-stage junction.
pub fn chain2() -> NetworkFile {
    let link = |id, exit_rate| LinkSpec {
        id,
        x_max: 100.0,
        sat_flow: 0.5,
        exit_rate,
    };
    let junction = |id: usize| JunctionSpec {
        id,
        lost_time: 10.0,
        stages: vec![StageSpec {
            id,
            g_min: 10.0,
            links: vec![id],
        }],
    };
    NetworkFile {
        links: vec![link(1, 0.2), link(2, 0.0)],
        turns: vec![TurnSpec {
            from: 1,
            to: 2,
            rate: 1.0,
        }],
        junctions: vec![junction(1), junction(2)],
        cycle: 100.0,
    }
}

pub fn chain2_scenario() -> Scenario {
    Scenario {
        horizon_s: 7200.0,
        demand: DemandSpec::Synthetic(SyntheticDemand {
            e_hist: vec![0.1, 0.02],
            taper_s: 1800.0,
            ..SyntheticDemand::default()
        }),
        sensor: SensorConfig::default(),
        estimator: EstimatorSettings::default(),
        controller: ControllerSettings::default(),
        simulation: SimulationSettings::default(),
        seeds: Seeds::default(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Heading {
    East,
    West,
    North,
    South,
}

impl Heading {
    fn left(self) -> Heading {
        match self {
            Heading::East => Heading::North,
            Heading::West => Heading::South,
            Heading::North => Heading::West,
            Heading::South => Heading::East,
        }
    }

    fn right(self) -> Heading {
        match self {
            Heading::East => Heading::South,
            Heading::West => Heading::North,
            Heading::North => Heading::East,
            Heading::South => Heading::West,
        }
    }

    fn east_west(self) -> bool {
        matches!(self, Heading::East | Heading::West)
    }
}

/// `(id, junction entered, heading, leaving junction)` of every grid link;
/// origin links have no upstream junction.
const GRID_LINKS: [(usize, usize, Heading, Option<usize>); 16] = [
    (1, 2, Heading::East, Some(1)),
    (2, 1, Heading::West, Some(2)),
    (3, 4, Heading::East, Some(3)),
    (4, 3, Heading::West, Some(4)),
    (5, 3, Heading::South, Some(1)),
    (6, 1, Heading::North, Some(3)),
    (7, 4, Heading::South, Some(2)),
    (8, 2, Heading::North, Some(4)),
    (9, 1, Heading::East, None),
    (10, 1, Heading::South, None),
    (11, 2, Heading::West, None),
    (12, 2, Heading::South, None),
    (13, 3, Heading::East, None),
    (14, 3, Heading::North, None),
    (15, 4, Heading::West, None),
    (16, 4, Heading::North, None),
];

pub const GRID_STRAIGHT: f64 = 0.6;
pub const GRID_TURN: f64 = 0.2;

/// Links leaving junction 1 towards the rest of the grid.
pub const GRID_PULSE_LINKS: [usize; 2] = [1, 5];

/// Two-by-two grid of junctions (1 NW, 2 NE, 3 SW, 4 SE) with eight internal
/// and eight origin links. Each junction runs an east-west and a
/// north-south stage. Turning shares without a receiving internal link leave
/// the network.
pub fn grid4() -> NetworkFile {
    let links = GRID_LINKS
        .iter()
        .map(|&(id, _, _, from)| LinkSpec {
            id,
            x_max: if from.is_some() { 80.0 } else { 120.0 },
            sat_flow: 0.5,
            exit_rate: 0.05,
        })
        .collect();
    let mut turns = Vec::new();
    for &(from, junction, heading, _) in &GRID_LINKS {
        for (direction, rate) in [
            (heading, GRID_STRAIGHT),
            (heading.left(), GRID_TURN),
            (heading.right(), GRID_TURN),
        ] {
            let target = GRID_LINKS
                .iter()
                .find(|&&(_, _, h, up)| up == Some(junction) && h == direction);
            if let Some(&(to, ..)) = target {
                turns.push(TurnSpec { from, to, rate });
            }
        }
    }
    let junctions = (1..=4)
        .map(|j| {
            let stage = |offset: usize, east_west: bool| StageSpec {
                id: 2 * j - 1 + offset,
                g_min: 15.0,
                links: GRID_LINKS
                    .iter()
                    .filter(|&&(_, to, h, _)| to == j && h.east_west() == east_west)
                    .map(|&(id, ..)| id)
                    .collect(),
            };
            JunctionSpec {
                id: j,
                lost_time: 10.0,
                stages: vec![stage(0, true), stage(1, false)],
            }
        })
        .collect();
    NetworkFile {
        links,
        turns,
        junctions,
        cycle: 100.0,
    }
}

/// Historic demand of the grid: busier origin links, light internal demand.
pub fn grid4_e_hist() -> Vec<f64> {
    GRID_LINKS
        .iter()
        .map(|&(id, _, _, from)| match from {
            Some(_) => 0.01,
            None => 0.14 + 0.005 * (id % 4) as f64,
        })
        .collect()
}

/// Sinusoidal demand around the historic values with a 1.5 h demand pulse
/// on the links leaving junction 1 and a final two-hour taper.
pub fn grid4_pulse_scenario() -> Scenario {
    Scenario {
        horizon_s: 5.0 * 3600.0,
        demand: DemandSpec::Synthetic(SyntheticDemand {
            e_hist: grid4_e_hist(),
            pulses: vec![PulseSpec {
                links: GRID_PULSE_LINKS.to_vec(),
                start_s: 3600.0,
                end_s: 3600.0 + 5400.0,
                amplitude: 0.1,
            }],
            taper_s: 7200.0,
            ..SyntheticDemand::default()
        }),
        sensor: SensorConfig::default(),
        estimator: EstimatorSettings::default(),
        controller: ControllerSettings::default(),
        simulation: SimulationSettings::default(),
        seeds: Seeds::default(),
    }
}

/// The pulse scenario with demand held at the historic values.
pub fn grid4_historic_scenario() -> Scenario {
    Scenario {
        demand: DemandSpec::Historic(HistoricDemand {
            e_hist: grid4_e_hist(),
        }),
        ..grid4_pulse_scenario()
    }
}
