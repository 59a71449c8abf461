//! Traffic network data model and the store-and-forward matrices.
//!
//! A network is read from a raw JSON description ([`NetworkFile`]) and turned
//! into a [`TrafficNetwork`] by [`validate_network`]. Link, junction and stage
//! ids are 1-based in files and 0-based everywhere else in the crate.
//!
//! Conventions: `turn[(z, w)]` is the fraction of the outflow of link `w` that
//! enters link `z`, so column `w` of the turning matrix describes where the
//! vehicles leaving `w` go.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest admissible turning-rate column sum.
pub const TURN_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid {kind} id {id}: ids must be 1..={max} without gaps")]
    InvalidId {
        kind: &'static str,
        id: usize,
        max: usize,
    },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: usize },
    #[error("exit rate of link {link} is {value}, expected a value in [0, 1)")]
    ExitRateOutOfRange { link: usize, value: f64 },
    #[error("invalid value for {what}: {value}")]
    InvalidValue { what: String, value: f64 },
    #[error("stage {stage} in two junctions ({first} and {second})")]
    StageInTwoJunctions {
        stage: usize,
        first: usize,
        second: usize,
    },
    #[error("stage {stage} is not assigned to any junction")]
    StageUnassigned { stage: usize },
    #[error("link {link} has right of way in no stage")]
    LinkWithoutStage { link: usize },
    #[error("turning rates out of link {link} sum to {sum} > 1")]
    TurningOverflow { link: usize, sum: f64 },
    #[error(
        "green-time constraints infeasible at junction {junction}: \
         sum of minimum greens {min_greens} + lost time {lost_time} > cycle {cycle}"
    )]
    InfeasibleGreenTimes {
        junction: usize,
        min_greens: f64,
        lost_time: f64,
        cycle: f64,
    },
    #[error("negative green time {value} for stage {stage}")]
    NegativeGreen { stage: usize, value: f64 },
    #[error("network file: {0}")]
    Parse(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub id: usize,
    pub x_max: f64,
    pub sat_flow: f64,
    pub exit_rate: f64,
}

/// `rate` of the outflow of link `from` continues into link `to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnSpec {
    pub from: usize,
    pub to: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub id: usize,
    pub g_min: f64,
    pub links: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JunctionSpec {
    pub id: usize,
    pub lost_time: f64,
    pub stages: Vec<StageSpec>,
}

/// Raw network description as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub links: Vec<LinkSpec>,
    pub turns: Vec<TurnSpec>,
    pub junctions: Vec<JunctionSpec>,
    pub cycle: f64,
}

impl NetworkFile {
    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        serde_json::from_str(text).map_err(|e| NetworkError::Parse(e.to_string()))
    }

    /// Canonical serialization: pretty-printed JSON followed by a newline.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("network file is serializable");
        text.push('\n');
        text
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| NetworkError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetworkError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| NetworkError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Which links can hold back the outflow of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockingConvention {
    /// Links that receive flow from `z` (physical back-holding).
    #[default]
    Downstream,
    /// Links `w` with `turn[(z, w)] != 0`, i.e. the index order as literally
    /// written in the outflow formula.
    Literal,
}

/// Validated, immutable network with its derived matrices.
#[derive(Debug, Clone)]
pub struct TrafficNetwork {
    x_max: DVector<f64>,
    sat_flow: DVector<f64>,
    turn: DMatrix<f64>,
    exit_rate: DVector<f64>,
    stage_matrix: DMatrix<f64>,
    junction_stages: Vec<Vec<usize>>,
    g_min: DVector<f64>,
    lost_time: DVector<f64>,
    cycle: f64,
    b_u: DMatrix<f64>,
    b_g: DMatrix<f64>,
    downstream: Vec<Vec<usize>>,
    literal: Vec<Vec<usize>>,
}

impl TrafficNetwork {
    pub fn links(&self) -> usize {
        self.x_max.len()
    }

    pub fn junctions(&self) -> usize {
        self.junction_stages.len()
    }

    pub fn stages(&self) -> usize {
        self.g_min.len()
    }

    pub fn x_max(&self) -> &DVector<f64> {
        &self.x_max
    }

    pub fn sat_flow(&self) -> &DVector<f64> {
        &self.sat_flow
    }

    pub fn turn(&self) -> &DMatrix<f64> {
        &self.turn
    }

    pub fn exit_rate(&self) -> &DVector<f64> {
        &self.exit_rate
    }

    pub fn stage_matrix(&self) -> &DMatrix<f64> {
        &self.stage_matrix
    }

    /// Stage indices (0-based) of each junction.
    pub fn junction_stages(&self) -> &[Vec<usize>] {
        &self.junction_stages
    }

    pub fn g_min(&self) -> &DVector<f64> {
        &self.g_min
    }

    pub fn lost_time(&self) -> &DVector<f64> {
        &self.lost_time
    }

    pub fn cycle(&self) -> f64 {
        self.cycle
    }

    pub fn b_u(&self) -> &DMatrix<f64> {
        &self.b_u
    }

    pub fn b_g(&self) -> &DMatrix<f64> {
        &self.b_g
    }

    /// Links whose congestion holds back the outflow of link `z`.
    pub fn blockers(&self, z: usize, convention: BlockingConvention) -> &[usize] {
        match convention {
            BlockingConvention::Downstream => &self.downstream[z],
            BlockingConvention::Literal => &self.literal[z],
        }
    }
}

fn check_ids<I>(kind: &'static str, ids: I, count: usize) -> Result<(), NetworkError>
where
    I: IntoIterator<Item = usize>,
{
    let mut seen = vec![false; count];
    for id in ids {
        if id == 0 || id > count {
            return Err(NetworkError::InvalidId {
                kind,
                id,
                max: count,
            });
        }
        if std::mem::replace(&mut seen[id - 1], true) {
            return Err(NetworkError::DuplicateId { kind, id });
        }
    }
    Ok(())
}

fn check_finite(what: impl Into<String>, value: f64, ok: bool) -> Result<(), NetworkError> {
    if value.is_finite() && ok {
        Ok(())
    } else {
        Err(NetworkError::InvalidValue {
            what: what.into(),
            value,
        })
    }
}

/// Checks every structural and feasibility precondition and assembles the network.
pub fn validate_network(raw: &NetworkFile) -> Result<TrafficNetwork, NetworkError> {
    let cycle = raw.cycle;
    check_finite("cycle", cycle, cycle > 0.0)?;

    let z_count = raw.links.len();
    if z_count == 0 {
        return Err(NetworkError::DimensionMismatch(
            "network has no links".into(),
        ));
    }
    check_ids("link", raw.links.iter().map(|l| l.id), z_count)?;

    let mut x_max = DVector::zeros(z_count);
    let mut sat_flow = DVector::zeros(z_count);
    let mut exit_rate = DVector::zeros(z_count);
    for link in &raw.links {
        let z = link.id - 1;
        check_finite(format!("x_max of link {}", link.id), link.x_max, link.x_max > 0.0)?;
        check_finite(
            format!("sat_flow of link {}", link.id),
            link.sat_flow,
            link.sat_flow >= 0.0,
        )?;
        if !(link.exit_rate >= 0.0 && link.exit_rate < 1.0) {
            return Err(NetworkError::ExitRateOutOfRange {
                link: link.id,
                value: link.exit_rate,
            });
        }
        x_max[z] = link.x_max;
        sat_flow[z] = link.sat_flow;
        exit_rate[z] = link.exit_rate;
    }

    let mut turn = DMatrix::zeros(z_count, z_count);
    let mut seen_turns = HashMap::new();
    for t in &raw.turns {
        for id in [t.from, t.to] {
            if id == 0 || id > z_count {
                return Err(NetworkError::InvalidId {
                    kind: "link",
                    id,
                    max: z_count,
                });
            }
        }
        check_finite(
            format!("turning rate {} -> {}", t.from, t.to),
            t.rate,
            (0.0..=1.0).contains(&t.rate),
        )?;
        if seen_turns.insert((t.from, t.to), ()).is_some() {
            return Err(NetworkError::DimensionMismatch(format!(
                "turn {} -> {} listed twice",
                t.from, t.to
            )));
        }
        turn[(t.to - 1, t.from - 1)] = t.rate;
    }
    for w in 0..z_count {
        let sum = turn.column(w).sum();
        if sum > 1.0 + TURN_SUM_TOLERANCE {
            return Err(NetworkError::TurningOverflow { link: w + 1, sum });
        }
    }

    let j_count = raw.junctions.len();
    check_ids("junction", raw.junctions.iter().map(|j| j.id), j_count)?;

    // Partition check comes first so that a stage listed twice is reported as such.
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for junction in &raw.junctions {
        for stage in &junction.stages {
            match owner.get(&stage.id) {
                Some(&first) if first != junction.id => {
                    return Err(NetworkError::StageInTwoJunctions {
                        stage: stage.id,
                        first,
                        second: junction.id,
                    });
                }
                Some(_) => {
                    return Err(NetworkError::DuplicateId {
                        kind: "stage",
                        id: stage.id,
                    });
                }
                None => {
                    owner.insert(stage.id, junction.id);
                }
            }
        }
    }
    let s_count = owner.len();
    if s_count == 0 {
        return Err(NetworkError::DimensionMismatch(
            "network has no stages".into(),
        ));
    }
    for &id in owner.keys() {
        if id == 0 {
            return Err(NetworkError::InvalidId {
                kind: "stage",
                id,
                max: s_count,
            });
        }
    }
    for stage in 1..=s_count {
        if !owner.contains_key(&stage) {
            return Err(NetworkError::StageUnassigned { stage });
        }
    }

    let mut stage_matrix = DMatrix::zeros(z_count, s_count);
    let mut g_min = DVector::zeros(s_count);
    let mut lost_time = DVector::zeros(j_count);
    let mut junction_stages = vec![Vec::new(); j_count];
    for junction in &raw.junctions {
        let j = junction.id - 1;
        check_finite(
            format!("lost_time of junction {}", junction.id),
            junction.lost_time,
            junction.lost_time >= 0.0,
        )?;
        lost_time[j] = junction.lost_time;
        let mut min_greens = 0.0;
        for stage in &junction.stages {
            let s = stage.id - 1;
            check_finite(
                format!("g_min of stage {}", stage.id),
                stage.g_min,
                stage.g_min >= 0.0,
            )?;
            g_min[s] = stage.g_min;
            min_greens += stage.g_min;
            for &link in &stage.links {
                if link == 0 || link > z_count {
                    return Err(NetworkError::InvalidId {
                        kind: "link",
                        id: link,
                        max: z_count,
                    });
                }
                stage_matrix[(link - 1, s)] = 1.0;
            }
            junction_stages[j].push(s);
        }
        junction_stages[j].sort_unstable();
        if min_greens + junction.lost_time > cycle {
            return Err(NetworkError::InfeasibleGreenTimes {
                junction: junction.id,
                min_greens,
                lost_time: junction.lost_time,
                cycle,
            });
        }
    }
    for z in 0..z_count {
        if stage_matrix.row(z).iter().all(|&v| v == 0.0) {
            return Err(NetworkError::LinkWithoutStage { link: z + 1 });
        }
    }

    let downstream = (0..z_count)
        .map(|z| (0..z_count).filter(|&w| turn[(w, z)] != 0.0).collect())
        .collect();
    let literal = (0..z_count)
        .map(|z| (0..z_count).filter(|&w| turn[(z, w)] != 0.0).collect())
        .collect();

    let mut net = TrafficNetwork {
        x_max,
        sat_flow,
        turn,
        exit_rate,
        stage_matrix,
        junction_stages,
        g_min,
        lost_time,
        cycle,
        b_u: DMatrix::zeros(0, 0),
        b_g: DMatrix::zeros(0, 0),
        downstream,
        literal,
    };
    net.b_u = build_bu(&net);
    net.b_g = build_bg(&net);
    Ok(net)
}

/// `(I - diag(t0)) T - I`.
fn routing_matrix(net: &TrafficNetwork) -> DMatrix<f64> {
    let z_count = net.links();
    let mut m = DMatrix::from_fn(z_count, z_count, |z, w| {
        (1.0 - net.exit_rate[z]) * net.turn[(z, w)]
    });
    for z in 0..z_count {
        m[(z, z)] -= 1.0;
    }
    m
}

/// Link-flow input matrix `B_u = C((I - diag(t0)) T - I)`.
pub fn build_bu(net: &TrafficNetwork) -> DMatrix<f64> {
    routing_matrix(net) * net.cycle
}

/// Green-time input matrix `B_g = ((I - diag(t0)) T - I) diag(S) S`.
pub fn build_bg(net: &TrafficNetwork) -> DMatrix<f64> {
    let mut m = routing_matrix(net);
    for (w, mut col) in m.column_iter_mut().enumerate() {
        col *= net.sat_flow[w];
    }
    m * &net.stage_matrix
}

/// Average link outflows (veh/s) produced by the stage green times `g` (s).
pub fn flows_from_greens(g: &DVector<f64>, net: &TrafficNetwork) -> Result<DVector<f64>, NetworkError> {
    if g.len() != net.stages() {
        return Err(NetworkError::DimensionMismatch(format!(
            "expected {} green times, got {}",
            net.stages(),
            g.len()
        )));
    }
    if let Some((s, &value)) = g.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(NetworkError::NegativeGreen {
            stage: s + 1,
            value,
        });
    }
    let total_green = &net.stage_matrix * g;
    Ok(total_green.component_mul(&net.sat_flow) / net.cycle)
}
