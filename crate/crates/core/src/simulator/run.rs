//! Closed-loop experiment: control every cycle, estimation every `E`
//! seconds and simulation every tick.

use std::fmt::Write as _;

use nalgebra::DVector;
use thiserror::Error;

use super::{step, SensorArray, SensorConfig, SensorError, SimError, SimParams, SimState};
use crate::controller::{control_cycle, ControlError, DemandSource, OccupancySource, Variant};
use crate::estimator::{estimated_outflow, EstimatorBank, EstimatorError, EstimatorMode, LinkNoise};
use crate::network::TrafficNetwork;
use crate::scenario::{DemandProfile, Scenario, ScenarioError};
use crate::synthesis::GainSet;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("period {name} = {value} s is not a multiple of {base} s")]
    Divisibility {
        name: &'static str,
        value: f64,
        base: f64,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Everything a run needs besides the network, gains and demand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub sim: SimParams,
    pub estimation_period: f64,
    pub sensor: SensorConfig,
    pub noise: Vec<LinkNoise>,
    pub sensor_seed: u64,
    pub initial_x: DVector<f64>,
}

impl RunConfig {
    pub fn from_scenario(scenario: &Scenario, net: &TrafficNetwork) -> Result<Self, RunError> {
        scenario.check_network(net)?;
        Ok(Self {
            variant: scenario.controller.variant,
            sim: scenario.simulation.params(),
            estimation_period: scenario.estimator.period_s,
            sensor: scenario.sensor.clone(),
            noise: scenario.estimator.noise_for(net)?,
            sensor_seed: scenario.seeds.sensor,
            initial_x: scenario.initial_x(net.links()),
        })
    }
}

/// State of every link at the start of one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub time_s: f64,
    pub x: DVector<f64>,
    pub x_b: DVector<f64>,
    /// Latest measurement.
    pub y: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub e_hat: DVector<f64>,
    pub e_true: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub index: usize,
    pub time_s: f64,
    pub g_raw: DVector<f64>,
    pub g: DVector<f64>,
    pub u_cmd: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub variant: Variant,
    pub tick: f64,
    pub ticks: Vec<TickRecord>,
    pub cycles: Vec<CycleRecord>,
    /// Exit demand (veh) that found its link empty.
    pub unserved_exit: f64,
}

fn multiple(name: &'static str, value: f64, base: f64) -> Result<usize, RunError> {
    let ratio = value / base;
    let rounded = ratio.round();
    if !(rounded >= 1.0) || (ratio - rounded).abs() > 1e-9 * rounded {
        return Err(RunError::Divisibility { name, value, base });
    }
    Ok(rounded as usize)
}

fn estimator_mode(variant: Variant) -> EstimatorMode {
    match variant {
        Variant::TucFf | Variant::TucFfIdeal => EstimatorMode::Joint,
        Variant::Tuc | Variant::TucIdeal => EstimatorMode::OccupancyOnly,
    }
}

/// Runs the closed loop over the horizon of `demand`.
pub fn run(
    net: &TrafficNetwork,
    gains: &GainSet,
    demand: &DemandProfile,
    cfg: &RunConfig,
) -> Result<RunTrace, RunError> {
    cfg.sim.validate()?;
    let tick = cfg.sim.tick;
    let per_cycle = multiple("C", net.cycle(), tick)?;
    let per_estimate = multiple("E", cfg.estimation_period, tick)?;
    multiple("C", net.cycle(), cfg.estimation_period)?;
    if (demand.tick - tick).abs() > 1e-12 {
        return Err(RunError::DimensionMismatch(format!(
            "demand sampled every {} s, simulation tick is {tick} s",
            demand.tick
        )));
    }
    let z = net.links();
    if demand.links() != z || cfg.initial_x.len() != z {
        return Err(RunError::DimensionMismatch(format!(
            "demand for {} links and {} initial occupancies on a {z}-link network",
            demand.links(),
            cfg.initial_x.len()
        )));
    }

    let mut state = SimState::new(cfg.initial_x.clone(), DVector::zeros(z));
    state.check(net)?;
    let mut sensor = SensorArray::new(&cfg.sensor, z, cfg.estimation_period, net.cycle(), cfg.sensor_seed)?;
    let mut bank = EstimatorBank::new(
        estimator_mode(cfg.variant),
        cfg.estimation_period,
        &cfg.noise,
        &demand.e_hist,
    )?;
    let sources = cfg.variant.sources();

    let n = demand.ticks();
    let mut ticks = Vec::with_capacity(n);
    let mut cycles = Vec::with_capacity(n / per_cycle + 1);
    let mut y = DVector::zeros(z);
    let mut u_est = DVector::zeros(z);
    let mut u_cmd = DVector::zeros(z);
    let mut g = DVector::zeros(net.stages());
    let mut unserved_exit = 0.0;
    for k in 0..n {
        let time_s = k as f64 * tick;
        let e_true = demand.at_tick(k);
        let estimation_instant = k % per_estimate == 0;
        if estimation_instant {
            y = sensor.measure(&state.x);
            if k == 0 {
                bank.initialize(&y);
            } else {
                bank.step(net, &u_est, &y);
            }
        }
        if k % per_cycle == 0 {
            let x_in = match sources.x_source {
                OccupancySource::GroundTruth => state.x.clone(),
                OccupancySource::Estimated => bank.x_hat(),
            };
            let e_in = match sources.e_source {
                DemandSource::GroundTruth => e_true.clone(),
                DemandSource::Estimated => bank.e_hat(),
                DemandSource::HistoricConstant => demand.e_hist.clone(),
            };
            let control = control_cycle(&x_in, &e_in, gains, net)?;
            g = control.g.clone();
            u_cmd = control.u_cmd.clone();
            cycles.push(CycleRecord {
                index: k / per_cycle,
                time_s,
                g_raw: control.g_raw,
                g: control.g,
                u_cmd: control.u_cmd,
            });
        }
        if estimation_instant {
            u_est = estimated_outflow(&bank.x_hat(), &g, net, cfg.estimation_period, cfg.sim.c_ug, cfg.sim.blocking);
        }
        ticks.push(TickRecord {
            time_s,
            x: state.x.clone(),
            x_b: state.x_b.clone(),
            y: y.clone(),
            x_hat: bank.x_hat(),
            e_hat: bank.e_hat(),
            e_true: e_true.clone(),
        });
        let outcome = step(&state, &u_cmd, e_true, net, &cfg.sim)?;
        unserved_exit += outcome.unserved_exit.sum();
        state = outcome.state;
    }
    Ok(RunTrace {
        variant: cfg.variant,
        tick,
        ticks,
        cycles,
        unserved_exit,
    })
}

pub const TRACE_HEADER: &str = "time_s,link,x,x_b,y,x_hat,e_hat,e_true";

impl RunTrace {
    pub fn links(&self) -> usize {
        self.ticks.first().map_or(0, |t| t.x.len())
    }

    pub fn horizon(&self) -> f64 {
        self.ticks.len() as f64 * self.tick
    }

    pub fn x_series(&self) -> Vec<DVector<f64>> {
        self.ticks.iter().map(|t| t.x.clone()).collect()
    }

    pub fn x_b_series(&self) -> Vec<DVector<f64>> {
        self.ticks.iter().map(|t| t.x_b.clone()).collect()
    }

    /// One row per tick and link.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.ticks.len() * self.links() * 64);
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for t in &self.ticks {
            for z in 0..t.x.len() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    t.time_s,
                    z + 1,
                    t.x[z],
                    t.x_b[z],
                    t.y[z],
                    t.x_hat[z],
                    t.e_hat[z],
                    t.e_true[z]
                )
                .expect("writing to a string");
            }
        }
        out
    }

    /// One row per cycle and stage.
    pub fn greens_csv(&self) -> String {
        let mut out = String::from("cycle,time_s,stage,g_raw,g\n");
        for c in &self.cycles {
            for s in 0..c.g.len() {
                writeln!(out, "{},{},{},{},{}", c.index, c.time_s, s + 1, c.g_raw[s], c.g[s])
                    .expect("writing to a string");
            }
        }
        out
    }
}
