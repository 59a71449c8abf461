//! Ground-truth nonlinear store-and-forward simulation.
//!
//! The simulation runs at tick `T`, much shorter than the cycle `C`. Each
//! tick realizes the commanded link flows only where there are vehicles to
//! discharge and no receiving link is congested (back-holding), then admits
//! the exogenous demand up to the free space of each link. Demand that does
//! not fit is accumulated in a blocked-vehicle counter and released once
//! space frees up.

mod run;
mod sensor;

pub use run::{run, CycleRecord, RunConfig, RunError, RunTrace, TickRecord};
pub use sensor::{simulate_sensor, BandPassNoise, SensorArray, SensorConfig, SensorError};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{BlockingConvention, TrafficNetwork};

/// Slack for floating-point round-off when checking state bounds.
pub const STATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("state invariant violated on link {link}: {what} = {value}")]
    InvariantViolation {
        link: usize,
        what: &'static str,
        value: f64,
    },
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(String),
}

/// Simulation tick length, back-holding threshold and blocking convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub tick: f64,
    pub c_ug: f64,
    #[serde(default)]
    pub blocking: BlockingConvention,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            tick: 5.0,
            c_ug: 0.85,
            blocking: BlockingConvention::Downstream,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.tick > 0.0 && self.tick.is_finite()) {
            return Err(SimError::InvalidParameter(format!("tick {}", self.tick)));
        }
        if !(self.c_ug > 0.0 && self.c_ug < 1.0) {
            return Err(SimError::InvalidParameter(format!(
                "c_ug {} outside (0, 1)",
                self.c_ug
            )));
        }
        Ok(())
    }
}

/// Ground-truth occupancies and blocked vehicles at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub x: DVector<f64>,
    pub x_b: DVector<f64>,
    pub tick: u64,
}

impl SimState {
    pub fn empty(links: usize) -> Self {
        Self {
            x: DVector::zeros(links),
            x_b: DVector::zeros(links),
            tick: 0,
        }
    }

    pub fn new(x: DVector<f64>, x_b: DVector<f64>) -> Self {
        Self { x, x_b, tick: 0 }
    }

    /// Checks `0 <= x <= x_max` and `x_b >= 0`.
    pub fn check(&self, net: &TrafficNetwork) -> Result<(), SimError> {
        for z in 0..net.links() {
            if !(self.x[z] >= 0.0) {
                return Err(SimError::InvariantViolation {
                    link: z + 1,
                    what: "occupancy",
                    value: self.x[z],
                });
            }
            if !(self.x[z] <= net.x_max()[z]) {
                return Err(SimError::InvariantViolation {
                    link: z + 1,
                    what: "occupancy above capacity",
                    value: self.x[z],
                });
            }
            if !(self.x_b[z] >= 0.0) {
                return Err(SimError::InvariantViolation {
                    link: z + 1,
                    what: "blocked vehicles",
                    value: self.x_b[z],
                });
            }
        }
        Ok(())
    }
}

/// Everything a tick produced besides the next state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: SimState,
    /// Realized link outflows (veh/s).
    pub u_nl: DVector<f64>,
    /// Factual exogenous demand that entered (or left) each link (veh/s).
    pub e_nl: DVector<f64>,
    /// Negative demand (veh) that could not leave an empty link.
    pub unserved_exit: DVector<f64>,
}

/// True when some link able to hold back `z` is above `c_ug * x_max`.
pub(crate) fn is_held_back(
    z: usize,
    x: &DVector<f64>,
    net: &TrafficNetwork,
    c_ug: f64,
    convention: BlockingConvention,
) -> bool {
    net.blockers(z, convention)
        .iter()
        .any(|&w| x[w] > c_ug * net.x_max()[w])
}

/// Realized outflows: zero under back-holding, otherwise limited by the
/// vehicles present in the link.
pub fn nonlinear_outflow(
    x: &DVector<f64>,
    u_cmd: &DVector<f64>,
    net: &TrafficNetwork,
    params: &SimParams,
) -> DVector<f64> {
    DVector::from_fn(net.links(), |z, _| {
        if is_held_back(z, x, net, params.c_ug, params.blocking) {
            0.0
        } else {
            (x[z] / params.tick).min(u_cmd[z])
        }
    })
}

fn snap(value: f64, lo: f64, hi: f64) -> f64 {
    if value < lo && value > lo - STATE_TOLERANCE {
        lo
    } else if value > hi && value < hi + STATE_TOLERANCE * hi.max(1.0) {
        hi
    } else {
        value
    }
}

/// Advances one tick with already realized outflows `u_nl`.
pub fn advance(
    state: &SimState,
    u_nl: &DVector<f64>,
    e: &DVector<f64>,
    net: &TrafficNetwork,
    tick: f64,
) -> Result<StepOutcome, SimError> {
    let n = net.links();
    for (name, len) in [("x", state.x.len()), ("x_b", state.x_b.len()), ("u", u_nl.len()), ("e", e.len())] {
        if len != n {
            return Err(SimError::DimensionMismatch(format!(
                "{name} has {len} entries, network has {n} links"
            )));
        }
    }
    let routed = net.b_u() * u_nl * (tick / net.cycle());
    let mut x_next = DVector::zeros(n);
    let mut x_b_next = DVector::zeros(n);
    let mut e_nl = DVector::zeros(n);
    let mut unserved_exit = DVector::zeros(n);
    for z in 0..n {
        let x_max = net.x_max()[z];
        let excess = e[z] * tick - (x_max - state.x[z] - routed[z]);
        let (mut x_z, released) = if excess >= 0.0 {
            (state.x[z] + routed[z] + e[z] * tick - excess, -excess)
        } else {
            let released = (-excess).min(state.x_b[z]);
            (state.x[z] + routed[z] + e[z] * tick + released, released)
        };
        if x_z < -STATE_TOLERANCE {
            // Exit demand larger than what the link holds.
            unserved_exit[z] = -x_z;
            x_z = 0.0;
        }
        let x_z = snap(x_z, 0.0, x_max);
        let x_b_z = snap(state.x_b[z] - released, 0.0, f64::INFINITY);
        e_nl[z] = (x_z - state.x[z] - routed[z]) / tick;
        x_next[z] = x_z;
        x_b_next[z] = x_b_z;
    }
    let next = SimState {
        x: x_next,
        x_b: x_b_next,
        tick: state.tick + 1,
    };
    next.check(net)?;
    Ok(StepOutcome {
        state: next,
        u_nl: u_nl.clone(),
        e_nl,
        unserved_exit,
    })
}

/// One simulation tick under commanded flows `u_cmd` and demand `e`.
pub fn step(
    state: &SimState,
    u_cmd: &DVector<f64>,
    e: &DVector<f64>,
    net: &TrafficNetwork,
    params: &SimParams,
) -> Result<StepOutcome, SimError> {
    if u_cmd.len() != net.links() {
        return Err(SimError::DimensionMismatch(format!(
            "u_cmd has {} entries, network has {} links",
            u_cmd.len(),
            net.links()
        )));
    }
    let u_nl = nonlinear_outflow(&state.x, u_cmd, net, params);
    advance(state, &u_nl, e, net, params.tick)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{validate_network, JunctionSpec, LinkSpec, NetworkFile, StageSpec, TurnSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn chain() -> TrafficNetwork {
        let raw = NetworkFile {
            links: vec![
                LinkSpec {
                    id: 1,
                    x_max: 100.0,
                    sat_flow: 0.5,
                    exit_rate: 0.2,
                },
                LinkSpec {
                    id: 2,
                    x_max: 100.0,
                    sat_flow: 0.5,
                    exit_rate: 0.0,
                },
            ],
            turns: vec![TurnSpec {
                from: 1,
                to: 2,
                rate: 1.0,
            }],
            junctions: vec![
                JunctionSpec {
                    id: 1,
                    lost_time: 10.0,
                    stages: vec![StageSpec {
                        id: 1,
                        g_min: 10.0,
                        links: vec![1],
                    }],
                },
                JunctionSpec {
                    id: 2,
                    lost_time: 10.0,
                    stages: vec![StageSpec {
                        id: 2,
                        g_min: 10.0,
                        links: vec![2],
                    }],
                },
            ],
            cycle: 100.0,
        };
        validate_network(&raw).unwrap()
    }

    fn params() -> SimParams {
        SimParams::default()
    }

    #[test]
    fn outflow_branches() {
        let net = chain();
        let u = nonlinear_outflow(&dvector![10.0, 0.0], &dvector![0.4, 0.4], &net, &params());
        assert_abs_diff_eq!(u[0], 0.4, epsilon = 1e-15);
        let u = nonlinear_outflow(&dvector![1.0, 0.0], &dvector![0.4, 0.4], &net, &params());
        assert_abs_diff_eq!(u[0], 0.2, epsilon = 1e-15);
        // Link 2 at 0.9 x_max holds back link 1.
        let u = nonlinear_outflow(&dvector![10.0, 90.0], &dvector![0.4, 0.4], &net, &params());
        assert_eq!(u[0], 0.0);
        assert_abs_diff_eq!(u[1], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn literal_convention_blocks_the_other_way() {
        let net = chain();
        let p = SimParams {
            blocking: BlockingConvention::Literal,
            ..params()
        };
        let u = nonlinear_outflow(&dvector![90.0, 10.0], &dvector![0.4, 0.4], &net, &p);
        assert_abs_diff_eq!(u[0], 0.4, epsilon = 1e-15);
        assert_eq!(u[1], 0.0);
    }

    #[test]
    fn routed_flow_example() {
        let net = chain();
        let s = SimState::new(dvector![10.0, 50.0], dvector![0.0, 0.0]);
        let out = advance(&s, &dvector![0.4, 0.2], &dvector![0.0, 0.0], &net, 5.0).unwrap();
        assert_abs_diff_eq!(out.state.x, dvector![8.0, 51.0], epsilon = 1e-12);
        assert_eq!(out.state.tick, 1);
    }

    #[test]
    fn demand_blocked_at_capacity() {
        let net = chain();
        let s = SimState::new(dvector![0.0, 99.0], dvector![0.0, 2.0]);
        let out = advance(&s, &dvector![0.0, 0.0], &dvector![0.0, 1.0], &net, 5.0).unwrap();
        assert_abs_diff_eq!(out.e_nl[1], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(out.state.x[1], 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.state.x_b[1], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn backlog_released() {
        let net = chain();
        let s = SimState::new(dvector![0.0, 50.0], dvector![0.0, 3.0]);
        let out = advance(&s, &dvector![0.0, 0.0], &dvector![0.0, 0.0], &net, 5.0).unwrap();
        assert_abs_diff_eq!(out.e_nl[1], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(out.state.x[1], 53.0, epsilon = 1e-12);
        assert_eq!(out.state.x_b[1], 0.0);
    }

    #[test]
    fn negative_demand_cannot_empty_below_zero() {
        let net = chain();
        let s = SimState::new(dvector![2.0, 0.0], dvector![0.0, 0.0]);
        let out = advance(&s, &dvector![0.0, 0.0], &dvector![-1.0, 0.0], &net, 5.0).unwrap();
        assert_eq!(out.state.x[0], 0.0);
        assert_abs_diff_eq!(out.unserved_exit[0], 3.0, epsilon = 1e-12);
        assert_eq!(out.state.x_b[0], 0.0);
    }

    #[test]
    fn zero_everything_stays_zero() {
        let net = chain();
        let mut s = SimState::empty(2);
        for _ in 0..100 {
            s = step(&s, &dvector![0.45, 0.45], &dvector![0.0, 0.0], &net, &params())
                .unwrap()
                .state;
        }
        assert_eq!(s.x, dvector![0.0, 0.0]);
        assert_eq!(s.tick, 100);
    }

    #[test]
    fn params_validation() {
        assert!(SimParams { c_ug: 1.0, ..params() }.validate().is_err());
        assert!(SimParams { tick: 0.0, ..params() }.validate().is_err());
        assert!(params().validate().is_ok());
    }
}
