//! Per-link steady-state Kalman filters.
//!
//! In joint mode each link carries the augmented state `(x, e)` with
//! transition `[[1, E], [0, 1]]`: occupancy integrates the exogenous demand,
//! which itself follows a random walk. The occupancy-only mode used by the
//! baseline controller replaces the demand state with the constant historic
//! demand.

use nalgebra::{DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{BlockingConvention, TrafficNetwork};
use crate::simulator::is_held_back;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("invalid noise covariance for link {link}: {what} = {value}")]
    InvalidCovariance {
        link: usize,
        what: &'static str,
        value: f64,
    },
    #[error("invalid estimation period {0}")]
    InvalidPeriod(f64),
    #[error("filter Riccati iteration did not converge (last change {0:e})")]
    NonConvergence(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub const FILTER_TOL: f64 = 1e-12;
const FILTER_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    Joint,
    OccupancyOnly,
}

/// Process and measurement noise covariances of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkNoise {
    pub qx: f64,
    pub qe: f64,
    pub r: f64,
}

/// Steady-state filter gain with the covariances it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterGain {
    pub kx: f64,
    pub ke: f64,
    /// Steady-state predicted (a priori) error covariance.
    pub predicted: Matrix2<f64>,
    /// Steady-state filtered (a posteriori) error covariance.
    pub filtered: Matrix2<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn transition(period: f64) -> Matrix2<f64> {
    Matrix2::new(1.0, period, 0.0, 1.0)
}

/// One step of the predicted-covariance Riccati recursion for output `[1 0]`.
fn filter_riccati_step(p: &Matrix2<f64>, a: &Matrix2<f64>, q: &Matrix2<f64>, r: f64) -> Matrix2<f64> {
    let s = p[(0, 0)] + r;
    let pc = p.column(0).into_owned();
    let filtered = p - pc * pc.transpose() / s;
    let next = a * filtered * a.transpose() + q;
    (next + next.transpose()) * 0.5
}

fn check_noise(noise: &LinkNoise, link: usize, joint: bool) -> Result<(), EstimatorError> {
    let checks = [
        ("r", noise.r, noise.r > 0.0),
        ("qx", noise.qx, noise.qx > 0.0),
        ("qe", noise.qe, !joint || noise.qe >= 0.0),
    ];
    for (what, value, ok) in checks {
        if !(ok && value.is_finite()) {
            return Err(EstimatorError::InvalidCovariance { link, what, value });
        }
    }
    Ok(())
}

/// Iterates well past the tolerance so the fixed-point residual, not just
/// the last step, ends up below it; stops early once round-off stalls.
fn converged(change: f64, previous: f64, scale: f64) -> bool {
    let tol = FILTER_TOL * scale.max(1.0);
    change <= 1e-3 * tol || (change < tol && change >= previous)
}

/// Steady-state gain of the occupancy-only filter.
pub fn occupancy_gain(qx: f64, r: f64) -> Result<FilterGain, EstimatorError> {
    check_noise(&LinkNoise { qx, qe: 0.0, r }, 0, false)?;
    let mut p = qx;
    let mut change = f64::INFINITY;
    for iteration in 1..=FILTER_MAX_ITER {
        let next = p - p * p / (p + r) + qx;
        let previous = change;
        change = (next - p).abs();
        p = next;
        if converged(change, previous, p) {
            let kx = p / (p + r);
            let residual = (p - (p - p * p / (p + r) + qx)).abs();
            return Ok(FilterGain {
                kx,
                ke: 0.0,
                predicted: Matrix2::new(p, 0.0, 0.0, 0.0),
                filtered: Matrix2::new((1.0 - kx) * p, 0.0, 0.0, 0.0),
                residual,
                iterations: iteration,
            });
        }
    }
    Err(EstimatorError::NonConvergence(change))
}

/// Steady-state gain `(Kx, Ke)` of the joint occupancy/demand filter.
///
/// With `qe = 0` the demand covariance collapses to zero in the limit and the
/// filter reduces to the occupancy-only one (`Ke = 0`), which is returned
/// directly since the collapse is only algebraic.
pub fn kalman_gain(qx: f64, qe: f64, r: f64, period: f64) -> Result<FilterGain, EstimatorError> {
    if !(period > 0.0 && period.is_finite()) {
        return Err(EstimatorError::InvalidPeriod(period));
    }
    check_noise(&LinkNoise { qx, qe, r }, 0, true)?;
    if qe == 0.0 {
        return occupancy_gain(qx, r);
    }
    let a = transition(period);
    let q = Matrix2::new(qx, 0.0, 0.0, qe);
    let mut p = q;
    let mut change = f64::INFINITY;
    for iteration in 1..=FILTER_MAX_ITER {
        let next = filter_riccati_step(&p, &a, &q, r);
        let previous = change;
        change = (next - p).amax();
        p = next;
        if converged(change, previous, p.amax()) {
            let s = p[(0, 0)] + r;
            let gain = p.column(0) / s;
            let filtered = p - gain * p.row(0);
            let residual = (filter_riccati_step(&p, &a, &q, r) - p).amax();
            return Ok(FilterGain {
                kx: gain[0],
                ke: gain[1],
                predicted: p,
                filtered,
                residual,
                iterations: iteration,
            });
        }
    }
    Err(EstimatorError::NonConvergence(change))
}

/// Outflow approximation over one estimation interval, evaluated on
/// estimates clamped to `[0, x_max]`.
pub fn estimated_outflow(
    x_hat: &DVector<f64>,
    g: &DVector<f64>,
    net: &TrafficNetwork,
    period: f64,
    c_ug: f64,
    convention: BlockingConvention,
) -> DVector<f64> {
    let clamped = DVector::from_fn(net.links(), |z, _| x_hat[z].clamp(0.0, net.x_max()[z]));
    let green = net.stage_matrix() * g;
    DVector::from_fn(net.links(), |z, _| {
        if is_held_back(z, &clamped, net, c_ug, convention) {
            0.0
        } else {
            (clamped[z] / period).min(net.sat_flow()[z] * green[z] / net.cycle())
        }
    })
}

/// Filter of a single link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkFilter {
    pub x_hat: f64,
    pub e_hat: f64,
    pub gain: FilterGain,
    pub noise: LinkNoise,
}

/// Prediction `(x̂⁻, ê⁻)` from filtered estimates and the routed outflow
/// term `(E/C) * row_z(B_u) * u_est`; `demand` is `ê` in joint mode and the
/// historic demand otherwise.
pub fn predict(x_hat: f64, demand: f64, e_hat: f64, routed: f64, period: f64) -> (f64, f64) {
    (x_hat + period * demand + routed, e_hat)
}

/// Measurement update with gains `(kx, ke)`.
pub fn update(predicted: (f64, f64), y: f64, kx: f64, ke: f64) -> (f64, f64) {
    let innovation = y - predicted.0;
    (predicted.0 + kx * innovation, predicted.1 + ke * innovation)
}

/// Independent filters for every link of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorBank {
    pub mode: EstimatorMode,
    pub period: f64,
    pub e_hist: DVector<f64>,
    pub filters: Vec<LinkFilter>,
}

impl EstimatorBank {
    pub fn new(
        mode: EstimatorMode,
        period: f64,
        noise: &[LinkNoise],
        e_hist: &DVector<f64>,
    ) -> Result<Self, EstimatorError> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(EstimatorError::InvalidPeriod(period));
        }
        if noise.len() != e_hist.len() {
            return Err(EstimatorError::DimensionMismatch(format!(
                "{} noise entries for {} links",
                noise.len(),
                e_hist.len()
            )));
        }
        let filters = noise
            .iter()
            .enumerate()
            .map(|(z, n)| {
                let joint = mode == EstimatorMode::Joint;
                check_noise(n, z + 1, joint)?;
                let gain = match mode {
                    EstimatorMode::Joint => kalman_gain(n.qx, n.qe, n.r, period)?,
                    EstimatorMode::OccupancyOnly => occupancy_gain(n.qx, n.r)?,
                };
                Ok(LinkFilter {
                    x_hat: 0.0,
                    e_hat: e_hist[z],
                    gain,
                    noise: *n,
                })
            })
            .collect::<Result<Vec<_>, EstimatorError>>()?;
        Ok(Self {
            mode,
            period,
            e_hist: e_hist.clone(),
            filters,
        })
    }

    /// Sets `x̂ = y` and `ê = e_hist`.
    pub fn initialize(&mut self, y: &DVector<f64>) {
        for (z, f) in self.filters.iter_mut().enumerate() {
            f.x_hat = y[z];
            f.e_hat = self.e_hist[z];
        }
    }

    pub fn x_hat(&self) -> DVector<f64> {
        DVector::from_iterator(self.filters.len(), self.filters.iter().map(|f| f.x_hat))
    }

    /// Demand estimates; the historic demand in occupancy-only mode.
    pub fn e_hat(&self) -> DVector<f64> {
        DVector::from_iterator(self.filters.len(), self.filters.iter().map(|f| f.e_hat))
    }

    /// Predicted `(x̂⁻, ê⁻)` of link `z` given the routed-flow vector
    /// `(E/C) * B_u * u_est`.
    pub fn predict_link(&self, z: usize, routed: &DVector<f64>) -> (f64, f64) {
        let f = &self.filters[z];
        let demand = match self.mode {
            EstimatorMode::Joint => f.e_hat,
            EstimatorMode::OccupancyOnly => self.e_hist[z],
        };
        predict(f.x_hat, demand, f.e_hat, routed[z], self.period)
    }

    /// Prediction with outflow estimate `u_est` followed by the update with
    /// measurements `y`.
    pub fn step(&mut self, net: &TrafficNetwork, u_est: &DVector<f64>, y: &DVector<f64>) {
        let routed = net.b_u() * u_est * (self.period / net.cycle());
        for z in 0..self.filters.len() {
            let predicted = self.predict_link(z, &routed);
            let f = &mut self.filters[z];
            let (x, e) = update(predicted, y[z], f.gain.kx, f.gain.ke);
            f.x_hat = x;
            f.e_hat = e;
        }
    }
}

/// Augmented-state transition matrix of the joint filter.
pub fn augmented_transition(period: f64) -> Matrix2<f64> {
    transition(period)
}

/// Gain vector `[Kx, Ke]` as a column.
pub fn gain_vector(g: &FilterGain) -> Vector2<f64> {
    Vector2::new(g.kx, g.ke)
}
