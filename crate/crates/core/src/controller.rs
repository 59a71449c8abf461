//! Green-time computation: the feedback-feedforward law followed by the
//! per-junction projection onto the green-time constraints.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{NetworkError, TrafficNetwork};
use crate::synthesis::GainSet;

/// Tolerance on the cycle equality of projected greens.
pub const CYCLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("junction {junction}: minimum greens plus lost time exceed the cycle")]
    Infeasible { junction: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Where occupancies fed to the control law come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OccupancySource {
    GroundTruth,
    Estimated,
}

/// Where the exogenous demand fed to the control law comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemandSource {
    GroundTruth,
    Estimated,
    HistoricConstant,
}

/// The four compared controller variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Tuc,
    TucFf,
    TucIdeal,
    TucFfIdeal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::TucIdeal, Variant::TucFfIdeal, Variant::TucFf, Variant::Tuc];

    pub fn sources(self) -> ControlInput {
        let (x_source, e_source) = match self {
            Variant::TucIdeal => (OccupancySource::GroundTruth, DemandSource::HistoricConstant),
            Variant::TucFfIdeal => (OccupancySource::GroundTruth, DemandSource::GroundTruth),
            Variant::TucFf => (OccupancySource::Estimated, DemandSource::Estimated),
            Variant::Tuc => (OccupancySource::Estimated, DemandSource::HistoricConstant),
        };
        ControlInput { x_source, e_source }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tuc => "tuc",
            Variant::TucFf => "tuc-ff",
            Variant::TucIdeal => "tuc-ideal",
            Variant::TucFfIdeal => "tuc-ff-ideal",
        }
    }

    /// Label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Tuc => "TUC",
            Variant::TucFf => "TUC-FF",
            Variant::TucIdeal => "TUC ideal",
            Variant::TucFfIdeal => "TUC-FF ideal",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown controller '{s}' (expected tuc, tuc-ff, tuc-ideal or tuc-ff-ideal)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlInput {
    pub x_source: OccupancySource,
    pub e_source: DemandSource,
}

/// `g = -K [x]_0^{x_max} - C Ke e`.
pub fn control_law(x: &DVector<f64>, e: &DVector<f64>, gains: &GainSet, net: &TrafficNetwork) -> DVector<f64> {
    let saturated = DVector::from_fn(x.len(), |z, _| x[z].clamp(0.0, net.x_max()[z]));
    -(&gains.k * saturated) - (&gains.ke * e) * net.cycle()
}

/// Euclidean projection of `g` onto `{h : h >= g_min, sum(h) = total}`.
///
/// The solution is `h_s = max(g_min_s, g_s + lambda)`; `lambda` is found by
/// scanning the sorted breakpoints `g_min_s - g_s`.
pub fn project_onto_budget(g: &[f64], g_min: &[f64], total: f64) -> Option<Vec<f64>> {
    let n = g.len();
    if n == 0 || g_min.len() != n {
        return None;
    }
    let floor: f64 = g_min.iter().sum();
    if floor > total + CYCLE_TOLERANCE {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let breakpoint = |s: usize| g_min[s] - g[s];
    order.sort_by(|&a, &b| breakpoint(b).total_cmp(&breakpoint(a)));
    // Stages with the largest breakpoints bind first; the free stages share
    // the remaining budget.
    let mut bound_sum = 0.0;
    let mut free_sum: f64 = g.iter().sum();
    let mut lambda = (total - free_sum) / n as f64;
    for (i, &s) in order.iter().enumerate() {
        if lambda <= breakpoint(s) {
            bound_sum += g_min[s];
            free_sum -= g[s];
            let free = n - i - 1;
            if free == 0 {
                lambda = f64::INFINITY;
                break;
            }
            lambda = (total - bound_sum - free_sum) / free as f64;
        } else {
            break;
        }
    }
    let mut h: Vec<f64> = if lambda.is_finite() {
        (0..n).map(|s| g_min[s].max(g[s] + lambda)).collect()
    } else {
        g_min.to_vec()
    };
    // Spread rounding error over the free stages so the equality is tight.
    let free: Vec<usize> = (0..n).filter(|&s| h[s] > g_min[s]).collect();
    if !free.is_empty() {
        let gap = (total - h.iter().sum::<f64>()) / free.len() as f64;
        for s in free {
            h[s] = (h[s] + gap).max(g_min[s]);
        }
    }
    Some(h)
}

/// Projects the stages of one junction: `sum(g) + lost_time = cycle`.
pub fn project_greens(g: &[f64], g_min: &[f64], lost_time: f64, cycle: f64) -> Option<Vec<f64>> {
    project_onto_budget(g, g_min, cycle - lost_time)
}

/// Projects every junction of `net`.
pub fn project_network(g_raw: &DVector<f64>, net: &TrafficNetwork) -> Result<DVector<f64>, ControlError> {
    if g_raw.len() != net.stages() {
        return Err(ControlError::DimensionMismatch(format!(
            "{} greens for {} stages",
            g_raw.len(),
            net.stages()
        )));
    }
    let mut out = DVector::zeros(net.stages());
    for (j, stages) in net.junction_stages().iter().enumerate() {
        let g: Vec<f64> = stages.iter().map(|&s| g_raw[s]).collect();
        let g_min: Vec<f64> = stages.iter().map(|&s| net.g_min()[s]).collect();
        let projected = project_greens(&g, &g_min, net.lost_time()[j], net.cycle())
            .ok_or(ControlError::Infeasible { junction: j + 1 })?;
        for (&s, v) in stages.iter().zip(projected) {
            out[s] = v;
        }
    }
    Ok(out)
}

/// Greens and commanded link flows of one control cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleControl {
    pub g_raw: DVector<f64>,
    pub g: DVector<f64>,
    pub u_cmd: DVector<f64>,
}

/// Control law, per-junction projection and the resulting link flows.
pub fn control_cycle(
    x: &DVector<f64>,
    e: &DVector<f64>,
    gains: &GainSet,
    net: &TrafficNetwork,
) -> Result<CycleControl, ControlError> {
    if x.len() != net.links() || e.len() != net.links() {
        return Err(ControlError::DimensionMismatch(format!(
            "inputs of length {} and {} for {} links",
            x.len(),
            e.len(),
            net.links()
        )));
    }
    if gains.k.shape() != (net.stages(), net.links()) || gains.ke.shape() != (net.stages(), net.links()) {
        return Err(ControlError::DimensionMismatch("gains do not match the network".into()));
    }
    let g_raw = control_law(x, e, gains, net);
    let g = project_network(&g_raw, net)?;
    let u_cmd = crate::network::flows_from_greens(&g, net)?;
    Ok(CycleControl { g_raw, g, u_cmd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    use crate::network::{validate_network, JunctionSpec, LinkSpec, NetworkFile, StageSpec};

    fn scalar_net() -> TrafficNetwork {
        let raw = NetworkFile {
            links: vec![LinkSpec {
                id: 1,
                x_max: 100.0,
                sat_flow: 0.5,
                exit_rate: 0.0,
            }],
            turns: vec![],
            junctions: vec![JunctionSpec {
                id: 1,
                lost_time: 10.0,
                stages: vec![StageSpec {
                    id: 1,
                    g_min: 10.0,
                    links: vec![1],
                }],
            }],
            cycle: 100.0,
        };
        validate_network(&raw).unwrap()
    }

    #[test]
    fn law_examples() {
        let net = scalar_net();
        let mut gains = GainSet::zeros(1, 1);
        gains.k = dmatrix![0.618];
        gains.ke = dmatrix![1.0];
        assert_eq!(control_law(&dvector![0.0], &dvector![0.0], &gains, &net), dvector![0.0]);
        let g = control_law(&dvector![10.0], &dvector![0.01], &gains, &net);
        assert_abs_diff_eq!(g[0], -7.18, epsilon = 1e-12);
        assert_eq!(
            control_law(&dvector![200.0], &dvector![0.0], &gains, &net),
            control_law(&dvector![100.0], &dvector![0.0], &gains, &net)
        );
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_greens(&[45.0, 45.0], &[10.0, 10.0], 10.0, 100.0).unwrap(), vec![45.0, 45.0]);
        let h = project_greens(&[50.0, 60.0], &[10.0, 10.0], 10.0, 100.0).unwrap();
        assert_abs_diff_eq!(h[0], 40.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h[1], 50.0, epsilon = 1e-12);
        let h = project_greens(&[5.0, 95.0], &[20.0, 20.0], 10.0, 100.0).unwrap();
        assert_eq!(h[0], 20.0);
        assert_abs_diff_eq!(h[1], 70.0, epsilon = 1e-12);
        assert!(project_greens(&[0.0, 0.0], &[50.0, 50.0], 10.0, 100.0).is_none());
    }

    #[test]
    fn zero_gains_project_origin() {
        let net = scalar_net();
        let c = control_cycle(&dvector![30.0], &dvector![0.2], &GainSet::zeros(1, 1), &net).unwrap();
        assert_eq!(c.g_raw, dvector![0.0]);
        assert_abs_diff_eq!(c.g[0], 90.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.u_cmd[0], 0.45, epsilon = 1e-12);
    }

    fn stages() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..=4).prop_flat_map(|n| {
            (
                prop::collection::vec(-100.0f64..150.0, n),
                prop::collection::vec(-100.0f64..150.0, n),
                prop::collection::vec(0.0f64..20.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_idempotent((g, _, g_min) in stages()) {
            let h = project_greens(&g, &g_min, 10.0, 100.0).unwrap();
            prop_assert!((h.iter().sum::<f64>() - 90.0).abs() < 1e-9);
            for (v, m) in h.iter().zip(&g_min) {
                prop_assert!(v >= m);
            }
            let again = project_greens(&h, &g_min, 10.0, 100.0).unwrap();
            for (a, b) in h.iter().zip(&again) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn projection_is_nonexpansive((a, b, g_min) in stages()) {
            let pa = project_greens(&a, &g_min, 10.0, 100.0).unwrap();
            let pb = project_greens(&b, &g_min, 10.0, 100.0).unwrap();
            let dist = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dist(&pa, &pb) <= dist(&a, &b) + 1e-9);
        }

        #[test]
        fn uniform_shift_is_absorbed((g, _, g_min) in stages(), shift in -50.0f64..50.0) {
            let shifted: Vec<f64> = g.iter().map(|v| v + shift).collect();
            let a = project_greens(&g, &g_min, 10.0, 100.0).unwrap();
            let b = project_greens(&shifted, &g_min, 10.0, 100.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn variant_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("mpc".parse::<Variant>().is_err());
        assert_eq!(
            Variant::TucFf.sources(),
            ControlInput {
                x_source: OccupancySource::Estimated,
                e_source: DemandSource::Estimated
            }
        );
    }
}
