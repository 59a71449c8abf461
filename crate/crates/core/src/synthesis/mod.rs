//! Controller synthesis: controllability decomposition, LQ feedback gain and
//! the exogenous-demand feedforward gain.

mod decomposition;
mod ltv;
mod riccati;

pub use decomposition::{
    build_decomposition, build_q1, controllability_rank, decomposition_from_basis, dependent_columns,
    Decomposition, DECOMPOSITION_TOL, MAX_BASIS_CONDITION, RANK_REL_TOL,
};
pub use ltv::{ltv_lq_recursion, LtvSolution, LtvSystem};
pub use riccati::{
    dare_residual, feedforward_gain, feedforward_gain_general, lti_ff_gains, solve_dare, solve_dare_general,
    spectral_radius, DareOptions, DareSolution, FeedforwardGains,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::TrafficNetwork;
use crate::util::{matrix_from_rows, matrix_rows};

#[derive(Debug, Error, PartialEq)]
pub enum SynthesisError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(
        "controllability rank {rank} is below the stage count {expected}; \
         dependent stages {stages:?} (links with right of way in them: {links:?})"
    )]
    RankDeficient {
        rank: usize,
        expected: usize,
        stages: Vec<usize>,
        links: Vec<usize>,
    },
    #[error("basis matrix W is ill-conditioned (condition number {condition:e})")]
    IllConditioned { condition: f64 },
    #[error("basis does not split off the input space: uncontrollable block entry {residual:e}")]
    BasisMismatch { residual: f64 },
    #[error("Riccati iteration did not converge in {iterations} iterations (last change {change:e})")]
    NonConvergence { iterations: usize, change: f64 },
    #[error("closed loop is not stable (spectral radius {radius})")]
    NotStabilizing { radius: f64 },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("invalid weight: {0}")]
    InvalidWeight(String),
}

/// Full-state gains from controllable-component gains:
/// `K = K1 [I 0] W^-1`, `Ke = Ke1 [I 0] W^-1`.
pub fn full_gains(
    decomposition: &Decomposition,
    k1: &DMatrix<f64>,
    ke1: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = decomposition.controllable_dim();
    let top = decomposition.w_inv.rows(0, s);
    (k1 * top, ke1 * top)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub rank: usize,
    pub decomposition_residual: f64,
    pub dare_residual: f64,
    pub dare_iterations: usize,
    pub closed_loop_radius: f64,
}

/// Decomposition basis and every controller gain for one network.
#[derive(Debug, Clone)]
pub struct GainSet {
    pub decomposition: Decomposition,
    pub q1: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub k1: DMatrix<f64>,
    pub ke1: DMatrix<f64>,
    /// Feedback gain on link occupancies (`S x Z`).
    pub k: DMatrix<f64>,
    /// Feedforward gain on exogenous demand (`S x Z`).
    pub ke: DMatrix<f64>,
    pub report: SynthesisReport,
}

impl GainSet {
    /// Gains with every entry zero, for a network of the given size.
    pub fn zeros(links: usize, stages: usize) -> Self {
        Self {
            decomposition: Decomposition {
                w: DMatrix::identity(links, links),
                w_inv: DMatrix::identity(links, links),
                b_g1: DMatrix::zeros(stages, stages),
                residual: 0.0,
            },
            q1: DMatrix::zeros(stages, stages),
            r: DMatrix::identity(stages, stages),
            p: DMatrix::zeros(stages, stages),
            k1: DMatrix::zeros(stages, stages),
            ke1: DMatrix::zeros(stages, stages),
            k: DMatrix::zeros(stages, links),
            ke: DMatrix::zeros(stages, links),
            report: SynthesisReport {
                rank: 0,
                decomposition_residual: 0.0,
                dare_residual: 0.0,
                dare_iterations: 0,
                closed_loop_radius: 0.0,
            },
        }
    }
}

/// Synthesizes the gain set with input weight `R = r_weight * I`.
pub fn synthesize(net: &TrafficNetwork, r_weight: f64) -> Result<GainSet, SynthesisError> {
    if !(r_weight > 0.0 && r_weight.is_finite()) {
        return Err(SynthesisError::InvalidWeight(format!(
            "input weight must be positive, got {r_weight}"
        )));
    }
    let s = net.stages();
    synthesize_with(net, &(DMatrix::identity(s, s) * r_weight))
}

pub fn synthesize_with(net: &TrafficNetwork, r: &DMatrix<f64>) -> Result<GainSet, SynthesisError> {
    let b_g = net.b_g();
    let rank = controllability_rank(b_g);
    let decomposition = build_decomposition(b_g).map_err(|err| match err {
        SynthesisError::RankDeficient {
            rank,
            expected,
            stages,
            ..
        } => {
            let mut links: Vec<usize> = stages
                .iter()
                .flat_map(|&s| {
                    (0..net.links()).filter(move |&z| net.stage_matrix()[(z, s - 1)] != 0.0)
                })
                .map(|z| z + 1)
                .collect();
            links.sort_unstable();
            links.dedup();
            SynthesisError::RankDeficient {
                rank,
                expected,
                stages,
                links,
            }
        }
        other => other,
    })?;
    let q1 = build_q1(&decomposition.w, net.x_max(), net.stages())?;
    let a = DMatrix::identity(net.stages(), net.stages());
    let dare = solve_dare_general(&a, &decomposition.b_g1, &q1, r, DareOptions::default())?;
    if dare.closed_loop_radius >= 1.0 {
        return Err(SynthesisError::NotStabilizing {
            radius: dare.closed_loop_radius,
        });
    }
    let ke1 = feedforward_gain(&dare.p, &dare.k, &decomposition.b_g1, r)?;
    let (k, ke) = full_gains(&decomposition, &dare.k, &ke1);
    let report = SynthesisReport {
        rank,
        decomposition_residual: decomposition.residual,
        dare_residual: dare.residual,
        dare_iterations: dare.iterations,
        closed_loop_radius: dare.closed_loop_radius,
    };
    Ok(GainSet {
        decomposition,
        q1,
        r: r.clone(),
        p: dare.p,
        k1: dare.k,
        ke1,
        k,
        ke,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub rank_rel_tol: f64,
    pub decomposition_tol: f64,
    pub max_basis_condition: f64,
    pub dare_tol: f64,
    pub dare_max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        let dare = DareOptions::default();
        Self {
            rank_rel_tol: RANK_REL_TOL,
            decomposition_tol: DECOMPOSITION_TOL,
            max_basis_condition: MAX_BASIS_CONDITION,
            dare_tol: dare.tol,
            dare_max_iter: dare.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsMetadata {
    pub links: usize,
    pub stages: usize,
    pub r_weight: f64,
    pub report: SynthesisReport,
    pub tolerances: Tolerances,
}

/// On-disk form of a gain set; matrices are stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsFile {
    pub w: Vec<Vec<f64>>,
    pub w_inv: Vec<Vec<f64>>,
    pub b_g1: Vec<Vec<f64>>,
    pub q1: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub k1: Vec<Vec<f64>>,
    pub ke1: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub ke: Vec<Vec<f64>>,
    pub metadata: GainsMetadata,
}

impl GainsFile {
    pub fn from_gains(gains: &GainSet, r_weight: f64) -> Self {
        Self {
            w: matrix_rows(&gains.decomposition.w),
            w_inv: matrix_rows(&gains.decomposition.w_inv),
            b_g1: matrix_rows(&gains.decomposition.b_g1),
            q1: matrix_rows(&gains.q1),
            p: matrix_rows(&gains.p),
            k1: matrix_rows(&gains.k1),
            ke1: matrix_rows(&gains.ke1),
            k: matrix_rows(&gains.k),
            ke: matrix_rows(&gains.ke),
            metadata: GainsMetadata {
                links: gains.k.ncols(),
                stages: gains.k.nrows(),
                r_weight,
                report: gains.report.clone(),
                tolerances: Tolerances::default(),
            },
        }
    }

    /// Feedback and feedforward gains `(K, Ke)`; `None` on ragged rows.
    pub fn gain_matrices(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let (s, z) = (self.metadata.stages, self.metadata.links);
        Some((matrix_from_rows(&self.k, s, z)?, matrix_from_rows(&self.ke, s, z)?))
    }
}
