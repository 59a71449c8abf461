//! Finite-horizon LQ control of a time-varying system with a known
//! disturbance sequence:
//!
//! ```text
//! x_{k+1} = A_k x_k + B_k u_k + e_k
//! J = 1/2 x_N' Q_N x_N + 1/2 sum_{k<N} (x_k' Q_k x_k + u_k' R_k u_k)
//! ```
//!
//! The optimal input is `u_k = -K_k x_k - Kb_k (P_{k+1} e_k + b_{k+1})`.
//! This is the reference the infinite-horizon gains are checked against.

use nalgebra::{DMatrix, DVector};

use super::riccati::{riccati_step, solve_spd};
use super::SynthesisError;

#[derive(Debug, Clone)]
pub struct LtvSystem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub q_n: DMatrix<f64>,
    pub e: Vec<DVector<f64>>,
}

impl LtvSystem {
    /// Time-invariant matrices and disturbance repeated over `horizon` steps.
    pub fn constant(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        q_n: &DMatrix<f64>,
        e: &DVector<f64>,
        horizon: usize,
    ) -> Self {
        Self {
            a: vec![a.clone(); horizon],
            b: vec![b.clone(); horizon],
            q: vec![q.clone(); horizon],
            r: vec![r.clone(); horizon],
            q_n: q_n.clone(),
            e: vec![e.clone(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    fn check(&self) -> Result<(), SynthesisError> {
        let n = self.q_n.nrows();
        let horizon = self.horizon();
        let lens = [self.b.len(), self.q.len(), self.r.len(), self.e.len()];
        if lens.iter().any(|&l| l != horizon) {
            return Err(SynthesisError::DimensionMismatch(
                "all sequences must have the horizon length".into(),
            ));
        }
        for k in 0..horizon {
            let m = self.b[k].ncols();
            let ok = self.a[k].shape() == (n, n)
                && self.b[k].nrows() == n
                && self.q[k].shape() == (n, n)
                && self.r[k].shape() == (m, m)
                && self.e[k].len() == n;
            if !ok {
                return Err(SynthesisError::DimensionMismatch(format!(
                    "inconsistent dimensions at step {k}"
                )));
            }
        }
        Ok(())
    }

    /// Quadratic cost of a state/input trajectory.
    pub fn cost(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        let horizon = self.horizon();
        let mut j = 0.5 * xs[horizon].dot(&(&self.q_n * &xs[horizon]));
        for k in 0..horizon {
            j += 0.5 * xs[k].dot(&(&self.q[k] * &xs[k]));
            j += 0.5 * us[k].dot(&(&self.r[k] * &us[k]));
        }
        j
    }

    /// Propagates the dynamics from `x0` under the given inputs.
    pub fn simulate(&self, x0: &DVector<f64>, us: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(x0.clone());
        for (k, u) in us.iter().enumerate() {
            let x = &self.a[k] * &xs[k] + &self.b[k] * u + &self.e[k];
            xs.push(x);
        }
        xs
    }
}

/// Backward-recursion output; `p` and `b` have `N + 1` entries, the gains `N`.
#[derive(Debug, Clone)]
pub struct LtvSolution {
    pub p: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
    pub k: Vec<DMatrix<f64>>,
    pub kb: Vec<DMatrix<f64>>,
}

impl LtvSolution {
    /// Optimal input at step `k` for state `x`.
    pub fn input(&self, sys: &LtvSystem, k: usize, x: &DVector<f64>) -> DVector<f64> {
        let ff = &self.p[k + 1] * &sys.e[k] + &self.b[k + 1];
        -(&self.k[k] * x) - &self.kb[k] * ff
    }

    /// Closed-loop trajectory from `x0`; returns `(states, inputs)`.
    pub fn rollout(&self, sys: &LtvSystem, x0: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let horizon = sys.horizon();
        let mut xs = Vec::with_capacity(horizon + 1);
        let mut us = Vec::with_capacity(horizon);
        xs.push(x0.clone());
        for k in 0..horizon {
            let u = self.input(sys, k, &xs[k]);
            let x = &sys.a[k] * &xs[k] + &sys.b[k] * &u + &sys.e[k];
            us.push(u);
            xs.push(x);
        }
        (xs, us)
    }
}

pub fn ltv_lq_recursion(sys: &LtvSystem) -> Result<LtvSolution, SynthesisError> {
    sys.check()?;
    let horizon = sys.horizon();
    let n = sys.q_n.nrows();
    let mut p = vec![DMatrix::zeros(n, n); horizon + 1];
    let mut b = vec![DVector::zeros(n); horizon + 1];
    let mut k_gains = Vec::with_capacity(horizon);
    let mut kb_gains = Vec::with_capacity(horizon);
    p[horizon] = sys.q_n.clone();
    for k in (0..horizon).rev() {
        let (a_k, b_k) = (&sys.a[k], &sys.b[k]);
        let (gain, p_k) = riccati_step(a_k, b_k, &sys.q[k], &sys.r[k], &p[k + 1])?;
        let m = &sys.r[k] + b_k.transpose() * &p[k + 1] * b_k;
        let kb = solve_spd(&m, &b_k.transpose())?;
        let closed = a_k - b_k * &gain;
        b[k] = closed.transpose() * (&b[k + 1] + &p[k + 1] * &sys.e[k]);
        p[k] = p_k;
        k_gains.push(gain);
        kb_gains.push(kb);
    }
    k_gains.reverse();
    kb_gains.reverse();
    Ok(LtvSolution {
        p,
        b,
        k: k_gains,
        kb: kb_gains,
    })
}
