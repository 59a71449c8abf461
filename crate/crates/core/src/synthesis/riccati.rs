//! Discrete algebraic Riccati equation and the constant-disturbance
//! feedforward gain.
//!
//! The DARE is solved by running the finite-horizon Riccati recursion
//! backwards until it stops moving:
//!
//! ```text
//! K = (R + B'PB)^-1 B'PA
//! P <- Q + A'P(A - BK)
//! ```

use nalgebra::DMatrix;

use super::SynthesisError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DareOptions {
    /// Stop once `max|P_k - P_{k+1}| < tol * max(1, max|P|)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 1_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub iterations: usize,
    /// `max|P - Q - A'P(A - BK)|` at the returned solution.
    pub residual: f64,
    /// Spectral radius of `A - BK`.
    pub closed_loop_radius: f64,
}

/// Constant-disturbance LQ gains: `u = -K x - Ke e`.
#[derive(Debug, Clone)]
pub struct FeedforwardGains {
    pub k: DMatrix<f64>,
    pub ke: DMatrix<f64>,
    pub dare: DareSolution,
}

pub(crate) fn solve_spd(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, SynthesisError> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    m.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| SynthesisError::Singular("R + B'PB is singular".into()))
}

fn check_square(name: &str, m: &DMatrix<f64>, n: usize) -> Result<(), SynthesisError> {
    if m.nrows() != n || m.ncols() != n {
        return Err(SynthesisError::DimensionMismatch(format!(
            "{name} must be {n}x{n}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<(), SynthesisError> {
    let n = a.nrows();
    check_square("A", a, n)?;
    check_square("Q", q, n)?;
    check_square("R", r, b.ncols())?;
    if b.nrows() != n {
        return Err(SynthesisError::DimensionMismatch(format!(
            "B must have {n} rows, got {}",
            b.nrows()
        )));
    }
    if r.symmetric_eigenvalues().min() <= 0.0 {
        return Err(SynthesisError::InvalidWeight("R must be positive definite".into()));
    }
    Ok(())
}

/// One backward Riccati step: returns `(K, P_k)` given `P_{k+1}`.
pub(crate) fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p_next: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SynthesisError> {
    let bt_p = b.transpose() * p_next;
    let m = r + &bt_p * b;
    let k = solve_spd(&m, &(&bt_p * a))?;
    let p = q + a.transpose() * p_next * (a - b * &k);
    Ok((k, (&p + p.transpose()) * 0.5))
}

pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> f64 {
    (p - q - a.transpose() * p * (a - b * k)).amax()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// General DARE for `x+ = A x + B u` with stage cost `x'Qx + u'Ru`.
pub fn solve_dare_general(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: DareOptions,
) -> Result<DareSolution, SynthesisError> {
    check_dims(a, b, q, r)?;
    let mut p = (q + q.transpose()) * 0.5;
    let mut change = f64::INFINITY;
    for iteration in 1..=opts.max_iter {
        let (_, next) = riccati_step(a, b, q, r, &p)?;
        change = (&next - &p).amax();
        p = next;
        if !change.is_finite() {
            break;
        }
        if change < opts.tol * p.amax().max(1.0) {
            let bt_p = b.transpose() * &p;
            let k = solve_spd(&(r + &bt_p * b), &(&bt_p * a))?;
            let residual = dare_residual(a, b, q, &p, &k);
            let closed_loop_radius = spectral_radius(&(a - b * &k));
            return Ok(DareSolution {
                p,
                k,
                iterations: iteration,
                residual,
                closed_loop_radius,
            });
        }
    }
    Err(SynthesisError::NonConvergence {
        iterations: opts.max_iter,
        change,
    })
}

/// DARE of the controllable component, whose state matrix is the identity.
/// Returns `(P, K1)`.
pub fn solve_dare(
    b_g1: &DMatrix<f64>,
    q1: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SynthesisError> {
    let a = DMatrix::identity(b_g1.nrows(), b_g1.nrows());
    let sol = solve_dare_general(&a, b_g1, q1, r, DareOptions::default())?;
    Ok((sol.p, sol.k))
}

/// `Ke = (R + B'PB)^-1 B' (I - (A - BK)')^-1 P`.
pub fn feedforward_gain_general(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> Result<DMatrix<f64>, SynthesisError> {
    let n = a.nrows();
    if p.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(b.ncols(), n));
    }
    let inner = DMatrix::identity(n, n) - (a - b * k).transpose();
    let inner_p = inner
        .lu()
        .solve(p)
        .ok_or_else(|| SynthesisError::Singular("I - (A - BK)' is singular".into()))?;
    let bt_p = b.transpose() * p;
    solve_spd(&(r + &bt_p * b), &(b.transpose() * inner_p))
}

/// Feedforward gain of the controllable component (state matrix identity).
pub fn feedforward_gain(
    p: &DMatrix<f64>,
    k1: &DMatrix<f64>,
    b_g1: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, SynthesisError> {
    let a = DMatrix::identity(b_g1.nrows(), b_g1.nrows());
    feedforward_gain_general(&a, b_g1, r, p, k1)
}

/// Infinite-horizon feedback and constant-disturbance feedforward gains.
pub fn lti_ff_gains(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<FeedforwardGains, SynthesisError> {
    let dare = solve_dare_general(a, b, q, r, DareOptions::default())?;
    let ke = feedforward_gain_general(a, b, r, &dare.p, &dare.k)?;
    Ok(FeedforwardGains {
        k: dare.k.clone(),
        ke,
        dare,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn scalar(v: f64) -> DMatrix<f64> {
        dmatrix![v]
    }

    #[test]
    fn scalar_integrator_golden_ratio() {
        let (p, k) = solve_dare(&scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert_abs_diff_eq!(p[(0, 0)], phi, epsilon = 1e-10);
        assert_abs_diff_eq!(k[(0, 0)], phi - 1.0, epsilon = 1e-10);
        let ke = feedforward_gain(&p, &k, &scalar(1.0), &scalar(1.0)).unwrap();
        assert_abs_diff_eq!(ke[(0, 0)], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn scalar_integrator_gain_two() {
        // 4P^2 - 4P - 1 = 0
        let (p, k) = solve_dare(&scalar(2.0), &scalar(1.0), &scalar(1.0)).unwrap();
        let expected = (1.0 + 2f64.sqrt()) / 2.0;
        assert_abs_diff_eq!(p[(0, 0)], expected, epsilon = 1e-10);
        assert_abs_diff_eq!(k[(0, 0)], 2f64.sqrt() - 1.0, epsilon = 1e-10);
        let ke = feedforward_gain(&p, &k, &scalar(2.0), &scalar(1.0)).unwrap();
        assert_abs_diff_eq!(ke[(0, 0)], 0.5, epsilon = 1e-10);
    }

    #[test]
    fn zero_state_weight() {
        let (p, k) = solve_dare(&scalar(1.0), &scalar(0.0), &scalar(1.0)).unwrap();
        assert_eq!(p[(0, 0)], 0.0);
        assert_eq!(k[(0, 0)], 0.0);
        let ke = feedforward_gain(&p, &k, &scalar(1.0), &scalar(1.0)).unwrap();
        assert_eq!(ke[(0, 0)], 0.0);

        let g = lti_ff_gains(&scalar(0.5), &scalar(1.0), &scalar(0.0), &scalar(1.0)).unwrap();
        assert_eq!((g.k[(0, 0)], g.ke[(0, 0)]), (0.0, 0.0));
    }

    #[test]
    fn general_scalar_matches_lemma_two_case() {
        let g = lti_ff_gains(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert_abs_diff_eq!(g.k[(0, 0)], (5f64.sqrt() - 1.0) / 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(g.ke[(0, 0)], 1.0, epsilon = 1e-10);
        assert!(g.dare.residual < 1e-9);
        assert!(g.dare.closed_loop_radius < 1.0);
    }

    #[test]
    fn matrix_residual_and_stability() {
        let a = dmatrix![1.1, 0.3; 0.0, 0.9];
        let b = dmatrix![0.0; 1.0];
        let sol = solve_dare_general(&a, &b, &DMatrix::identity(2, 2), &scalar(0.1), DareOptions::default())
            .unwrap();
        assert!(sol.residual < 1e-9);
        assert!(sol.closed_loop_radius < 1.0);
        assert_eq!(sol.p, sol.p.transpose());
    }

    #[test]
    fn non_convergence_is_reported() {
        let opts = DareOptions {
            tol: 1e-12,
            max_iter: 3,
        };
        let err = solve_dare_general(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0), opts).unwrap_err();
        assert!(matches!(err, SynthesisError::NonConvergence { iterations: 3, .. }));
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(matches!(
            solve_dare(&scalar(1.0), &scalar(1.0), &scalar(0.0)),
            Err(SynthesisError::InvalidWeight(_))
        ));
        assert!(matches!(
            solve_dare(&dmatrix![1.0, 0.0], &scalar(1.0), &scalar(1.0)),
            Err(SynthesisError::DimensionMismatch(_))
        ));
    }
}
