//! Controllable/uncontrollable split of the store-and-forward system.
//!
//! The state matrix of the network model is the identity, so the
//! controllability matrix is `[B_g B_g ... B_g]` and its column space is the
//! column space of `B_g`.

use nalgebra::{DMatrix, DVector};

use super::SynthesisError;

/// Relative singular-value threshold for numerical rank.
pub const RANK_REL_TOL: f64 = 1e-10;
/// Largest accepted condition number of the basis `W`.
pub const MAX_BASIS_CONDITION: f64 = 1e12;
/// Tolerance on the uncontrollable block of `W^-1 B_g`.
pub const DECOMPOSITION_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Decomposition {
    /// First `S` columns span the column space of `B_g`.
    pub w: DMatrix<f64>,
    pub w_inv: DMatrix<f64>,
    /// Input matrix of the controllable component (`S x S`).
    pub b_g1: DMatrix<f64>,
    /// Largest entry of the bottom `(Z - S) x S` block of `W^-1 B_g`.
    pub residual: f64,
}

impl Decomposition {
    pub fn controllable_dim(&self) -> usize {
        self.b_g1.nrows()
    }

    /// Controllable coordinates `z1` of a state (or demand) vector.
    pub fn controllable_part(&self, x: &DVector<f64>) -> DVector<f64> {
        let s = self.controllable_dim();
        self.w_inv.rows(0, s) * x
    }
}

fn rank_threshold(m: &DMatrix<f64>, sigma_max: f64) -> f64 {
    m.nrows().max(m.ncols()) as f64 * sigma_max * RANK_REL_TOL
}

/// Numerical rank of `B_g`, which equals the rank of the controllability matrix.
pub fn controllability_rank(b_g: &DMatrix<f64>) -> usize {
    if b_g.is_empty() {
        return 0;
    }
    let sv = b_g.singular_values();
    let sigma_max = sv.max();
    if sigma_max == 0.0 {
        return 0;
    }
    let threshold = rank_threshold(b_g, sigma_max);
    sv.iter().filter(|&&s| s > threshold).count()
}

/// Indices of columns of `b_g` taking part in a linear dependency.
pub fn dependent_columns(b_g: &DMatrix<f64>) -> Vec<usize> {
    let n = b_g.ncols();
    if b_g.is_empty() {
        return Vec::new();
    }
    // Null space of B_g is the null space of B_g^T B_g.
    let gram = b_g.transpose() * b_g;
    let eig = gram.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let threshold = (rank_threshold(b_g, scale.sqrt())).powi(2);
    let mut involved = vec![false; n];
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= threshold {
            let v = eig.eigenvectors.column(i);
            let vmax = v.amax();
            for (s, &c) in v.iter().enumerate() {
                if c.abs() > 1e-6 * vmax {
                    involved[s] = true;
                }
            }
        }
    }
    (0..n).filter(|&s| involved[s]).collect()
}

fn bottom_block_residual(w_inv: &DMatrix<f64>, b_g: &DMatrix<f64>) -> f64 {
    let s = b_g.ncols();
    let z = b_g.nrows();
    let transformed = w_inv * b_g;
    if z == s {
        0.0
    } else {
        transformed.rows(s, z - s).amax()
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

fn finish(b_g: &DMatrix<f64>, w: DMatrix<f64>, w_inv: DMatrix<f64>) -> Result<Decomposition, SynthesisError> {
    let s = b_g.ncols();
    let residual = bottom_block_residual(&w_inv, b_g);
    if residual > DECOMPOSITION_TOL {
        return Err(SynthesisError::BasisMismatch { residual });
    }
    let b_g1 = (&w_inv * b_g).rows(0, s).into_owned();
    Ok(Decomposition {
        w,
        w_inv,
        b_g1,
        residual,
    })
}

fn require_full_rank(b_g: &DMatrix<f64>) -> Result<(), SynthesisError> {
    let rank = controllability_rank(b_g);
    if rank != b_g.ncols() || b_g.ncols() > b_g.nrows() {
        return Err(SynthesisError::RankDeficient {
            rank,
            expected: b_g.ncols(),
            stages: dependent_columns(b_g).into_iter().map(|s| s + 1).collect(),
            links: Vec::new(),
        });
    }
    Ok(())
}

/// Builds `W` from the left singular vectors of `B_g`, completed with an
/// orthonormal basis of the orthogonal complement.
pub fn build_decomposition(b_g: &DMatrix<f64>) -> Result<Decomposition, SynthesisError> {
    require_full_rank(b_g)?;
    let z = b_g.nrows();
    let s = b_g.ncols();
    let svd = b_g.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors were requested");
    let mut stacked = DMatrix::zeros(z, s + z);
    stacked.columns_mut(0, s).copy_from(&u.columns(0, s));
    stacked
        .columns_mut(s, z)
        .copy_from(&DMatrix::<f64>::identity(z, z));
    // Householder QR keeps the span of the leading columns.
    let w = stacked.qr().q();
    let cond = condition_number(&w);
    if cond > MAX_BASIS_CONDITION {
        return Err(SynthesisError::IllConditioned { condition: cond });
    }
    let w_inv = w.transpose();
    finish(b_g, w, w_inv)
}

/// Uses a caller-supplied basis `W`, verifying that its first `S` columns
/// span the column space of `B_g`.
pub fn decomposition_from_basis(b_g: &DMatrix<f64>, w: DMatrix<f64>) -> Result<Decomposition, SynthesisError> {
    require_full_rank(b_g)?;
    let z = b_g.nrows();
    if w.nrows() != z || w.ncols() != z {
        return Err(SynthesisError::DimensionMismatch(format!(
            "basis must be {z}x{z}, got {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    let cond = condition_number(&w);
    if cond > MAX_BASIS_CONDITION {
        return Err(SynthesisError::IllConditioned { condition: cond });
    }
    let w_inv = w
        .clone()
        .try_inverse()
        .ok_or(SynthesisError::IllConditioned {
            condition: f64::INFINITY,
        })?;
    finish(b_g, w, w_inv)
}

/// Weight on the controllable component that corresponds to penalizing the
/// relative occupancy `x^T diag(1/x_max) x`.
pub fn build_q1(w: &DMatrix<f64>, x_max: &DVector<f64>, s: usize) -> Result<DMatrix<f64>, SynthesisError> {
    if let Some(&bad) = x_max.iter().find(|v| !(**v > 0.0)) {
        return Err(SynthesisError::InvalidWeight(format!(
            "x_max must be positive, got {bad}"
        )));
    }
    if w.nrows() != x_max.len() || s > w.ncols() {
        return Err(SynthesisError::DimensionMismatch(
            "basis and x_max sizes disagree".into(),
        ));
    }
    let w1 = w.columns(0, s);
    let inv_max = x_max.map(|v| 1.0 / v);
    let weighted = DMatrix::from_fn(w1.nrows(), s, |i, j| inv_max[i] * w1[(i, j)]);
    let q1 = w1.transpose() * weighted;
    Ok((&q1 + q1.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_examples() {
        assert_eq!(controllability_rank(&dmatrix![-0.5, 0.0; 0.5, -0.5]), 2);
        assert_eq!(controllability_rank(&dmatrix![-1.0; 1.0]), 1);
        assert_eq!(controllability_rank(&DMatrix::zeros(3, 2)), 0);
    }

    #[test]
    fn dependent_columns_are_reported() {
        let b = dmatrix![1.0, 2.0, 0.0; 1.0, 2.0, 0.0; 0.0, 0.0, 1.0];
        assert_eq!(controllability_rank(&b), 2);
        assert_eq!(dependent_columns(&b), vec![0, 1]);
        assert!(matches!(
            build_decomposition(&b),
            Err(SynthesisError::RankDeficient { rank: 2, expected: 3, .. })
        ));
    }

    #[test]
    fn hand_basis_example() {
        let b = dmatrix![-1.0; 1.0];
        let d = decomposition_from_basis(&b, dmatrix![-1.0, 1.0; 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(&d.w_inv * &b, dmatrix![1.0; 0.0], epsilon = 1e-15);
        assert_abs_diff_eq!(d.b_g1, dmatrix![1.0], epsilon = 1e-15);
        assert_abs_diff_eq!(d.w_inv, dmatrix![-0.5, 0.5; 0.5, 0.5], epsilon = 1e-15);
    }

    #[test]
    fn wrong_basis_rejected() {
        let b = dmatrix![-1.0; 1.0];
        assert!(matches!(
            decomposition_from_basis(&b, DMatrix::identity(2, 2)),
            Err(SynthesisError::BasisMismatch { .. })
        ));
        assert!(matches!(
            decomposition_from_basis(&b, dmatrix![-1.0, -1.0; 1.0, 1.0 + 1e-14]),
            Err(SynthesisError::IllConditioned { .. })
        ));
    }

    #[test]
    fn square_full_rank_is_already_controllable() {
        let b = dmatrix![-0.5, 0.0; 0.5, -0.5];
        let d = decomposition_from_basis(&b, DMatrix::identity(2, 2)).unwrap();
        assert_eq!(d.b_g1, b);
        let d = build_decomposition(&b).unwrap();
        assert_eq!(d.controllable_dim(), 2);
        assert_abs_diff_eq!(&d.w * &d.b_g1, b, epsilon = 1e-12);
    }

    #[test]
    fn random_tall_inputs_split_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let b = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
            let d = build_decomposition(&b).unwrap();
            let t = &d.w_inv * &b;
            assert!(t.rows(2, 2).norm() < 1e-9);
            assert_abs_diff_eq!(&d.w * &d.w_inv, DMatrix::identity(4, 4), epsilon = 1e-9);
        }
    }

    #[test]
    fn q1_examples() {
        let q1 = build_q1(&DMatrix::identity(2, 2), &dvector![2.0, 4.0], 2).unwrap();
        assert_abs_diff_eq!(q1, dmatrix![0.5, 0.0; 0.0, 0.25], epsilon = 1e-15);

        let c = std::f64::consts::FRAC_1_SQRT_2;
        let w = dmatrix![c, -c; c, c];
        let q1 = build_q1(&w, &dvector![1.0, 1.0], 2).unwrap();
        assert_abs_diff_eq!(q1, DMatrix::identity(2, 2), epsilon = 1e-15);

        assert!(build_q1(&w, &dvector![1.0, 0.0], 2).is_err());
    }

    #[test]
    fn q1_is_psd_for_random_bases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let w = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-2.0..2.0));
            let x_max = DVector::from_fn(5, |_, _| rng.random_range(10.0..200.0));
            let q1 = build_q1(&w, &x_max, 3).unwrap();
            assert_eq!(q1, q1.transpose());
            assert!(q1.symmetric_eigenvalues().min() >= -1e-12);
        }
    }
}
