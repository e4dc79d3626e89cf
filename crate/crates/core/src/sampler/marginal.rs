//! Quantities with the random effects (and coefficients) integrated out.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det, principal, spd_inverse, subvector};

/// (I + Z Psi Z^T)^-1 v computed through the r x r system
/// I - Z (Psi^-1 + Z^T Z)^-1 Z^T.
pub fn marginal_precision_apply(z: &DMatrix<f64>, psi: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    if z.nrows() != v.len() || z.ncols() != psi.nrows() {
        return Err(Error::Internal("marginal_precision_apply: dimension mismatch".into()));
    }
    if z.ncols() == 0 {
        return Ok(v.clone());
    }
    let core = spd_inverse(psi, "random-effect covariance")? + z.tr_mul(z);
    let chol = cholesky(&core, "marginal precision core")?;
    let inner = chol.solve(&z.tr_mul(v));
    Ok(v - z * inner)
}

/// Gaussian part of the log marginal likelihood of one cluster's indicator
/// pattern after integrating out its coefficients:
/// -1/2 [d log tau + log|Xi + R/tau| - log|R|] + 1/2 xi^T (Xi + R/tau)^-1 xi.
pub fn log_marginal_gaussian(xi_mat: &DMatrix<f64>, xi_vec: &DVector<f64>, r: &DMatrix<f64>, tau: f64) -> Result<f64> {
    let d = r.nrows();
    let a = xi_mat + r / tau;
    let chol_a = cholesky(&a, "indicator update posterior precision")?;
    let chol_r = cholesky(r, "indicator update Gram")?;
    let u = chol_a
        .l_dirty()
        .solve_lower_triangular(xi_vec)
        .ok_or_else(|| Error::numerical("indicator update triangular solve"))?;
    Ok(-0.5 * (d as f64 * tau.ln() + log_det(&chol_a) - log_det(&chol_r)) + 0.5 * u.norm_squared())
}

/// Data summaries for one cluster on the full design: Xi = sum W^T S W and
/// xi = sum W^T S e, where S is the (marginal or conditional) observation
/// precision and e the working residual.
#[derive(Debug, Clone)]
pub struct ClusterSuff {
    pub xi_mat: DMatrix<f64>,
    pub xi_vec: DVector<f64>,
    pub members: usize,
}

impl ClusterSuff {
    pub fn zeros(d: usize) -> Self {
        ClusterSuff {
            xi_mat: DMatrix::zeros(d, d),
            xi_vec: DVector::zeros(d),
            members: 0,
        }
    }

    /// Restriction to the selected columns.
    pub fn select(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        (principal(&self.xi_mat, idx), subvector(&self.xi_vec, idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rand_dist::{mvn_prec, std_normal, RngStream};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = RngStream::new(seed).rng();
        DMatrix::from_fn(rows, cols, |_, _| std_normal(&mut rng))
    }

    fn dense(z: &DMatrix<f64>, psi: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::identity(z.nrows(), z.nrows()) + z * psi * z.transpose();
        m.lu().solve(v).unwrap()
    }

    #[test]
    fn woodbury_matches_dense_inverse() {
        for (n, r, seed) in [(1, 1, 1), (5, 1, 2), (7, 3, 3), (4, 4, 4), (2, 3, 5)] {
            let z = random_matrix(n, r, seed);
            let a = random_matrix(r, r, seed + 100);
            let psi = &a * a.transpose() + DMatrix::identity(r, r) * 0.5;
            let v = DVector::from_column_slice(random_matrix(n, 1, seed + 200).as_slice());
            let got = marginal_precision_apply(&z, &psi, &v).unwrap();
            let want = dense(&z, &psi, &v);
            assert!((got - want).amax() < 1e-10);
        }
    }

    #[test]
    fn sherman_morrison_example() {
        // r = 1, Z = 1_n: (I + psi 11^T)^-1 = I - psi/(1 + n psi) 11^T.
        let n = 6;
        let psi = 0.7;
        let z = DMatrix::from_element(n, 1, 1.0);
        let v = DVector::from_fn(n, |i, _| i as f64 - 2.0);
        let got = marginal_precision_apply(&z, &DMatrix::from_element(1, 1, psi), &v).unwrap();
        let s: f64 = v.iter().sum();
        for i in 0..n {
            let want = v[i] - psi / (1.0 + n as f64 * psi) * s;
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn no_random_effects_is_identity() {
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let got = marginal_precision_apply(&DMatrix::zeros(2, 0), &DMatrix::zeros(0, 0), &v).unwrap();
        assert_eq!(got, v);
    }

    #[test]
    fn log_marginal_matches_dense_gaussian_density() {
        // e ~ N(0, S^-1 + tau W R^-1 W^T) with S = I; compare the closed form
        // (up to the phi-free constant) with the dense density ratio between
        // two patterns sharing the same data.
        let n = 8;
        let w_full = random_matrix(n, 3, 11);
        let e = DVector::from_column_slice(random_matrix(n, 1, 12).as_slice());
        let r_full = w_full.tr_mul(&w_full) + DMatrix::identity(3, 3);
        let tau = 1.7;
        let dense_logpdf = |idx: &[usize]| {
            let w = w_full.select_columns(idx);
            let r = principal(&r_full, idx);
            let cov = DMatrix::identity(n, n) + &w * r.clone().try_inverse().unwrap() * w.transpose() * tau;
            let chol = cov.clone().cholesky().unwrap();
            let ld: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            -0.5 * ld - 0.5 * e.dot(&chol.solve(&e))
        };
        let closed = |idx: &[usize]| {
            let w = w_full.select_columns(idx);
            let r = principal(&r_full, idx);
            log_marginal_gaussian(&w.tr_mul(&w), &w.tr_mul(&e), &r, tau).unwrap() - 0.5 * e.norm_squared()
        };
        for idx in [vec![0], vec![0, 1], vec![0, 2], vec![0, 1, 2]] {
            assert!((dense_logpdf(&idx) - closed(&idx)).abs() < 1e-9, "{idx:?}");
        }
    }

    #[test]
    fn log_marginal_monte_carlo() {
        // E_phi[ N(e; W phi, I) ] with phi ~ N(0, tau R^-1), estimated by
        // averaging over prior draws, against the closed form.
        let n = 4;
        let w = random_matrix(n, 2, 21) * 0.5;
        let e = DVector::from_column_slice(random_matrix(n, 1, 22).as_slice()) * 0.5;
        let r = w.tr_mul(&w) + DMatrix::identity(2, 2);
        let tau = 0.8;
        let mut rng = RngStream::new(23).rng();
        let draws = 400_000;
        let mut acc = 0.0;
        let prec = &r / tau;
        for _ in 0..draws {
            let phi = mvn_prec(&DVector::zeros(2), &prec, &mut rng).unwrap();
            acc += (-0.5 * (&e - &w * phi).norm_squared()).exp();
        }
        let mc = (acc / draws as f64).ln();
        let closed = log_marginal_gaussian(&w.tr_mul(&w), &w.tr_mul(&e), &r, tau).unwrap() - 0.5 * e.norm_squared();
        assert!((mc - closed).abs() < 0.01, "{mc} vs {closed}");
    }
}
