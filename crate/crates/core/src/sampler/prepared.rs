use nalgebra::{DMatrix, DVector};

use crate::basis::{full_design, BasisConfig, DesignLayout, Indicators};
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::linalg::{self, principal, Chol};
use crate::model::{GramProvider, Hyperparams};
use crate::rand_dist::Side;

/// Per-subject quantities that do not change during sampling.
#[derive(Debug, Clone)]
pub struct SubjectCache {
    /// Full design, every basis term selected (n_i x D).
    pub w: DMatrix<f64>,
    /// W^T W (D x D).
    pub g: DMatrix<f64>,
    /// Z^T W (r x D).
    pub ztw: DMatrix<f64>,
    /// Z^T Z (r x r).
    pub ztz: DMatrix<f64>,
    pub sides: Vec<Side>,
}

/// A dataset bound to a basis and priors, with precomputed designs.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    dataset: LongitudinalDataset,
    basis: BasisConfig,
    hyper: Hyperparams,
    layout: DesignLayout,
    subjects: Vec<SubjectCache>,
    r_full: DMatrix<f64>,
    beta_prior_prec: DMatrix<f64>,
    beta_post_prec: Chol,
}

impl PreparedModel {
    pub fn new(dataset: LongitudinalDataset, basis: BasisConfig, hyper: Hyperparams) -> Result<Self> {
        basis.validate(&dataset)?;
        let dims = dataset.dims();
        hyper.validate(dims)?;
        if hyper.k > u16::MAX as usize {
            return Err(Error::validation("truncation level K is too large"));
        }
        let layout = basis.layout();
        let d = layout.total;
        let mut r_full = DMatrix::zeros(d, d);
        let mut xtx = DMatrix::zeros(dims.q, dims.q);
        let mut subjects = Vec::with_capacity(dataset.n_subjects());
        for s in dataset.subjects() {
            let w = full_design(s, &basis);
            let g = w.tr_mul(&w);
            r_full += &g;
            xtx.gemm_tr(1.0, &s.x, &s.x, 1.0);
            subjects.push(SubjectCache {
                ztw: s.z.tr_mul(&w),
                ztz: s.z.tr_mul(&s.z),
                sides: s.y.iter().map(|&y| Side::for_response(y)).collect(),
                w,
                g,
            });
        }
        linalg::symmetrize(&mut r_full);
        let beta_prior_prec = linalg::spd_inverse(&hyper.beta_cov, "beta prior covariance")?;
        let beta_post_prec = linalg::cholesky(&(&beta_prior_prec + xtx), "beta posterior precision")?;
        Ok(PreparedModel {
            dataset,
            basis,
            hyper,
            layout,
            subjects,
            r_full,
            beta_prior_prec,
            beta_post_prec,
        })
    }

    pub fn dataset(&self) -> &LongitudinalDataset {
        &self.dataset
    }

    pub fn basis(&self) -> &BasisConfig {
        &self.basis
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn layout(&self) -> &DesignLayout {
        &self.layout
    }

    pub fn subjects(&self) -> &[SubjectCache] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn k(&self) -> usize {
        self.hyper.k
    }

    /// Pooled Gram over all subjects with every term selected.
    pub fn r_full(&self) -> &DMatrix<f64> {
        &self.r_full
    }

    pub fn beta_prior_prec(&self) -> &DMatrix<f64> {
        &self.beta_prior_prec
    }

    /// Cholesky factor of P^-1 + sum_i X_i^T X_i.
    pub fn beta_post_prec(&self) -> &Chol {
        &self.beta_post_prec
    }

    /// Scatters selected-term coefficients into a full-length vector.
    pub fn scatter(&self, gammas: &[Indicators], phi: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.layout.total);
        for (pos, &i) in self.layout.active_indices(gammas).iter().enumerate() {
            out[i] = phi[pos];
        }
        out
    }
}

impl GramProvider for PreparedModel {
    fn gram(&self, gammas: &[Indicators]) -> Result<DMatrix<f64>> {
        Ok(principal(&self.r_full, &self.layout.active_indices(gammas)))
    }
}
