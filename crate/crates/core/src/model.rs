//! Model parameters, hyperparameters and the truncated stick-breaking prior.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::basis::{BasisConfig, Indicators};
use crate::data::{Dims, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::linalg::{self, rows_serde};
use crate::rand_dist::{categorical_draw, inv_gamma, mvn_prec};

/// Fully resolved prior settings for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Truncation level (maximum number of clusters).
    pub k: usize,
    /// Dirichlet-process concentration.
    pub nu: f64,
    /// Beta-binomial shapes for the knot indicators.
    pub a: f64,
    pub b: f64,
    /// Prior covariance of the fixed effects.
    #[serde(with = "rows_serde")]
    pub beta_cov: DMatrix<f64>,
    /// Inverse-Wishart degrees of freedom and scale for Psi.
    pub iw_df: f64,
    #[serde(with = "rows_serde")]
    pub iw_scale: DMatrix<f64>,
    /// Inverse-gamma prior on each cluster scale tau_k.
    pub tau_shape: f64,
    pub tau_scale: f64,
}

/// User-facing hyperparameter overrides; unset fields take defaults that
/// depend on the data dimensions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub k: Option<usize>,
    pub nu: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub beta_cov: Option<Vec<Vec<f64>>>,
    pub iw_df: Option<f64>,
    pub iw_scale: Option<Vec<Vec<f64>>>,
}

impl HyperConfig {
    pub fn resolve(&self, dims: Dims, n_subjects: usize) -> Result<Hyperparams> {
        let mut h = Hyperparams::defaults(dims, n_subjects);
        if let Some(k) = self.k {
            h.k = k;
        }
        if let Some(nu) = self.nu {
            h.nu = nu;
        }
        if let Some(a) = self.a {
            h.a = a;
        }
        if let Some(b) = self.b {
            h.b = b;
        }
        if let Some(rows) = &self.beta_cov {
            h.beta_cov = linalg::from_rows(rows)?;
        }
        if let Some(df) = self.iw_df {
            h.iw_df = df;
        }
        if let Some(rows) = &self.iw_scale {
            h.iw_scale = linalg::from_rows(rows)?;
        }
        h.validate(dims)?;
        Ok(h)
    }
}

impl Hyperparams {
    /// K = 10, nu = 1, a = b = 1, P = 100 I, IW(r + 2, I), tau ~ IG(1/2, N/2).
    pub fn defaults(dims: Dims, n_subjects: usize) -> Self {
        Hyperparams {
            k: 10,
            nu: 1.0,
            a: 1.0,
            b: 1.0,
            beta_cov: DMatrix::identity(dims.q, dims.q) * 100.0,
            iw_df: dims.r as f64 + 2.0,
            iw_scale: DMatrix::identity(dims.r, dims.r),
            tau_shape: 0.5,
            tau_scale: n_subjects as f64 / 2.0,
        }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        if self.k < 1 {
            return Err(Error::validation("truncation level K must be at least 1"));
        }
        if !(self.nu > 0.0 && self.a > 0.0 && self.b > 0.0) {
            return Err(Error::validation("nu, a and b must be positive"));
        }
        if self.beta_cov.shape() != (dims.q, dims.q) || !linalg::is_spd(&self.beta_cov) {
            return Err(Error::validation(format!("beta prior covariance must be a {0}x{0} SPD matrix", dims.q)));
        }
        if self.iw_scale.shape() != (dims.r, dims.r) || !linalg::is_spd(&self.iw_scale) {
            return Err(Error::validation(format!("inverse-Wishart scale must be a {0}x{0} SPD matrix", dims.r)));
        }
        if !(self.iw_df > dims.r as f64 - 1.0) {
            return Err(Error::validation("inverse-Wishart degrees of freedom must exceed r - 1"));
        }
        if !(self.tau_shape > 0.0 && self.tau_scale > 0.0) {
            return Err(Error::validation("tau prior parameters must be positive"));
        }
        Ok(())
    }
}

/// Unnormalized log beta-binomial mass of one covariate's indicators.
///
/// The count runs over the M_l + 1 selectable terms (linear and knots); the
/// always-on constant is not counted.
pub fn log_prior_gamma(gamma: &Indicators, a: f64, b: f64) -> f64 {
    let selectable = gamma.len() - 1;
    let c = gamma.selectable_count();
    ln_beta(c as f64 + a, (selectable - c) as f64 + b)
}

/// Source of pooled Gram matrices for arbitrary indicator patterns.
pub trait GramProvider {
    fn gram(&self, gammas: &[Indicators]) -> Result<DMatrix<f64>>;
}

/// Parameters of one mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    pub gamma: Vec<Indicators>,
    /// Coefficients of the selected terms, covariate-major.
    pub phi: DVector<f64>,
    pub tau: f64,
}

impl ClusterParams {
    pub fn dim(&self) -> usize {
        self.gamma.iter().map(Indicators::active_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi.len() != self.dim() {
            return Err(Error::validation(format!(
                "cluster has {} coefficients for {} selected terms",
                self.phi.len(),
                self.dim()
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::validation("cluster scale tau must be positive"));
        }
        Ok(())
    }
}

/// Draws one covariate's indicators from the beta-binomial prior: first the
/// count, then a uniformly chosen subset of that size.
pub fn draw_gamma_prior<R: Rng + ?Sized>(n_knots: usize, a: f64, b: f64, rng: &mut R) -> Result<Indicators> {
    let selectable = n_knots + 1;
    let log_w: Vec<f64> = (0..=selectable)
        .map(|c| {
            ln_binomial(selectable, c) + ln_beta(c as f64 + a, (selectable - c) as f64 + b)
        })
        .collect();
    let count = categorical_draw(&log_w, rng)?;
    let mut g = Indicators::constant_only(n_knots);
    for m in sample(rng, selectable, count) {
        g.set(m + 1, true);
    }
    Ok(g)
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    statrs::function::factorial::ln_binomial(n as u64, k as u64)
}

/// tau ~ IG(shape, scale) and phi | tau ~ N(0, tau R^-1) for fixed indicators.
pub fn draw_phi_tau<R: Rng + ?Sized>(
    gamma: &[Indicators],
    hyper: &Hyperparams,
    grams: &dyn GramProvider,
    rng: &mut R,
) -> Result<(DVector<f64>, f64)> {
    let tau = inv_gamma(hyper.tau_shape, hyper.tau_scale, rng)?;
    let r = grams.gram(gamma)?;
    let phi = mvn_prec(&DVector::zeros(r.nrows()), &(r / tau), rng)?;
    Ok((phi, tau))
}

/// A fresh cluster from the base measure.
pub fn draw_from_base_measure<R: Rng + ?Sized>(
    hyper: &Hyperparams,
    basis: &BasisConfig,
    grams: &dyn GramProvider,
    rng: &mut R,
) -> Result<ClusterParams> {
    let gamma = basis
        .knots
        .iter()
        .map(|k| draw_gamma_prior(k.len(), hyper.a, hyper.b, rng))
        .collect::<Result<Vec<_>>>()?;
    let (phi, tau) = draw_phi_tau(&gamma, hyper, grams, rng)?;
    Ok(ClusterParams { gamma, phi, tau })
}

/// Stick-breaking fractions; the last one is fixed at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct StickState {
    v: Vec<f64>,
}

impl StickState {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        match v.last() {
            None => return Err(Error::validation("stick vector is empty")),
            Some(&last) if last != 1.0 => return Err(Error::validation("last stick fraction must be 1")),
            _ => {}
        }
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::validation("stick fractions must lie in [0, 1]"));
        }
        Ok(StickState { v })
    }

    /// All fractions 0.5 except the final 1.
    pub fn halves(k: usize) -> Self {
        let mut v = vec![0.5; k];
        v[k - 1] = 1.0;
        StickState { v }
    }

    pub fn fractions(&self) -> &[f64] {
        &self.v
    }

    pub(crate) fn set(&mut self, k: usize, value: f64) {
        debug_assert!(k + 1 < self.v.len());
        self.v[k] = value;
    }

    pub fn weights(&self) -> Vec<f64> {
        stick_weights(&self.v)
    }
}

/// pi_k = V_k * prod_{l < k} (1 - V_l).
pub fn stick_weights(v: &[f64]) -> Vec<f64> {
    let mut remaining = 1.0;
    v.iter()
        .map(|&vk| {
            let w = vk * remaining;
            remaining *= 1.0 - vk;
            w
        })
        .collect()
}

/// Complete sampler state for one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub clusters: Vec<ClusterParams>,
    pub sticks: StickState,
    /// 0-based cluster of each subject.
    pub alloc: Vec<usize>,
    pub beta: DVector<f64>,
    /// Random effects, one r-vector per subject.
    pub b: Vec<DVector<f64>>,
    pub psi: DMatrix<f64>,
    /// Latent utilities, one n_i-vector per subject.
    pub latent: Vec<DVector<f64>>,
}

impl ChainState {
    pub fn occupancy(&self) -> Vec<usize> {
        let mut m = vec![0; self.clusters.len()];
        for &c in &self.alloc {
            m[c] += 1;
        }
        m
    }

    pub fn validate(&self, dataset: &LongitudinalDataset, basis: &BasisConfig) -> Result<()> {
        let dims = dataset.dims();
        let k = self.clusters.len();
        let n = dataset.n_subjects();
        if self.sticks.fractions().len() != k {
            return Err(Error::validation("stick vector length differs from cluster count"));
        }
        if self.alloc.len() != n || self.alloc.iter().any(|&c| c >= k) {
            return Err(Error::validation("allocation vector has wrong length or out-of-range labels"));
        }
        if self.beta.len() != dims.q {
            return Err(Error::validation("beta has wrong length"));
        }
        if self.psi.shape() != (dims.r, dims.r) || !linalg::is_spd(&self.psi) {
            return Err(Error::validation("Psi must be an r x r SPD matrix"));
        }
        if self.b.len() != n || self.b.iter().any(|b| b.len() != dims.r) {
            return Err(Error::validation("random effects have wrong shape"));
        }
        if self.latent.len() != n {
            return Err(Error::validation("latent utilities have wrong shape"));
        }
        for (s, l) in dataset.subjects().iter().zip(&self.latent) {
            if l.len() != s.n_obs() {
                return Err(Error::validation(format!("latent vector of subject {} has wrong length", s.id)));
            }
            if s.y.iter().zip(l.iter()).any(|(&y, &v)| (y == 1) != (v > 0.0)) {
                return Err(Error::validation(format!(
                    "latent utilities of subject {} disagree with the responses",
                    s.id
                )));
            }
        }
        for c in &self.clusters {
            if c.gamma.len() != basis.n_covariates()
                || c.gamma.iter().enumerate().any(|(l, g)| g.len() != basis.width(l) || !g.get(0))
            {
                return Err(Error::validation("cluster indicators do not match the basis"));
            }
            c.validate()?;
        }
        Ok(())
    }
}
