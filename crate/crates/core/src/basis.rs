//! Cubic radial spline basis with per-term inclusion indicators.
//!
//! For covariate `l` the basis at time `t` is
//! `(1, t, |t - w_1|^3, ..., |t - w_M|^3)`; an [`Indicators`] vector of the
//! same length selects which terms enter the coefficient function. The
//! constant term is always selected.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::stats::quantile_sorted;

/// Knot-candidate locations per varying-coefficient covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub knots: Vec<Vec<f64>>,
}

impl BasisConfig {
    pub fn n_covariates(&self) -> usize {
        self.knots.len()
    }

    /// Number of basis terms (M_l + 2) for covariate `l`.
    pub fn width(&self, l: usize) -> usize {
        self.knots[l].len() + 2
    }

    pub fn layout(&self) -> DesignLayout {
        let widths: Vec<usize> = (0..self.n_covariates()).map(|l| self.width(l)).collect();
        let mut offsets = Vec::with_capacity(widths.len());
        let mut acc = 0;
        for w in &widths {
            offsets.push(acc);
            acc += w;
        }
        DesignLayout {
            offsets,
            widths,
            total: acc,
        }
    }

    pub fn validate(&self, dataset: &LongitudinalDataset) -> Result<()> {
        if self.knots.len() != dataset.dims().p {
            return Err(Error::validation(format!(
                "basis has {} knot sequences but the dataset has p = {}",
                self.knots.len(),
                dataset.dims().p
            )));
        }
        let (lo, hi) = dataset.time_range();
        let distinct = distinct_sorted(dataset.pooled_times()).len();
        for (l, ks) in self.knots.iter().enumerate() {
            if ks.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::validation(format!("knots for covariate {l} are not strictly increasing")));
            }
            if ks.iter().any(|&k| !(k >= lo && k <= hi)) {
                return Err(Error::validation(format!("knots for covariate {l} fall outside [{lo}, {hi}]")));
            }
            if ks.len() > distinct {
                return Err(Error::validation(format!(
                    "{} knots for covariate {l} exceed the {distinct} distinct time values",
                    ks.len()
                )));
            }
        }
        Ok(())
    }
}

/// Column bookkeeping for the full (all terms selected) design.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignLayout {
    pub offsets: Vec<usize>,
    pub widths: Vec<usize>,
    pub total: usize,
}

impl DesignLayout {
    /// Sorted full-design column indices of the selected terms.
    pub fn active_indices(&self, gammas: &[Indicators]) -> Vec<usize> {
        let mut idx = Vec::new();
        for (l, g) in gammas.iter().enumerate() {
            idx.extend(g.active().map(|m| self.offsets[l] + m));
        }
        idx
    }
}

/// Inclusion indicators for one covariate's basis terms: position 0 is the
/// constant, 1 the linear term, 2.. the knots.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Indicators(Vec<bool>);

impl Indicators {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        match bits.first() {
            Some(true) => Ok(Indicators(bits)),
            _ => Err(Error::validation("the constant basis indicator must be 1")),
        }
    }

    /// Constant term only, for `n_knots` knot candidates.
    pub fn constant_only(n_knots: usize) -> Self {
        let mut bits = vec![false; n_knots + 2];
        bits[0] = true;
        Indicators(bits)
    }

    pub fn all(n_knots: usize) -> Self {
        Indicators(vec![true; n_knots + 2])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, m: usize) -> bool {
        self.0[m]
    }

    /// Sets a selectable indicator; position 0 cannot be cleared.
    pub fn set(&mut self, m: usize, on: bool) {
        assert!(m > 0 || on, "the constant indicator cannot be cleared");
        self.0[m] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    /// Number of selected terms including the constant.
    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Number of selected terms among the linear term and knots.
    pub fn selectable_count(&self) -> usize {
        self.active_count() - 1
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

fn distinct_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Knots at the pooled sample quantiles m/(M+1), m = 1..M, of the observed
/// times, with duplicate quantiles collapsed. The same sequence is used for
/// each of the dataset's `p` covariates.
pub fn default_knots(dataset: &LongitudinalDataset, m: usize) -> Result<BasisConfig> {
    if m < 1 {
        return Err(Error::validation("need at least one knot candidate"));
    }
    let mut times = dataset.pooled_times();
    times.sort_by(f64::total_cmp);
    let distinct = distinct_sorted(times.clone()).len();
    if m > distinct {
        return Err(Error::validation(format!(
            "{m} knot candidates exceed the {distinct} distinct time values"
        )));
    }
    let mut knots: Vec<f64> = (1..=m)
        .map(|j| quantile_sorted(&times, j as f64 / (m + 1) as f64))
        .collect();
    knots.dedup();
    Ok(BasisConfig {
        knots: vec![knots; dataset.dims().p],
    })
}

pub fn basis_row(t: f64, knots: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(knots.len() + 2);
    row.push(1.0);
    row.push(t);
    row.extend(knots.iter().map(|k| (t - k).abs().powi(3)));
    row
}

fn check_gammas(gammas: &[Indicators], basis: &BasisConfig) -> Result<()> {
    if gammas.len() != basis.n_covariates()
        || gammas.iter().enumerate().any(|(l, g)| g.len() != basis.width(l))
    {
        return Err(Error::Internal("indicator dimensions do not match the basis".into()));
    }
    if gammas.iter().any(|g| !g.get(0)) {
        return Err(Error::Internal("constant indicator cleared".into()));
    }
    Ok(())
}

/// The n_i x (sum of all basis widths) design with every term selected.
pub fn full_design(subject: &SubjectRecord, basis: &BasisConfig) -> DMatrix<f64> {
    let layout = basis.layout();
    let n = subject.n_obs();
    let mut out = DMatrix::zeros(n, layout.total);
    for j in 0..n {
        for l in 0..basis.n_covariates() {
            let w = subject.w[(j, l)];
            for (m, b) in basis_row(subject.times[j], &basis.knots[l]).into_iter().enumerate() {
                out[(j, layout.offsets[l] + m)] = w * b;
            }
        }
    }
    out
}

/// Subject design restricted to the selected terms, covariate-major.
pub fn build_design(subject: &SubjectRecord, gammas: &[Indicators], basis: &BasisConfig) -> Result<DMatrix<f64>> {
    check_gammas(gammas, basis)?;
    if subject.w.ncols() != basis.n_covariates() {
        return Err(Error::Internal("subject W does not match the basis".into()));
    }
    let n = subject.n_obs();
    let cols: usize = gammas.iter().map(Indicators::active_count).sum();
    let mut out = DMatrix::zeros(n, cols);
    for j in 0..n {
        let mut c = 0;
        for (l, g) in gammas.iter().enumerate() {
            let row = basis_row(subject.times[j], &basis.knots[l]);
            let w = subject.w[(j, l)];
            for m in g.active() {
                out[(j, c)] = w * row[m];
                c += 1;
            }
        }
    }
    Ok(out)
}

/// Pooled Gram matrix over every subject in the dataset.
pub fn gram(dataset: &LongitudinalDataset, gammas: &[Indicators], basis: &BasisConfig) -> Result<DMatrix<f64>> {
    check_gammas(gammas, basis)?;
    let d: usize = gammas.iter().map(Indicators::active_count).sum();
    let mut r = DMatrix::zeros(d, d);
    for s in dataset.subjects() {
        let x = build_design(s, gammas, basis)?;
        r.gemm_tr(1.0, &x, &x, 1.0);
    }
    Ok(r)
}

/// Evaluates one coefficient function on a grid.
pub fn eval_alpha(gamma: &Indicators, phi: &[f64], knots: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if gamma.len() != knots.len() + 2 || phi.len() != gamma.active_count() {
        return Err(Error::Internal(format!(
            "eval_alpha: {} coefficients for {} selected terms",
            phi.len(),
            gamma.active_count()
        )));
    }
    Ok(grid
        .iter()
        .map(|&t| {
            let row = basis_row(t, knots);
            gamma.active().zip(phi).map(|(m, c)| row[m] * c).sum()
        })
        .collect())
}

/// Evaluates every covariate's function for a concatenated coefficient vector.
pub fn eval_alphas(gammas: &[Indicators], phi: &DVector<f64>, basis: &BasisConfig, grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut offset = 0;
    let mut out = Vec::with_capacity(gammas.len());
    for (l, g) in gammas.iter().enumerate() {
        let k = g.active_count();
        if offset + k > phi.len() {
            return Err(Error::Internal("coefficient vector too short".into()));
        }
        out.push(eval_alpha(g, &phi.as_slice()[offset..offset + k], &basis.knots[l], grid)?);
        offset += k;
    }
    Ok(out)
}
