//! Convergence checks, label-switching correction and burn-in/thinning.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assign::min_cost_assignment;
use crate::basis::{basis_row, BasisConfig};
use crate::draws::{ChainDraws, Draw};
use crate::error::{Error, Result};
use crate::model::ClusterParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GelmanRubin {
    /// Square root of the potential scale reduction factor.
    pub value: f64,
    /// Set when the pooled within-chain variance is zero.
    pub degenerate: bool,
}

/// Gelman-Rubin statistic on the second half of each trace. Values below 1
/// (possible when the between-chain spread is smaller than expected) are
/// reported as 1.
pub fn gelman_rubin(traces: &[Vec<f64>]) -> Result<GelmanRubin> {
    let m = traces.len();
    if m < 2 {
        return Err(Error::validation("Gelman-Rubin needs at least two chains"));
    }
    let len = traces[0].len();
    if traces.iter().any(|t| t.len() != len) {
        return Err(Error::validation("chains have different lengths"));
    }
    let n = len / 2;
    if n < 2 {
        return Err(Error::validation("chains are too short for Gelman-Rubin"));
    }
    let halves: Vec<&[f64]> = traces.iter().map(|t| &t[len - n..]).collect();
    let means: Vec<f64> = halves.iter().map(|h| crate::stats::mean(h)).collect();
    let w = halves.iter().map(|h| crate::stats::variance(h)).sum::<f64>() / m as f64;
    let b_over_n = crate::stats::variance(&means);
    if !(w > 0.0) {
        return Ok(GelmanRubin {
            value: 1.0,
            degenerate: true,
        });
    }
    let nf = n as f64;
    let v_hat = (nf - 1.0) / nf * w + b_over_n;
    Ok(GelmanRubin {
        value: (v_hat / w).sqrt().max(1.0),
        degenerate: false,
    })
}

/// One draw after relabeling. Cluster-indexed blocks are permuted; the stick
/// fractions are replaced by the mixture weights they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedDraw {
    pub chain: u64,
    pub sweep: u64,
    pub log_post: f64,
    pub beta: DVector<f64>,
    pub psi: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub clusters: Vec<ClusterParams>,
    pub alloc: Vec<u16>,
}

impl MixedDraw {
    fn from_draw(chain: u64, d: &Draw) -> Self {
        MixedDraw {
            chain,
            sweep: d.sweep,
            log_post: d.log_post,
            beta: d.beta.clone(),
            psi: d.psi.clone(),
            weights: crate::model::stick_weights(&d.sticks),
            clusters: d.clusters.clone(),
            alloc: d.alloc.clone(),
        }
    }

    /// Applies `perm[old] = new` to every cluster-indexed block.
    pub fn permute(&mut self, perm: &[usize]) {
        let k = self.clusters.len();
        let mut clusters = self.clusters.clone();
        let mut weights = vec![0.0; k];
        for (old, &new) in perm.iter().enumerate() {
            clusters[new] = self.clusters[old].clone();
            weights[new] = self.weights[old];
        }
        self.clusters = clusters;
        self.weights = weights;
        for c in &mut self.alloc {
            *c = perm[*c as usize] as u16;
        }
    }

    pub fn occupancy(&self) -> Vec<usize> {
        let mut m = vec![0; self.clusters.len()];
        for &c in &self.alloc {
            m[c as usize] += 1;
        }
        m
    }
}

/// Label permutation (`perm[old] = new`) minimizing the number of subjects
/// whose label differs from the pivot.
pub fn ecr_permutation(alloc: &[u16], pivot: &[u16], k: usize) -> Vec<usize> {
    let mut agree = vec![vec![0usize; k]; k];
    for (&a, &p) in alloc.iter().zip(pivot) {
        agree[a as usize][p as usize] += 1;
    }
    let n = alloc.len() as f64;
    let cost: Vec<Vec<f64>> = agree
        .iter()
        .map(|row| row.iter().map(|&c| n - c as f64).collect())
        .collect();
    min_cost_assignment(&cost)
}

/// The recorded allocation with the highest complete-data log posterior
/// across all chains: (chain, sweep, allocation).
pub fn select_pivot(chains: &[ChainDraws]) -> Result<(u64, u64, Vec<u16>)> {
    chains
        .iter()
        .flat_map(|c| c.draws.iter().map(move |d| (c.chain, d)))
        .filter(|(_, d)| d.log_post.is_finite())
        .max_by(|a, b| a.1.log_post.total_cmp(&b.1.log_post))
        .map(|(c, d)| (c, d.sweep, d.alloc.clone()))
        .ok_or_else(|| Error::validation("no draws to choose a pivot from"))
}

/// Relabels every draw of every chain against the pivot allocation (by
/// default the maximum-log-posterior draw).
pub fn relabel_ecr(chains: &[ChainDraws], pivot: Option<&[u16]>) -> Result<Vec<Vec<MixedDraw>>> {
    let chosen;
    let pivot = match pivot {
        Some(p) => p,
        None => {
            chosen = select_pivot(chains)?.2;
            &chosen
        }
    };
    chains
        .iter()
        .map(|c| {
            c.draws
                .iter()
                .map(|d| {
                    if d.alloc.len() != pivot.len() {
                        return Err(Error::validation("pivot length differs from the number of subjects"));
                    }
                    let mut m = MixedDraw::from_draw(c.chain, d);
                    let perm = ecr_permutation(&d.alloc, pivot, d.k());
                    m.permute(&perm);
                    Ok(m)
                })
                .collect()
        })
        .collect()
}

/// Indices of the records kept after discarding the first `burn` fraction of
/// sweeps and keeping every `thin`-th sweep of the rest.
pub fn retained_indices(sweeps: &[u64], burn: f64, thin: u64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&burn) {
        return Err(Error::validation("burn fraction must lie in [0, 1)"));
    }
    if thin < 1 {
        return Err(Error::validation("thin must be at least 1"));
    }
    let last = sweeps.iter().copied().max().unwrap_or(0);
    let start = if burn == 0.0 {
        0
    } else {
        (burn * last as f64).floor() as u64 + 1
    };
    Ok(sweeps
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= start && (s - start) % thin == 0)
        .map(|(i, _)| i)
        .collect())
}

/// Pooled post-burn-in, thinned draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub draws: Vec<MixedDraw>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Mean occupancy proportion of each cluster.
    pub fn occupancy(&self) -> Vec<f64> {
        let Some(first) = self.draws.first() else {
            return Vec::new();
        };
        let k = first.clusters.len();
        let n = first.alloc.len() as f64;
        let mut acc = vec![0.0; k];
        for d in &self.draws {
            for (a, m) in acc.iter_mut().zip(d.occupancy()) {
                *a += m as f64 / n;
            }
        }
        acc.iter().map(|a| a / self.draws.len() as f64).collect()
    }
}

pub fn burn_thin(chains: &[Vec<MixedDraw>], burn: f64, thin: u64) -> Result<PosteriorSamples> {
    let mut draws = Vec::new();
    for chain in chains {
        let sweeps: Vec<u64> = chain.iter().map(|d| d.sweep).collect();
        draws.extend(retained_indices(&sweeps, burn, thin)?.into_iter().map(|i| chain[i].clone()));
    }
    if draws.is_empty() {
        return Err(Error::validation("no draws retained after burn-in and thinning"));
    }
    Ok(PosteriorSamples { draws })
}

/// Scalar functionals monitored for convergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selector {
    Beta { index: usize },
    Psi { row: usize, col: usize },
    Weight { cluster: usize },
    Alpha { cluster: usize, covariate: usize, t: f64 },
}

impl Selector {
    pub fn label(&self) -> String {
        match self {
            Selector::Beta { index } => format!("beta[{index}]"),
            Selector::Psi { row, col } => format!("psi[{row},{col}]"),
            Selector::Weight { cluster } => format!("weight[{cluster}]"),
            Selector::Alpha { cluster, covariate, t } => format!("alpha[{cluster},{covariate}]({t})"),
        }
    }

    pub fn eval(&self, d: &MixedDraw, basis: &BasisConfig) -> f64 {
        match *self {
            Selector::Beta { index } => d.beta[index],
            Selector::Psi { row, col } => d.psi[(row, col)],
            Selector::Weight { cluster } => d.weights[cluster],
            Selector::Alpha { cluster, covariate, t } => alpha_at(&d.clusters[cluster], basis, covariate, t),
        }
    }
}

/// alpha_l(t) for one cluster.
pub fn alpha_at(c: &ClusterParams, basis: &BasisConfig, covariate: usize, t: f64) -> f64 {
    let offset: usize = c.gamma[..covariate].iter().map(|g| g.active_count()).sum();
    let row = basis_row(t, &basis.knots[covariate]);
    c.gamma[covariate]
        .active()
        .zip(&c.phi.as_slice()[offset..])
        .map(|(m, coef)| row[m] * coef)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub burn: f64,
    pub thin: u64,
    /// Time points at which varying coefficients are monitored; defaults to
    /// `n_grid_points` equally spaced interior points of the time range.
    pub grid_points: Option<Vec<f64>>,
    pub n_grid_points: usize,
    /// Clusters whose mean retained occupancy falls below this are minor and
    /// are not monitored.
    pub min_occupancy: f64,
    pub threshold: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            burn: 0.5,
            thin: 5,
            grid_points: None,
            n_grid_points: 5,
            min_occupancy: 0.01,
            threshold: 1.1,
        }
    }
}

impl DiagnosticsConfig {
    pub fn monitored_times(&self, range: (f64, f64)) -> Vec<f64> {
        match &self.grid_points {
            Some(g) => g.clone(),
            None => {
                let n = self.n_grid_points;
                (1..=n)
                    .map(|j| range.0 + (range.1 - range.0) * j as f64 / (n + 1) as f64)
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticEntry {
    pub selector: Selector,
    pub label: String,
    pub r_hat: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub pivot_chain: u64,
    pub pivot_sweep: u64,
    pub major_clusters: Vec<usize>,
    pub occupancy: Vec<f64>,
    pub entries: Vec<DiagnosticEntry>,
    pub max_r_hat: f64,
    pub threshold: f64,
    pub converged: bool,
}

impl DiagnosticsReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["selector", "r_hat", "degenerate"])?;
        for e in &self.entries {
            w.write_record([e.label.clone(), e.r_hat.to_string(), e.degenerate.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("diagnostics csv", e))?;
        Ok(())
    }
}

/// Relabels the chains, then computes the statistic for every monitored
/// selector on each chain's thinned trace.
pub fn diagnose(
    chains: &[ChainDraws],
    basis: &BasisConfig,
    time_range: (f64, f64),
    config: &DiagnosticsConfig,
) -> Result<(DiagnosticsReport, Vec<Vec<MixedDraw>>)> {
    if chains.len() < 2 {
        return Err(Error::validation("diagnostics need at least two chains"));
    }
    let (pivot_chain, pivot_sweep, pivot) = select_pivot(chains)?;
    let relabeled = relabel_ecr(chains, Some(&pivot))?;
    let pooled = burn_thin(&relabeled, config.burn, config.thin)?;
    let occupancy = pooled.occupancy();
    let major: Vec<usize> = (0..occupancy.len())
        .filter(|&k| occupancy[k] >= config.min_occupancy)
        .collect();
    let first = &pooled.draws[0];
    let mut selectors = Vec::new();
    selectors.extend((0..first.beta.len()).map(|index| Selector::Beta { index }));
    for row in 0..first.psi.nrows() {
        selectors.extend((row..first.psi.ncols()).map(|col| Selector::Psi { row, col }));
    }
    let times = config.monitored_times(time_range);
    for &cluster in &major {
        for covariate in 0..basis.n_covariates() {
            selectors.extend(times.iter().map(|&t| Selector::Alpha { cluster, covariate, t }));
        }
    }
    let kept: Vec<Vec<&MixedDraw>> = relabeled
        .iter()
        .map(|chain| {
            let sweeps: Vec<u64> = chain.iter().map(|d| d.sweep).collect();
            Ok(retained_indices(&sweeps, 0.0, config.thin)?
                .into_iter()
                .map(|i| &chain[i])
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(selectors.len());
    for s in selectors {
        let traces: Vec<Vec<f64>> = kept
            .iter()
            .map(|chain| chain.iter().map(|d| s.eval(d, basis)).collect())
            .collect();
        let gr = gelman_rubin(&traces)?;
        entries.push(DiagnosticEntry {
            label: s.label(),
            selector: s,
            r_hat: gr.value,
            degenerate: gr.degenerate,
        });
    }
    let max_r_hat = entries.iter().map(|e| e.r_hat).fold(1.0, f64::max);
    let report = DiagnosticsReport {
        pivot_chain,
        pivot_sweep,
        major_clusters: major,
        occupancy,
        max_r_hat,
        threshold: config.threshold,
        converged: max_r_hat < config.threshold,
        entries,
    };
    Ok((report, relabeled))
}
