//! Posterior summaries: curve bands, fixed-parameter quantiles, memberships,
//! clustering metrics and coverage across replicates.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::assign::max_count_assignment;
use crate::basis::{eval_alphas, BasisConfig};
use crate::data::SimulationTruth;
use crate::diagnostics::PosteriorSamples;
use crate::error::{Error, Result};
use crate::stats::{mean, quantiles};

pub const DEFAULT_PROBS: [f64; 3] = [0.025, 0.5, 0.975];

/// `n` equally spaced points covering `range`, endpoints included.
pub fn default_grid(range: (f64, f64), n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (range.0 + range.1)],
        _ => (0..n)
            .map(|j| range.0 + (range.1 - range.0) * j as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCurves {
    pub cluster: usize,
    /// Mean occupancy proportion over the retained draws.
    pub occupancy: f64,
    pub minor: bool,
    /// Number of retained draws in which the cluster was occupied.
    pub n_draws: usize,
    /// One band per varying-coefficient covariate.
    pub functions: Vec<Band>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub grid: Vec<f64>,
    pub probs: [f64; 3],
    pub clusters: Vec<ClusterCurves>,
    /// Clusters never occupied in the retained draws.
    pub omitted: Vec<usize>,
}

impl CurveSummary {
    pub fn cluster(&self, k: usize) -> Option<&ClusterCurves> {
        self.clusters.iter().find(|c| c.cluster == k)
    }

    /// Tidy CSV: one row per cluster, covariate and grid point.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cluster", "covariate", "t", "median", "lower", "upper", "occupancy", "minor"])?;
        for c in &self.clusters {
            for (l, band) in c.functions.iter().enumerate() {
                for (g, &t) in self.grid.iter().enumerate() {
                    w.write_record([
                        c.cluster.to_string(),
                        l.to_string(),
                        t.to_string(),
                        band.median[g].to_string(),
                        band.lower[g].to_string(),
                        band.upper[g].to_string(),
                        c.occupancy.to_string(),
                        c.minor.to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("curve csv", e))?;
        Ok(())
    }
}

/// Point-wise quantile bands of every cluster's coefficient functions, using
/// the retained draws in which the cluster is occupied. `probs` are the
/// (lower, middle, upper) probabilities.
pub fn summarize_curves(
    samples: &PosteriorSamples,
    basis: &BasisConfig,
    grid: &[f64],
    probs: [f64; 3],
    min_occupancy: f64,
) -> Result<CurveSummary> {
    if samples.is_empty() {
        return Err(Error::validation("no posterior draws to summarize"));
    }
    let occupancy = samples.occupancy();
    let k = occupancy.len();
    let p = basis.n_covariates();
    let mut clusters = Vec::new();
    let mut omitted = Vec::new();
    for cluster in 0..k {
        // values[l][g] collects alpha_l(grid[g]) across draws.
        let mut values = vec![vec![Vec::new(); grid.len()]; p];
        let mut n_draws = 0;
        for d in &samples.draws {
            if !d.alloc.iter().any(|&c| c as usize == cluster) {
                continue;
            }
            n_draws += 1;
            let c = &d.clusters[cluster];
            for (l, curve) in eval_alphas(&c.gamma, &c.phi, basis, grid)?.into_iter().enumerate() {
                for (g, v) in curve.into_iter().enumerate() {
                    values[l][g].push(v);
                }
            }
        }
        if n_draws == 0 {
            omitted.push(cluster);
            continue;
        }
        let functions = values
            .iter()
            .map(|per_grid| {
                let mut band = Band {
                    median: Vec::with_capacity(grid.len()),
                    lower: Vec::with_capacity(grid.len()),
                    upper: Vec::with_capacity(grid.len()),
                };
                for vs in per_grid {
                    let q = quantiles(vs, &probs);
                    band.lower.push(q[0]);
                    band.median.push(q[1]);
                    band.upper.push(q[2]);
                }
                band
            })
            .collect();
        clusters.push(ClusterCurves {
            cluster,
            occupancy: occupancy[cluster],
            minor: occupancy[cluster] < min_occupancy,
            n_draws,
            functions,
        });
    }
    Ok(CurveSummary {
        grid: grid.to_vec(),
        probs,
        clusters,
        omitted,
    })
}

/// Most frequent label of each subject; ties go to the lowest label.
pub fn modal_membership(samples: &PosteriorSamples) -> Vec<usize> {
    let Some(first) = samples.draws.first() else {
        return Vec::new();
    };
    let k = first.clusters.len();
    let n = first.alloc.len();
    let mut counts = vec![vec![0usize; k]; n];
    for d in &samples.draws {
        for (i, &c) in d.alloc.iter().enumerate() {
            counts[i][c as usize] += 1;
        }
    }
    counts
        .iter()
        .map(|row| {
            let best = *row.iter().max().unwrap_or(&0);
            row.iter().position(|&c| c == best).unwrap_or(0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub true_cluster: usize,
    pub estimated: Option<usize>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub accuracy: f64,
    /// `confusion[true][estimated]`.
    pub confusion: Vec<Vec<usize>>,
    /// Estimated cluster matched to each true cluster.
    pub matching: Vec<Option<usize>>,
    pub scores: Vec<ClusterScore>,
    /// Proportion of subjects per estimated label.
    pub occupancy: Vec<f64>,
}

/// Matches estimated to true clusters by maximizing agreement, then reports
/// accuracy and per-cluster precision, recall and F1.
pub fn clustering_metrics(membership: &[usize], truth: &[usize]) -> Result<ClusteringReport> {
    if membership.len() != truth.len() || truth.is_empty() {
        return Err(Error::validation("membership and truth must have the same non-zero length"));
    }
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let ke = membership.iter().max().map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0usize; ke]; kt];
    for (&e, &t) in membership.iter().zip(truth) {
        confusion[t][e] += 1;
    }
    let matching = max_count_assignment(&confusion);
    let n = truth.len();
    let correct: usize = matching
        .iter()
        .enumerate()
        .filter_map(|(t, m)| m.map(|e| confusion[t][e]))
        .sum();
    let scores = matching
        .iter()
        .enumerate()
        .map(|(t, &m)| {
            let size_t: usize = confusion[t].iter().sum();
            let (precision, recall) = match m {
                Some(e) => {
                    let size_e: usize = confusion.iter().map(|row| row[e]).sum();
                    let hit = confusion[t][e] as f64;
                    (
                        if size_e > 0 { hit / size_e as f64 } else { 0.0 },
                        if size_t > 0 { hit / size_t as f64 } else { 0.0 },
                    )
                }
                None => (0.0, 0.0),
            };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClusterScore {
                true_cluster: t,
                estimated: m,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let mut occupancy = vec![0.0; ke];
    for &e in membership {
        occupancy[e] += 1.0 / n as f64;
    }
    Ok(ClusteringReport {
        accuracy: correct as f64 / n as f64,
        confusion,
        matching,
        scores,
        occupancy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamQuantiles {
    pub name: String,
    pub mean: f64,
    pub probs: Vec<f64>,
    pub quantiles: Vec<f64>,
}

/// Quantiles of beta and of the upper triangle of Psi.
pub fn fixed_param_table(samples: &PosteriorSamples, probs: &[f64]) -> Result<Vec<ParamQuantiles>> {
    let Some(first) = samples.draws.first() else {
        return Err(Error::validation("no posterior draws to summarize"));
    };
    let mut rows = Vec::new();
    let mut push = |name: String, values: Vec<f64>| {
        rows.push(ParamQuantiles {
            name,
            mean: mean(&values),
            probs: probs.to_vec(),
            quantiles: quantiles(&values, probs),
        });
    };
    for j in 0..first.beta.len() {
        push(format!("beta[{j}]"), samples.draws.iter().map(|d| d.beta[j]).collect());
    }
    let r = first.psi.nrows();
    for a in 0..r {
        for b in a..r {
            push(format!("psi[{a},{b}]"), samples.draws.iter().map(|d| d.psi[(a, b)]).collect());
        }
    }
    Ok(rows)
}

/// A band for one true function from one replicate, with the true values on
/// the same grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionBand {
    pub name: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub truth: Vec<f64>,
}

impl FunctionBand {
    pub fn covered(&self) -> Vec<bool> {
        self.truth
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (lo, hi))| lo <= t && t <= hi)
            .collect()
    }
}

/// Bands of the estimated clusters matched to each true cluster, named
/// `a{k+1}{l+1}` after the true cluster and covariate. A true cluster with no
/// matched (or no summarized) estimate gets an empty band, which covers
/// nothing.
pub fn truth_aligned_bands(curves: &CurveSummary, report: &ClusteringReport, truth: &SimulationTruth) -> Vec<FunctionBand> {
    let mut out = Vec::new();
    for (k, fns) in truth.alphas.iter().enumerate() {
        let est = report.matching.get(k).copied().flatten().and_then(|e| curves.cluster(e));
        for (l, f) in fns.iter().enumerate() {
            let truth_vals: Vec<f64> = curves.grid.iter().map(|&t| f.eval(t)).collect();
            let (lower, upper) = match est {
                Some(c) => (c.functions[l].lower.clone(), c.functions[l].upper.clone()),
                None => (vec![f64::NAN; curves.grid.len()], vec![f64::NAN; curves.grid.len()]),
            };
            out.push(FunctionBand {
                name: format!("a{}{}", k + 1, l + 1),
                lower,
                upper,
                truth: truth_vals,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionCoverage {
    pub name: String,
    /// Fraction of replicates covering the truth at each grid point.
    pub pointwise: Vec<f64>,
    /// Grid average of `pointwise`.
    pub average: f64,
}

/// Per-function coverage across replicates; `replicates[r]` holds the bands
/// of replicate `r`, in the same function order for every replicate.
pub fn coverage_study(replicates: &[Vec<FunctionBand>]) -> Result<Vec<FunctionCoverage>> {
    let Some(first) = replicates.first() else {
        return Err(Error::validation("coverage needs at least one replicate"));
    };
    let mut out = Vec::with_capacity(first.len());
    for (f, band) in first.iter().enumerate() {
        let g = band.truth.len();
        let mut hits = vec![0usize; g];
        for rep in replicates {
            let b = rep
                .get(f)
                .filter(|b| b.name == band.name && b.truth.len() == g)
                .ok_or_else(|| Error::validation("replicates disagree on the function list or grid"))?;
            for (h, c) in hits.iter_mut().zip(b.covered()) {
                *h += c as usize;
            }
        }
        let pointwise: Vec<f64> = hits.iter().map(|&h| h as f64 / replicates.len() as f64).collect();
        out.push(FunctionCoverage {
            name: band.name.clone(),
            average: mean(&pointwise),
            pointwise,
        });
    }
    Ok(out)
}
