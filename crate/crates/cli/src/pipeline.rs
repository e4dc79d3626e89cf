//! In-memory building blocks shared by the subcommands: data loading, model
//! preparation, posterior analysis and simulation replicates.

use funclust::basis::default_knots;
use funclust::data::{load_csv, simulate_dataset};
use funclust::diagnostics::{burn_thin, diagnose, relabel_ecr, DiagnosticsReport};
use funclust::sampler::run_chains;
use funclust::summary::{
    clustering_metrics, default_grid, fixed_param_table, modal_membership, summarize_curves, truth_aligned_bands,
    ClusteringReport, CurveSummary, FunctionBand, ParamQuantiles,
};
use funclust::{
    BasisConfig, ChainDraws, Error, LongitudinalDataset, PosteriorSamples, PreparedModel, Result, SamplerOptions,
    SimulationTruth,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BasisSpec, DataSource, RunConfig};

pub struct LoadedData {
    pub dataset: LongitudinalDataset,
    pub truth: Option<SimulationTruth>,
}

pub fn load_data(data: &DataSource) -> Result<LoadedData> {
    match data {
        DataSource::Simulation { spec, seed } => {
            let (dataset, truth) = simulate_dataset(spec, *seed)?;
            Ok(LoadedData {
                dataset,
                truth: Some(truth),
            })
        }
        DataSource::Csv {
            path,
            schema,
            time_range,
        } => {
            let mut dataset = load_csv(path, schema)?;
            if let Some(range) = time_range {
                dataset = LongitudinalDataset::with_time_range(dataset.subjects().to_vec(), *range)?;
            }
            Ok(LoadedData { dataset, truth: None })
        }
    }
}

pub fn resolve_basis(spec: &BasisSpec, dataset: &LongitudinalDataset) -> Result<BasisConfig> {
    let basis = match spec {
        BasisSpec::NKnots(m) => default_knots(dataset, *m)?,
        BasisSpec::Knots(k) => BasisConfig { knots: k.clone() },
    };
    basis.validate(dataset)?;
    Ok(basis)
}

pub fn prepare(cfg: &RunConfig, dataset: LongitudinalDataset) -> Result<PreparedModel> {
    let basis = resolve_basis(&cfg.basis, &dataset)?;
    let hyper = cfg.hyper.resolve(dataset.dims(), dataset.n_subjects())?;
    PreparedModel::new(dataset, basis, hyper)
}

pub fn sampler_options(cfg: &RunConfig) -> SamplerOptions {
    SamplerOptions {
        backend: cfg.sampler.backend,
        gamma_init: cfg.sampler.gamma_init,
        ..SamplerOptions::default()
    }
}

/// Everything derived from a set of chains.
pub struct Analysis {
    /// Absent for a single chain.
    pub diagnostics: Option<DiagnosticsReport>,
    pub samples: PosteriorSamples,
    pub curves: CurveSummary,
    pub membership: Vec<usize>,
    pub fixed: Vec<ParamQuantiles>,
    pub clustering: Option<ClusteringReport>,
    pub bands: Option<Vec<FunctionBand>>,
}

pub fn analyze(
    cfg: &RunConfig,
    model: &PreparedModel,
    chains: &[ChainDraws],
    truth: Option<&SimulationTruth>,
) -> Result<Analysis> {
    let range = model.dataset().time_range();
    let (diagnostics, relabeled) = if chains.len() >= 2 {
        let (report, relabeled) = diagnose(chains, model.basis(), range, &cfg.diagnostics)?;
        (Some(report), relabeled)
    } else {
        (None, relabel_ecr(chains, None)?)
    };
    let samples = burn_thin(&relabeled, cfg.diagnostics.burn, cfg.diagnostics.thin)?;
    drop(relabeled);
    let grid = default_grid(range, cfg.summary.n_grid);
    let curves = summarize_curves(&samples, model.basis(), &grid, cfg.summary.probs, cfg.summary.min_occupancy)?;
    let membership = modal_membership(&samples);
    let fixed = fixed_param_table(&samples, &cfg.summary.probs)?;
    let (clustering, bands) = match truth {
        Some(t) => {
            let report = clustering_metrics(&membership, &t.cluster_of)?;
            let bands = truth_aligned_bands(&curves, &report, t);
            (Some(report), Some(bands))
        }
        None => (None, None),
    };
    Ok(Analysis {
        diagnostics,
        samples,
        curves,
        membership,
        fixed,
        clustering,
        bands,
    })
}

/// Summary of one simulated replicate fit.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateOutcome {
    pub nu: f64,
    pub replicate: usize,
    pub data_seed: u64,
    pub fit_seed: u64,
    pub accuracy: f64,
    pub max_r_hat: Option<f64>,
    pub fixed: Vec<ParamQuantiles>,
    pub clustering: ClusteringReport,
    pub bands: Vec<FunctionBand>,
}

/// The concentration values a replicate study compares.
pub fn study_nus(cfg: &RunConfig) -> Vec<f64> {
    if cfg.replicate.nus.is_empty() {
        vec![cfg.hyper.nu.unwrap_or(1.0)]
    } else {
        cfg.replicate.nus.clone()
    }
}

/// Simulates replicate `j`, fits it with concentration `nu` and scores it
/// against the truth. The fit seed depends on `j` only, so different `nu`
/// share random numbers.
pub fn run_replicate(cfg: &RunConfig, nu: f64, j: usize) -> Result<ReplicateOutcome> {
    let DataSource::Simulation { spec, .. } = &cfg.data else {
        return Err(Error::validation("replicates need a simulation data source"));
    };
    let data_seed = cfg.replicate.first_seed.wrapping_add(j as u64);
    let fit_seed = cfg.sampler.seed.wrapping_add(j as u64);
    let (dataset, truth) = simulate_dataset(spec, data_seed)?;
    let mut cfg = cfg.clone();
    cfg.hyper.nu = Some(nu);
    let model = prepare(&cfg, dataset)?;
    let chains = run_chains(
        &model,
        &sampler_options(&cfg),
        fit_seed,
        cfg.sampler.n_chains,
        cfg.sampler.n_sweeps,
        &cfg.sampler.record,
    )?;
    let a = analyze(&cfg, &model, &chains, Some(&truth))?;
    let clustering = a.clustering.expect("truth supplied");
    Ok(ReplicateOutcome {
        nu,
        replicate: j,
        data_seed,
        fit_seed,
        accuracy: clustering.accuracy,
        max_r_hat: a.diagnostics.map(|d| d.max_r_hat),
        fixed: a.fixed,
        clustering,
        bands: a.bands.expect("truth supplied"),
    })
}

/// All replicates for every concentration value, grouped by value in input
/// order. Work items run in parallel; `on_done` sees them as they finish.
pub fn run_study(
    cfg: &RunConfig,
    on_done: impl Fn(&ReplicateOutcome) + Sync,
) -> Result<Vec<(f64, Vec<ReplicateOutcome>)>> {
    let nus = study_nus(cfg);
    let n = cfg.replicate.n_replicates;
    let jobs: Vec<(f64, usize)> = nus.iter().flat_map(|&nu| (0..n).map(move |j| (nu, j))).collect();
    let results: Vec<ReplicateOutcome> = jobs
        .par_iter()
        .map(|&(nu, j)| {
            let out = run_replicate(cfg, nu, j)?;
            on_done(&out);
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut grouped: Vec<(f64, Vec<ReplicateOutcome>)> = nus.iter().map(|&nu| (nu, Vec::new())).collect();
    for (out, (nu, _)) in results.into_iter().zip(&jobs) {
        let slot = grouped.iter_mut().find(|(v, _)| v == nu).expect("nu from the list");
        slot.1.push(out);
    }
    Ok(grouped)
}
