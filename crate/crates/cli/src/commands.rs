//! Subcommands: each reads a validated config, writes its outputs and a
//! manifest into the output directory, and reports progress on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use funclust::data::write_csv;
use funclust::diagnostics::diagnose;
use funclust::draws::{read_checkpoint, read_draws, write_checkpoint, Checkpoint, DrawWriter, StoreLayout, FORMAT_VERSION};
use funclust::summary::{coverage_study, FunctionCoverage};
use funclust::{
    BasisConfig, ChainDraws, ColumnSchema, Error, Hyperparams, PreparedModel, Result, Sampler, SimulationSpec,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BasisSpec, DataSource, Overrides, RunConfig};
use crate::pipeline::{analyze, load_data, prepare, run_study, sampler_options, ReplicateOutcome};

pub const MANIFEST: &str = "manifest.json";

/// Written next to every command's outputs; enough to rerun the command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub format_version: u32,
    pub command: String,
    pub config: RunConfig,
    /// Resolved knots and priors, when a model was built.
    pub basis: Option<BasisConfig>,
    pub hyper: Option<Hyperparams>,
    pub files: Vec<String>,
}

impl Manifest {
    fn new(command: &str, config: &RunConfig, model: Option<&PreparedModel>, files: Vec<String>) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            format_version: FORMAT_VERSION,
            command: command.to_string(),
            config: config.clone(),
            basis: model.map(|m| m.basis().clone()),
            hyper: model.map(|m| m.hyper().clone()),
            files,
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("funclust: {}", msg.as_ref());
}

/// Schema of files written by `simulate`: columns `w1..wp`, `x1..xq`,
/// `z1..zr`.
pub fn simulation_schema(spec: &SimulationSpec) -> ColumnSchema {
    let names = |prefix: &str, n: usize| (1..=n).map(|i| format!("{prefix}{i}")).collect();
    ColumnSchema {
        subject: "subject".into(),
        time: "time".into(),
        response: "y".into(),
        w: names("w", spec.alphas[0].len()),
        x: names("x", spec.beta.len()),
        z: names("z", spec.psi.len()),
        w_intercept: false,
        x_intercept: false,
        z_intercept: false,
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let DataSource::Simulation { spec, seed } = &cfg.data else {
        return Err(Error::validation("simulate needs a simulation data source"));
    };
    let data = load_data(&cfg.data)?;
    let dir = &cfg.output;
    create_dir(dir)?;
    let schema = simulation_schema(spec);
    write_csv(&data.dataset, &schema, create_file(&dir.join("data.csv"))?)?;
    write_json(&dir.join("schema.json"), &schema)?;
    write_json(&dir.join("truth.json"), &data.truth)?;
    let files = ["data.csv", "schema.json", "truth.json"].map(String::from).to_vec();
    write_json(&dir.join(MANIFEST), &Manifest::new("simulate", cfg, None, files))?;
    progress(format!(
        "simulated {} subjects ({} observations, seed {seed}) into {}",
        data.dataset.n_subjects(),
        data.dataset.n_observations(),
        dir.display()
    ));
    Ok(())
}

fn draws_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("chain_{chain}.draws"))
}

fn checkpoint_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("chain_{chain}.ckpt"))
}

fn fit_files(n_chains: usize) -> Vec<String> {
    (0..n_chains)
        .flat_map(|c| [format!("chain_{c}.draws"), format!("chain_{c}.ckpt")])
        .collect()
}

/// Runs one chain from `sampler`'s current position to `target` sweeps,
/// appending to `writer` and checkpointing along the way.
fn advance_chain(
    cfg: &RunConfig,
    mut sampler: Sampler<'_>,
    mut writer: DrawWriter,
    layout: &StoreLayout,
    ckpt: &Path,
    target: u64,
) -> Result<()> {
    let chain = sampler.chain();
    let every = match cfg.sampler.checkpoint_every {
        0 => target.max(1),
        n => n,
    };
    let record = &cfg.sampler.record;
    loop {
        let done = sampler.sweeps_done();
        let chunk = (every - done % every).min(target - done);
        sampler.run(chunk, record, |d| writer.write(&d))?;
        writer.flush()?;
        let cp = Checkpoint {
            chain,
            seed: cfg.sampler.seed,
            sweeps: sampler.sweeps_done(),
            state: sampler.state().clone(),
        };
        write_checkpoint(ckpt, &cp, layout)?;
        progress(format!("chain {chain}: sweep {}/{target}", cp.sweeps));
        if sampler.sweeps_done() >= target {
            return Ok(());
        }
    }
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let data = load_data(&cfg.data)?;
    let model = prepare(cfg, data.dataset)?;
    let dir = &cfg.output;
    create_dir(dir)?;
    let n = cfg.sampler.n_chains;
    write_json(&dir.join(MANIFEST), &Manifest::new("fit", cfg, Some(&model), fit_files(n)))?;
    let layout = StoreLayout::new(&model, &cfg.sampler.record);
    progress(format!(
        "fitting {n} chain(s) x {} sweeps, {} subjects, K = {}",
        cfg.sampler.n_sweeps,
        model.n_subjects(),
        model.k()
    ));
    (0..n).into_par_iter().try_for_each(|c| {
        let sampler = Sampler::new(&model, sampler_options(cfg), cfg.sampler.seed, c as u64)?;
        let mut writer = DrawWriter::create(draws_path(dir, c), c as u64, layout.clone())?;
        writer.write(&sampler.draw(&cfg.sampler.record)?)?;
        advance_chain(cfg, sampler, writer, &layout, &checkpoint_path(dir, c), cfg.sampler.n_sweeps)
    })
}

/// Continues an interrupted or finished fit in `dir` up to the configured
/// number of sweeps. Only the sweep count may differ from the original run.
pub fn resume(dir: &Path, overrides: &Overrides) -> Result<()> {
    let manifest = Manifest::read(dir)?;
    if manifest.command != "fit" {
        return Err(Error::validation(format!("{} was not written by fit", dir.display())));
    }
    let mut cfg = manifest.config.clone();
    let fixed = Overrides {
        sweeps: None,
        out: None,
        ..overrides.clone()
    };
    let mut probe = cfg.clone();
    probe.apply(&fixed);
    if probe != cfg {
        return Err(Error::validation("only --sweeps may change when resuming"));
    }
    if let Some(s) = overrides.sweeps {
        cfg.sampler.n_sweeps = s;
    }
    cfg.output = dir.to_path_buf();
    cfg.validate()?;
    let data = load_data(&cfg.data)?;
    let model = prepare(&cfg, data.dataset)?;
    if manifest.basis.as_ref() != Some(model.basis()) {
        return Err(Error::validation("rebuilt basis differs from the manifest"));
    }
    let layout = StoreLayout::new(&model, &cfg.sampler.record);
    let n = cfg.sampler.n_chains;
    let target = cfg.sampler.n_sweeps;
    write_json(&dir.join(MANIFEST), &Manifest::new("fit", &cfg, Some(&model), fit_files(n)))?;
    (0..n).into_par_iter().try_for_each(|c| {
        let ckpt = checkpoint_path(dir, c);
        let (cp_layout, cp) = read_checkpoint(&ckpt)?;
        if cp_layout != layout || cp.chain != c as u64 || cp.seed != cfg.sampler.seed {
            return Err(Error::validation(format!("{} does not match the run", ckpt.display())));
        }
        if cp.sweeps > target {
            return Err(Error::validation(format!(
                "chain {c} already has {} sweeps, more than the requested {target}",
                cp.sweeps
            )));
        }
        cp.state.validate(model.dataset(), model.basis())?;
        let (draw_layout, old) = read_draws(draws_path(dir, c))?;
        if draw_layout != layout {
            return Err(Error::validation(format!("draw log of chain {c} does not match the run")));
        }
        let mut writer = DrawWriter::create(draws_path(dir, c), c as u64, layout.clone())?;
        for d in old.draws.iter().filter(|d| d.sweep <= cp.sweeps) {
            writer.write(d)?;
        }
        progress(format!("chain {c}: resuming at sweep {}", cp.sweeps));
        let sampler = Sampler::with_state(&model, sampler_options(&cfg), cp.seed, cp.chain, cp.state, cp.sweeps)?;
        advance_chain(&cfg, sampler, writer, &layout, &ckpt, target)
    })
}

/// Reads the fit in `dir` and rebuilds its model; `analysis` replaces the
/// diagnostics and summary settings when given.
fn load_fit(dir: &Path, analysis: Option<&RunConfig>) -> Result<(RunConfig, PreparedModel, Vec<ChainDraws>, LoadedTruth)> {
    let manifest = Manifest::read(dir)?;
    if manifest.command != "fit" {
        return Err(Error::validation(format!("{} was not written by fit", dir.display())));
    }
    let mut cfg = manifest.config;
    if let Some(a) = analysis {
        cfg.diagnostics = a.diagnostics.clone();
        cfg.summary = a.summary.clone();
    }
    cfg.output = dir.to_path_buf();
    cfg.validate()?;
    let data = load_data(&cfg.data)?;
    let mut model_cfg = cfg.clone();
    if let Some(basis) = manifest.basis {
        model_cfg.basis = BasisSpec::Knots(basis.knots);
    }
    let model = prepare(&model_cfg, data.dataset)?;
    let layout = StoreLayout::new(&model, &cfg.sampler.record);
    let chains = (0..cfg.sampler.n_chains)
        .map(|c| {
            let (l, draws) = read_draws(draws_path(dir, c))?;
            if l != layout {
                return Err(Error::validation(format!("draw log of chain {c} does not match the manifest")));
            }
            Ok(draws)
        })
        .collect::<Result<Vec<_>>>()?;
    let last: Vec<u64> = chains.iter().map(|c| c.draws.last().map_or(0, |d| d.sweep)).collect();
    if last.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::validation(format!("chains end at different sweeps: {last:?}")));
    }
    Ok((cfg, model, chains, data.truth))
}

type LoadedTruth = Option<funclust::SimulationTruth>;

pub fn diagnose_fit(dir: &Path, analysis: Option<&RunConfig>) -> Result<()> {
    let (cfg, model, chains, _) = load_fit(dir, analysis)?;
    let (report, _) = diagnose(&chains, model.basis(), model.dataset().time_range(), &cfg.diagnostics)?;
    let out = dir.join("diagnostics");
    create_dir(&out)?;
    write_json(&out.join("diagnostics.json"), &report)?;
    report.write_csv(create_file(&out.join("diagnostics.csv"))?)?;
    let files = ["diagnostics.json", "diagnostics.csv"].map(String::from).to_vec();
    write_json(&out.join(MANIFEST), &Manifest::new("diagnose", &cfg, Some(&model), files))?;
    progress(format!(
        "max R^(1/2) = {:.4} over {} selectors ({})",
        report.max_r_hat,
        report.entries.len(),
        if report.converged { "below threshold" } else { "NOT below threshold" }
    ));
    Ok(())
}

#[derive(Serialize)]
struct ClusteringOutput<'a> {
    occupancy: Vec<f64>,
    truth: Option<&'a funclust::summary::ClusteringReport>,
}

pub fn summarize_fit(dir: &Path, analysis: Option<&RunConfig>) -> Result<()> {
    let (cfg, model, chains, truth) = load_fit(dir, analysis)?;
    let a = analyze(&cfg, &model, &chains, truth.as_ref())?;
    drop(chains);
    let out = dir.join("summary");
    create_dir(&out)?;
    let mut files = vec!["curves.csv", "membership.csv", "fixed_params.json", "clustering.json"];
    a.curves.write_csv(create_file(&out.join("curves.csv"))?)?;
    let mut w = csv::Writer::from_writer(create_file(&out.join("membership.csv"))?);
    w.write_record(["subject", "cluster"])?;
    for (s, c) in model.dataset().subjects().iter().zip(&a.membership) {
        w.write_record([s.id.clone(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(out.join("membership.csv"), e))?;
    write_json(&out.join("fixed_params.json"), &a.fixed)?;
    write_json(
        &out.join("clustering.json"),
        &ClusteringOutput {
            occupancy: a.samples.occupancy(),
            truth: a.clustering.as_ref(),
        },
    )?;
    if let Some(bands) = &a.bands {
        write_json(&out.join("truth_bands.json"), bands)?;
        files.push("truth_bands.json");
    }
    if let Some(report) = &a.diagnostics {
        write_json(&out.join("diagnostics.json"), report)?;
        files.push("diagnostics.json");
    }
    let files = files.into_iter().map(String::from).collect();
    write_json(&out.join(MANIFEST), &Manifest::new("summarize", &cfg, Some(&model), files))?;
    progress(format!("summarized {} retained draws into {}", a.samples.len(), out.display()));
    Ok(())
}

fn nu_dir(nu: f64) -> String {
    format!("nu_{nu}")
}

fn write_coverage(path: &Path, grid: &[f64], cov: &[FunctionCoverage]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(["function", "t", "coverage"])?;
    for f in cov {
        for (t, c) in grid.iter().zip(&f.pointwise) {
            w.write_record([f.name.clone(), t.to_string(), c.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_metrics(path: &Path, outcomes: &[ReplicateOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    let first = &outcomes[0];
    let mut header = vec!["replicate".to_string(), "data_seed".into(), "accuracy".into(), "max_r_hat".into()];
    for s in &first.clustering.scores {
        let k = s.true_cluster + 1;
        header.extend([format!("precision{k}"), format!("recall{k}"), format!("f1_{k}")]);
    }
    for p in &first.fixed {
        header.extend(p.probs.iter().map(|q| format!("{}@{q}", p.name)));
    }
    w.write_record(&header)?;
    for o in outcomes {
        let mut row = vec![
            o.replicate.to_string(),
            o.data_seed.to_string(),
            o.accuracy.to_string(),
            o.max_r_hat.map_or(String::new(), |r| r.to_string()),
        ];
        for s in &o.clustering.scores {
            row.extend([s.precision.to_string(), s.recall.to_string(), s.f1.to_string()]);
        }
        for p in &o.fixed {
            row.extend(p.quantiles.iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct StudySummary {
    nu: f64,
    n_replicates: usize,
    mean_accuracy: f64,
    coverage: Vec<(String, f64)>,
}

pub fn replicate(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let dir = &cfg.output;
    create_dir(dir)?;
    let groups = run_study(cfg, |o| {
        progress(format!(
            "replicate {} (nu = {}): accuracy {:.3}",
            o.replicate, o.nu, o.accuracy
        ))
    })?;
    let mut files = Vec::new();
    for (nu, outcomes) in &groups {
        let sub = dir.join(nu_dir(*nu));
        create_dir(&sub)?;
        write_metrics(&sub.join("metrics.csv"), outcomes)?;
        let bands: Vec<_> = outcomes.iter().map(|o| o.bands.clone()).collect();
        let cov = coverage_study(&bands)?;
        let DataSource::Simulation { spec, .. } = &cfg.data else {
            unreachable!("run_study checked the data source")
        };
        let grid = funclust::summary::default_grid(spec.time_range, cfg.summary.n_grid);
        write_coverage(&sub.join("coverage.csv"), &grid, &cov)?;
        let summary = StudySummary {
            nu: *nu,
            n_replicates: outcomes.len(),
            mean_accuracy: outcomes.iter().map(|o| o.accuracy).sum::<f64>() / outcomes.len() as f64,
            coverage: cov.iter().map(|c| (c.name.clone(), c.average)).collect(),
        };
        write_json(&sub.join("summary.json"), &summary)?;
        for f in ["metrics.csv", "coverage.csv", "summary.json"] {
            files.push(format!("{}/{f}", nu_dir(*nu)));
        }
        progress(format!("nu = {nu}: mean accuracy {:.3}", summary.mean_accuracy));
    }
    write_json(&dir.join(MANIFEST), &Manifest::new("replicate", cfg, None, files))?;
    Ok(())
}
