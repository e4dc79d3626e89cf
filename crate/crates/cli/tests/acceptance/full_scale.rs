//! Full-scale capability: a 1200-subject design expressed in a config file,
//! and one fit of it.

use funclust::SimulationSpec;
use funclust_cli::pipeline::{analyze, load_data, prepare, sampler_options};
use funclust_cli::{DataSource, RunConfig};

use crate::report;

const FIT_SWEEPS: u64 = 10_000;

#[test]
fn full_scale_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("full.json");
    let mut full = RunConfig::default();
    full.data = DataSource::Simulation {
        spec: SimulationSpec::three_cluster([400, 400, 400]),
        seed: 1,
    };
    full.sampler.n_sweeps = 10_000;
    full.replicate.n_replicates = 100;
    std::fs::write(&path, serde_json::to_string_pretty(&full).unwrap()).unwrap();
    let cfg = RunConfig::from_file(&path).expect("full-scale config loads");
    let config_ok = cfg.validate().is_ok() && cfg.replicate.n_replicates == 100;

    let data = load_data(&cfg.data).expect("simulate");
    let truth = data.truth.clone();
    let n = data.dataset.n_subjects();
    let model = prepare(&cfg, data.dataset).expect("prepare");
    let start = std::time::Instant::now();
    let chains = funclust::sampler::run_chains(
        &model,
        &sampler_options(&cfg),
        cfg.sampler.seed,
        1,
        FIT_SWEEPS,
        &cfg.sampler.record,
    );
    let secs = start.elapsed().as_secs_f64();
    let (fit_ok, detail) = match chains {
        Ok(chains) => {
            let finite = chains[0]
                .draws
                .iter()
                .all(|d| d.log_post.is_finite() && d.beta.iter().all(|b| b.is_finite()));
            let a = analyze(&cfg, &model, &chains, truth.as_ref()).expect("analysis");
            let samples = a.samples.len();
            let acc = a.clustering.map_or(f64::NAN, |c| c.accuracy);
            (
                finite,
                format!("N = {n}, 1 chain x {FIT_SWEEPS} sweeps in {secs:.0} s, {samples} retained draws, accuracy {acc:.3}"),
            )
        }
        Err(e) => (false, format!("fit failed: {e}")),
    };
    report(
        7,
        "full-scale capability",
        config_ok && fit_ok,
        &format!("config N=1200/10000 sweeps/100 replicates valid: {config_ok}; {detail}"),
    );
}
