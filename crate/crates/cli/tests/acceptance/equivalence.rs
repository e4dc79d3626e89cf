//! Collapsed and plain Gibbs backends target the same posterior.

use funclust::basis::default_knots;
use funclust::data::simulate_dataset;
use funclust::diagnostics::alpha_at;
use funclust::stats::{batch_means_se, mean};
use funclust::{Backend, Hyperparams, PreparedModel, Sampler, SamplerOptions, SimulationSpec};

use crate::report;

const CHAINS: u64 = 2;
const SWEEPS: usize = 20_000;
const BURN: usize = 4_000;
const BATCHES: usize = 40;
const TIMES: [f64; 5] = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0, 4.0 / 6.0, 5.0 / 6.0];

/// Traces of beta and of the membership-averaged coefficient functions.
fn traces(model: &PreparedModel, backend: Backend, chain: u64) -> Vec<Vec<f64>> {
    let opts = SamplerOptions {
        backend,
        ..SamplerOptions::default()
    };
    let mut sampler = Sampler::new(model, opts, 31, chain).unwrap();
    let n = model.n_subjects() as f64;
    let mut out = vec![Vec::with_capacity(SWEEPS - BURN); 2 + 2 * TIMES.len()];
    for s in 0..SWEEPS {
        sampler.sweep().unwrap();
        if s < BURN {
            continue;
        }
        let st = sampler.state();
        out[0].push(st.beta[0]);
        out[1].push(st.beta[1]);
        let occ = st.occupancy();
        for l in 0..2 {
            for (j, &t) in TIMES.iter().enumerate() {
                let avg: f64 = st
                    .clusters
                    .iter()
                    .zip(&occ)
                    .filter(|(_, &m)| m > 0)
                    .map(|(c, &m)| m as f64 * alpha_at(c, model.basis(), l, t))
                    .sum::<f64>()
                    / n;
                out[2 + l * TIMES.len() + j].push(avg);
            }
        }
    }
    out
}

/// Pooled mean and its batch-means standard error over chains.
fn estimate(model: &PreparedModel, backend: Backend) -> Vec<(f64, f64)> {
    let per_chain: Vec<Vec<Vec<f64>>> = (0..CHAINS).map(|c| traces(model, backend, c)).collect();
    (0..per_chain[0].len())
        .map(|q| {
            let means: Vec<f64> = per_chain.iter().map(|t| mean(&t[q])).collect();
            let var: f64 = per_chain.iter().map(|t| batch_means_se(&t[q], BATCHES).powi(2)).sum();
            (mean(&means), var.sqrt() / CHAINS as f64)
        })
        .collect()
}

#[test]
fn criterion_3_collapsed_and_plain_gibbs_agree() {
    let (ds, _) = simulate_dataset(&SimulationSpec::three_cluster([34, 33, 33]), 3).unwrap();
    let basis = default_knots(&ds, 5).unwrap();
    let hyper = Hyperparams {
        k: 3,
        ..Hyperparams::defaults(ds.dims(), ds.n_subjects())
    };
    let model = PreparedModel::new(ds, basis, hyper).unwrap();
    let pcg = estimate(&model, Backend::Pcg);
    let gibbs = estimate(&model, Backend::Gibbs);
    let mut names = vec!["beta[0]".to_string(), "beta[1]".to_string()];
    for l in 0..2 {
        names.extend(TIMES.iter().map(|t| format!("alpha{l}({t:.2})")));
    }
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for ((name, (m1, s1)), (m2, s2)) in names.iter().zip(&pcg).zip(&gibbs) {
        let z = (m1 - m2).abs() / (s1 * s1 + s2 * s2).sqrt();
        worst = worst.max(z);
        detail.push(format!("{name} {m1:.3}/{m2:.3} z={z:.2}"));
    }
    report(
        3,
        "collapsed vs plain Gibbs posterior means",
        worst < 3.0,
        &format!("max |diff|/combined SE = {worst:.2} (tol 3); {}", detail.join(", ")),
    );
}
