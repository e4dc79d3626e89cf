//! Desk-scale simulation study: three clusters of 150 subjects, three chains
//! of 4000 sweeps, half burned, thinned by 5.

use std::sync::OnceLock;

use funclust::summary::coverage_study;
use funclust_cli::pipeline::{run_replicate, ReplicateOutcome};
use funclust_cli::RunConfig;
use rayon::prelude::*;

use crate::report;

const N_REPLICATES: usize = 20;

fn config() -> RunConfig {
    let cfg = RunConfig::default();
    assert_eq!(cfg.sampler.n_chains, 3);
    assert_eq!(cfg.sampler.n_sweeps, 4000);
    assert_eq!((cfg.diagnostics.burn, cfg.diagnostics.thin), (0.5, 5));
    cfg
}

/// Replicate 0 at nu = 1, shared by every criterion that needs it.
fn baseline() -> &'static ReplicateOutcome {
    static FIT: OnceLock<ReplicateOutcome> = OnceLock::new();
    FIT.get_or_init(|| run_replicate(&config(), 1.0, 0).expect("baseline fit"))
}

fn interval(out: &ReplicateOutcome, name: &str) -> (f64, f64) {
    let row = out.fixed.iter().find(|p| p.name == name).expect("parameter row");
    let lo = row.probs.iter().position(|&p| p == 0.025).expect("2.5% quantile");
    let hi = row.probs.iter().position(|&p| p == 0.975).expect("97.5% quantile");
    (row.quantiles[lo], row.quantiles[hi])
}

#[test]
fn desk_scale_replication() {
    let out = baseline();
    let r_hat = out.max_r_hat.expect("three chains");
    let a = r_hat < 1.1;
    let b = out.accuracy >= 0.65;
    let b1 = interval(out, "beta[0]");
    let b2 = interval(out, "beta[1]");
    let c = b1.0 <= 1.0 && 1.0 <= b1.1 && b2.0 <= -1.0 && -1.0 <= b2.1;
    let verdict = |ok: bool| if ok { "pass" } else { "fail" };
    report(
        4,
        "desk-scale replication",
        a && b && c,
        &format!(
            "(a) max R^(1/2) = {r_hat:.3} < 1.1 {}; (b) accuracy = {:.3} >= 0.65 {}; \
             (c) beta1 95% [{:.3}, {:.3}] beta2 95% [{:.3}, {:.3}] {}",
            verdict(a),
            out.accuracy,
            verdict(b),
            b1.0,
            b1.1,
            b2.0,
            b2.1,
            verdict(c)
        ),
    );
}

#[test]
fn band_coverage() {
    let cfg = config();
    let mut outcomes: Vec<ReplicateOutcome> = (1..N_REPLICATES)
        .into_par_iter()
        .map(|j| run_replicate(&cfg, 1.0, j).expect("replicate fit"))
        .collect();
    outcomes.insert(0, baseline().clone());
    let bands: Vec<_> = outcomes.iter().map(|o| o.bands.clone()).collect();
    let coverage = coverage_study(&bands).expect("coverage");
    let pass = coverage.iter().all(|c| (0.80..=1.00).contains(&c.average));
    let detail: Vec<String> = coverage.iter().map(|c| format!("{} {:.3}", c.name, c.average)).collect();
    let mean_acc = outcomes.iter().map(|o| o.accuracy).sum::<f64>() / outcomes.len() as f64;
    report(
        5,
        "band coverage",
        pass,
        &format!(
            "{N_REPLICATES} replicates, grid-averaged coverage in [0.80, 1.00]: {}; mean accuracy {mean_acc:.3}",
            detail.join(", ")
        ),
    );
}

#[test]
fn concentration_robustness() {
    let cfg = config();
    let others: Vec<(f64, f64)> = [0.1, 10.0]
        .into_par_iter()
        .map(|nu| (nu, run_replicate(&cfg, nu, 0).expect("fit").accuracy))
        .collect();
    let mut acc = vec![(1.0, baseline().accuracy)];
    acc.extend(others);
    let max = acc.iter().map(|a| a.1).fold(f64::MIN, f64::max);
    let min = acc.iter().map(|a| a.1).fold(f64::MAX, f64::min);
    let detail: Vec<String> = acc.iter().map(|(nu, a)| format!("nu={nu}: {a:.3}")).collect();
    report(
        6,
        "concentration robustness",
        max - min < 0.10,
        &format!("accuracy spread {:.3} < 0.10 ({})", max - min, detail.join(", ")),
    );
}
