//! Indicator posterior on a tiny instance versus exhaustive enumeration with
//! Monte Carlo marginalization of the coefficients and random effects.

use funclust::{
    BasisConfig, ChainState, ClusterParams, FreezeMask, Hyperparams, Indicators, LongitudinalDataset, PreparedModel,
    RngStream, Sampler, SamplerOptions, Step, StickState, SubjectRecord,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::report;

const KNOTS: [f64; 2] = [0.33, 0.67];
const BETA: f64 = 0.4;
const PSI: f64 = 0.5;
const TAU: [f64; 2] = [1.5, 4.0];
const ALLOC: [usize; 4] = [0, 0, 1, 1];
const SWEEPS: usize = 200_000;
const BURN: usize = 2_000;
const MC: usize = 1_000_000;

struct Subject {
    times: Vec<f64>,
    y: Vec<u8>,
    x: Vec<f64>,
}

fn subjects() -> Vec<Subject> {
    vec![
        Subject { times: vec![0.0, 0.45, 0.9], y: vec![0, 0, 1], x: vec![0.5, -1.0, 1.0] },
        Subject { times: vec![0.2, 0.75], y: vec![0, 1], x: vec![-0.5, 0.3] },
        Subject { times: vec![0.1, 0.5, 1.0], y: vec![1, 0, 1], x: vec![1.2, 0.0, -0.7] },
        Subject { times: vec![0.3, 0.6], y: vec![1, 0], x: vec![0.0, 0.8] },
    ]
}

fn basis(t: f64) -> [f64; 4] {
    [1.0, t, (t - KNOTS[0]).abs().powi(3), (t - KNOTS[1]).abs().powi(3)]
}

fn dataset() -> LongitudinalDataset {
    let records = subjects()
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let n = s.times.len();
            SubjectRecord {
                id: format!("s{i}"),
                w: DMatrix::from_element(n, 1, 1.0),
                x: DMatrix::from_column_slice(n, 1, &s.x),
                z: DMatrix::from_element(n, 1, 1.0),
                times: s.times,
                y: s.y,
            }
        })
        .collect();
    LongitudinalDataset::new(records).unwrap()
}

fn selected(mask: u32) -> Vec<usize> {
    let mut idx = vec![0];
    idx.extend((1..4).filter(|&m| mask >> (m - 1) & 1 == 1));
    idx
}

/// Beta-binomial(1, 1) mass of one pattern with `c` of 3 selectable terms.
fn prior_mass(c: u32) -> f64 {
    let choose = [1.0, 3.0, 3.0, 1.0][c as usize];
    1.0 / (4.0 * choose)
}

/// Posterior mass over the 8 patterns of one cluster.
fn enumerate_cluster(k: usize, subs: &[Subject], rng: &mut impl Rng) -> Vec<f64> {
    let phi_cdf = Normal::standard();
    let mut r_full = DMatrix::<f64>::zeros(4, 4);
    for s in subs {
        for &t in &s.times {
            let v = DVector::from_row_slice(&basis(t));
            r_full += &v * v.transpose();
        }
    }
    let members: Vec<&Subject> = subs.iter().zip(ALLOC).filter(|(_, c)| *c == k).map(|(s, _)| s).collect();
    let mut post = Vec::new();
    for mask in 0u32..8 {
        let idx = selected(mask);
        let d = idx.len();
        let r = DMatrix::from_fn(d, d, |i, j| r_full[(idx[i], idx[j])]);
        let cov = r.try_inverse().unwrap() * TAU[k];
        let l = cov.cholesky().unwrap().l();
        let mut acc = 0.0;
        for _ in 0..MC {
            let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let phi = &l * e;
            let mut like = 1.0;
            for s in &members {
                let b = PSI.sqrt() * rng.sample::<f64, _>(StandardNormal);
                for j in 0..s.times.len() {
                    let row = basis(s.times[j]);
                    let mu: f64 = idx.iter().zip(phi.iter()).map(|(&m, p)| row[m] * p).sum::<f64>() + s.x[j] * BETA + b;
                    let sign = if s.y[j] == 1 { 1.0 } else { -1.0 };
                    like *= phi_cdf.cdf(sign * mu);
                }
            }
            acc += like;
        }
        post.push(prior_mass(mask.count_ones()) * acc / MC as f64);
    }
    let total: f64 = post.iter().sum();
    post.iter().map(|p| p / total).collect()
}

fn initial_state(ds: &LongitudinalDataset) -> ChainState {
    let clusters = TAU
        .iter()
        .map(|&tau| ClusterParams {
            gamma: vec![Indicators::constant_only(2)],
            phi: DVector::from_element(1, 0.0),
            tau,
        })
        .collect();
    ChainState {
        clusters,
        sticks: StickState::new(vec![0.5, 1.0]).unwrap(),
        alloc: ALLOC.to_vec(),
        beta: DVector::from_element(1, BETA),
        b: vec![DVector::zeros(1); 4],
        psi: DMatrix::from_element(1, 1, PSI),
        latent: ds
            .subjects()
            .iter()
            .map(|s| DVector::from_iterator(s.n_obs(), s.y.iter().map(|&y| if y == 1 { 0.5 } else { -0.5 })))
            .collect(),
    }
}

#[test]
fn criterion_2_indicator_posterior_matches_enumeration() {
    let ds = dataset();
    let state = initial_state(&ds);
    let hyper = Hyperparams {
        k: 2,
        ..Hyperparams::defaults(ds.dims(), ds.n_subjects())
    };
    let model = PreparedModel::new(ds, BasisConfig { knots: vec![KNOTS.to_vec()] }, hyper).unwrap();
    let opts = SamplerOptions {
        freeze: FreezeMask::only(&[Step::Gamma, Step::Phi, Step::RandomEffects, Step::Latent]),
        ..SamplerOptions::default()
    };
    let mut sampler = Sampler::with_state(&model, opts, 2024, 0, state, 0).unwrap();
    let mut freq = [[0.0f64; 3]; 2];
    for s in 0..SWEEPS {
        sampler.sweep().unwrap();
        if s < BURN {
            continue;
        }
        for (k, c) in sampler.state().clusters.iter().enumerate() {
            for m in 0..3 {
                if c.gamma[0].get(m + 1) {
                    freq[k][m] += 1.0;
                }
            }
        }
    }
    let kept = (SWEEPS - BURN) as f64;

    let subs = subjects();
    let mut rng = RngStream::new(77).rng();
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for k in 0..2 {
        let post = enumerate_cluster(k, &subs, &mut rng);
        for m in 0..3 {
            let exact: f64 = (0u32..8).filter(|mask| mask >> m & 1 == 1).map(|mask| post[mask as usize]).sum();
            let got = freq[k][m] / kept;
            worst = worst.max((got - exact).abs());
            detail.push(format!("k{k}m{}:{got:.3}/{exact:.3}", m + 1));
        }
    }
    report(
        2,
        "collapsed indicator step vs enumeration",
        worst < 0.03,
        &format!("max |freq - exact| = {worst:.4} (tol 0.03); {}", detail.join(" ")),
    );
}
