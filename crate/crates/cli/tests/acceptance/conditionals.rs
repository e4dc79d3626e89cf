//! Single steps run from frozen conditioning states against closed-form
//! moments computed with dense matrices.

use funclust::basis::default_knots;
use funclust::data::simulate_dataset;
use funclust::{
    ChainState, FreezeMask, Hyperparams, Indicators, LongitudinalDataset, PreparedModel, RngStream, Sampler,
    SamplerOptions, SimulationSpec, Step, SubjectRecord,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::report;

const DRAWS: usize = 100_000;
const SEED: u64 = 101;

struct Fixture {
    model: PreparedModel,
    state: ChainState,
    knots: Vec<Vec<f64>>,
}

fn fixture() -> Fixture {
    let (ds, _) = simulate_dataset(&SimulationSpec::three_cluster([8, 6, 6]), 5).unwrap();
    let basis = default_knots(&ds, 3).unwrap();
    let knots = basis.knots.clone();
    let hyper = Hyperparams {
        k: 4,
        ..Hyperparams::defaults(ds.dims(), ds.n_subjects())
    };
    let model = PreparedModel::new(ds, basis, hyper).unwrap();
    let mut state = Sampler::new(&model, SamplerOptions::default(), SEED, 0).unwrap().into_state();
    let mut rng = RngStream::new(3).rng();
    let n = model.n_subjects();
    state.alloc = (0..n).map(|i| [0, 0, 1, 2, 2, 0, 1][i % 7]).collect();
    for (k, c) in state.clusters.iter_mut().enumerate() {
        c.gamma = if k == 1 {
            vec![Indicators::new(vec![true, false, true, false, true]).unwrap(), Indicators::constant_only(3)]
        } else {
            vec![Indicators::all(3), Indicators::all(3)]
        };
        c.phi = DVector::from_fn(c.dim(), |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        c.tau = 2.0 + k as f64;
    }
    state.psi = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, 0.2, 0.9]);
    state.b = (0..n).map(|_| DVector::from_fn(2, |_, _| 0.7 * rng.sample::<f64, _>(StandardNormal))).collect();
    state.beta = DVector::from_vec(vec![0.8, -1.1]);
    Fixture { model, state, knots }
}

fn run_step(f: &Fixture, step: Step, mut visit: impl FnMut(&ChainState)) {
    let opts = SamplerOptions {
        freeze: FreezeMask::only(&[step]),
        ..SamplerOptions::default()
    };
    let mut sampler = Sampler::with_state(&f.model, opts, SEED, 0, f.state.clone(), 0).unwrap();
    for _ in 0..DRAWS {
        sampler.sweep().unwrap();
        visit(sampler.state());
    }
}

/// Selected design columns of one subject, built from the raw basis.
fn design(s: &SubjectRecord, gammas: &[Indicators], knots: &[Vec<f64>]) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for (l, g) in gammas.iter().enumerate() {
        for m in 0..g.len() {
            if !g.get(m) {
                continue;
            }
            cols.push(DVector::from_fn(s.n_obs(), |j, _| {
                let t = s.times[j];
                let term = match m {
                    0 => 1.0,
                    1 => t,
                    _ => (t - knots[l][m - 2]).abs().powi(3),
                };
                s.w[(j, l)] * term
            }));
        }
    }
    DMatrix::from_columns(&cols)
}

fn gram(ds: &LongitudinalDataset, gammas: &[Indicators], knots: &[Vec<f64>]) -> DMatrix<f64> {
    ds.subjects().iter().map(|s| {
        let w = design(s, gammas, knots);
        w.transpose() * w
    }).fold(None, |acc: Option<DMatrix<f64>>, g| Some(acc.map_or(g.clone(), |a| a + g))).unwrap()
}

struct Moments {
    n: f64,
    sum: DVector<f64>,
    outer: DMatrix<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Moments { n: 0.0, sum: DVector::zeros(d), outer: DMatrix::zeros(d, d) }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1.0;
        self.sum += x;
        self.outer += x * x.transpose();
    }

    fn mean(&self) -> DVector<f64> {
        &self.sum / self.n
    }

    fn cov(&self) -> DMatrix<f64> {
        let m = self.mean();
        &self.outer / self.n - &m * m.transpose()
    }
}

/// Largest error relative to the oracle scale: means against max(|m|, sd),
/// covariances against sqrt(C_ii C_jj).
fn gaussian_error(got: &Moments, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let (m, c) = (got.mean(), got.cov());
    let mut worst = 0.0f64;
    for i in 0..mean.len() {
        let scale = mean[i].abs().max(cov[(i, i)].sqrt());
        worst = worst.max((m[i] - mean[i]).abs() / scale);
        for j in 0..mean.len() {
            worst = worst.max((c[(i, j)] - cov[(i, j)]).abs() / (cov[(i, i)] * cov[(j, j)]).sqrt());
        }
    }
    worst
}

fn sticks_error(f: &Fixture) -> f64 {
    let k = f.state.clusters.len();
    let occ = f.state.occupancy();
    let nu = f.model.hyper().nu;
    let mut sums = vec![0.0; k - 1];
    run_step(f, Step::Sticks, |s| {
        for (acc, v) in sums.iter_mut().zip(s.sticks.fractions()) {
            *acc += v;
        }
    });
    (0..k - 1)
        .map(|j| {
            let tail: usize = occ[j + 1..].iter().sum();
            let a = 1.0 + occ[j] as f64;
            let exact = a / (a + nu + tail as f64);
            (sums[j] / DRAWS as f64 - exact).abs() / exact
        })
        .fold(0.0, f64::max)
}

fn tau_error(f: &Fixture) -> f64 {
    let ds = f.model.dataset();
    let h = f.model.hyper();
    let k = f.state.clusters.len();
    let mut sums = vec![0.0; k];
    run_step(f, Step::Tau, |s| {
        for (acc, c) in sums.iter_mut().zip(&s.clusters) {
            *acc += c.tau;
        }
    });
    f.state
        .clusters
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let r = gram(ds, &c.gamma, &f.knots);
            let shape = h.tau_shape + c.dim() as f64 / 2.0;
            let scale = h.tau_scale + 0.5 * (c.phi.transpose() * r * &c.phi)[0];
            let exact = scale / (shape - 1.0);
            (sums[j] / DRAWS as f64 - exact).abs() / exact
        })
        .fold(0.0, f64::max)
}

fn psi_error(f: &Fixture) -> f64 {
    let h = f.model.hyper();
    let r = f.state.psi.nrows();
    let mut scale = h.iw_scale.clone();
    for b in &f.state.b {
        scale += b * b.transpose();
    }
    let df = h.iw_df + f.state.b.len() as f64;
    let exact = scale / (df - r as f64 - 1.0);
    let mut sum = DMatrix::zeros(r, r);
    run_step(f, Step::Psi, |s| sum += &s.psi);
    let got = sum / DRAWS as f64;
    let mut worst = 0.0f64;
    for i in 0..r {
        for j in 0..r {
            let denom = (exact[(i, i)] * exact[(j, j)]).sqrt();
            worst = worst.max((got[(i, j)] - exact[(i, j)]).abs() / denom);
        }
    }
    worst
}

fn phi_error(f: &Fixture) -> f64 {
    let ds = f.model.dataset();
    let psi = &f.state.psi;
    let mut worst = 0.0f64;
    let k = f.state.clusters.len();
    let mut moments: Vec<Moments> = f.state.clusters.iter().map(|c| Moments::new(c.dim())).collect();
    run_step(f, Step::Phi, |s| {
        for (m, c) in moments.iter_mut().zip(&s.clusters) {
            m.push(&c.phi);
        }
    });
    for j in 0..k {
        let c = &f.state.clusters[j];
        if !f.state.alloc.contains(&j) {
            continue;
        }
        let d = c.dim();
        let mut prec = gram(ds, &c.gamma, &f.knots) / c.tau;
        let mut h = DVector::zeros(d);
        for (i, s) in ds.subjects().iter().enumerate() {
            if f.state.alloc[i] != j {
                continue;
            }
            let w = design(s, &c.gamma, &f.knots);
            let n = s.n_obs();
            let v_inv = (DMatrix::identity(n, n) + &s.z * psi * s.z.transpose()).try_inverse().unwrap();
            prec += w.transpose() * &v_inv * &w;
            h += w.transpose() * &v_inv * (&f.state.latent[i] - &s.x * &f.state.beta);
        }
        let cov = prec.try_inverse().unwrap();
        let mean = &cov * h;
        worst = worst.max(gaussian_error(&moments[j], &mean, &cov));
    }
    worst
}

fn fitted(f: &Fixture, i: usize) -> DVector<f64> {
    let s = &f.model.dataset().subjects()[i];
    let c = &f.state.clusters[f.state.alloc[i]];
    design(s, &c.gamma, &f.knots) * &c.phi
}

fn b_error(f: &Fixture) -> f64 {
    let ds = f.model.dataset();
    let psi = &f.state.psi;
    let mut moments: Vec<Moments> = (0..ds.n_subjects()).map(|_| Moments::new(psi.nrows())).collect();
    run_step(f, Step::RandomEffects, |s| {
        for (m, b) in moments.iter_mut().zip(&s.b) {
            m.push(b);
        }
    });
    let mut worst = 0.0f64;
    for (i, s) in ds.subjects().iter().enumerate() {
        let n = s.n_obs();
        let gain = psi * s.z.transpose() * (DMatrix::identity(n, n) + &s.z * psi * s.z.transpose()).try_inverse().unwrap();
        let resid = &f.state.latent[i] - fitted(f, i) - &s.x * &f.state.beta;
        let mean = &gain * resid;
        let cov = psi - &gain * &s.z * psi;
        worst = worst.max(gaussian_error(&moments[i], &mean, &cov));
    }
    worst
}

fn beta_error(f: &Fixture) -> f64 {
    let ds = f.model.dataset();
    let q = f.state.beta.len();
    let mut prec = f.model.hyper().beta_cov.clone().try_inverse().unwrap();
    let mut h = DVector::zeros(q);
    for (i, s) in ds.subjects().iter().enumerate() {
        prec += s.x.transpose() * &s.x;
        h += s.x.transpose() * (&f.state.latent[i] - fitted(f, i) - &s.z * &f.state.b[i]);
    }
    let cov = prec.try_inverse().unwrap();
    let mean = &cov * h;
    let mut m = Moments::new(q);
    run_step(f, Step::Beta, |s| m.push(&s.beta));
    gaussian_error(&m, &mean, &cov)
}

/// Truncated-normal means of the first subject's utilities.
fn latent_error(f: &Fixture) -> f64 {
    let norm = Normal::standard();
    let s = &f.model.dataset().subjects()[0];
    let mu = fitted(f, 0) + &s.x * &f.state.beta + &s.z * &f.state.b[0];
    let mut sum = DVector::zeros(s.n_obs());
    run_step(f, Step::Latent, |st| sum += &st.latent[0]);
    let mut worst = 0.0f64;
    for j in 0..s.n_obs() {
        let m = mu[j];
        let exact = if s.y[j] == 1 {
            m + norm.pdf(m) / norm.cdf(m)
        } else {
            m - norm.pdf(m) / norm.cdf(-m)
        };
        worst = worst.max((sum[j] / DRAWS as f64 - exact).abs() / exact.abs().max(1.0));
    }
    worst
}

/// Membership frequencies of the first subject against the exact
/// categorical conditional.
fn alloc_error(f: &Fixture) -> f64 {
    let s = &f.model.dataset().subjects()[0];
    let weights = f.state.sticks.weights();
    let off = &f.state.latent[0] - &s.x * &f.state.beta - &s.z * &f.state.b[0];
    let logp: Vec<f64> = f
        .state
        .clusters
        .iter()
        .zip(&weights)
        .map(|(c, w)| w.ln() - 0.5 * (&off - design(s, &c.gamma, &f.knots) * &c.phi).norm_squared())
        .collect();
    let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logp.iter().map(|l| (l - top).exp()).sum();
    let mut counts = vec![0.0; logp.len()];
    run_step(f, Step::Alloc, |st| counts[st.alloc[0]] += 1.0);
    logp.iter()
        .zip(&counts)
        .map(|(l, c)| {
            let p = (l - top).exp() / z;
            (c / DRAWS as f64 - p).abs() / p.max(0.05)
        })
        .fold(0.0, f64::max)
}

#[test]
fn criterion_1_conditional_steps_match_closed_forms() {
    let f = fixture();
    let checks: [(&str, f64, f64); 8] = [
        ("sticks", sticks_error(&f), 0.02),
        ("tau", tau_error(&f), 0.03),
        ("psi", psi_error(&f), 0.03),
        ("phi", phi_error(&f), 0.05),
        ("b", b_error(&f), 0.05),
        ("beta", beta_error(&f), 0.05),
        ("latent", latent_error(&f), 0.02),
        ("alloc", alloc_error(&f), 0.05),
    ];
    let pass = checks.iter().all(|(_, e, tol)| e < tol);
    let detail: Vec<String> = checks.iter().map(|(n, e, tol)| format!("{n} {e:.4}<{tol}")).collect();
    report(1, "frozen-state conditional moments", pass, &detail.join(", "));
}
