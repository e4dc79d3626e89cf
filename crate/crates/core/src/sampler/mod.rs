//! Partially collapsed Gibbs sampler and its plain Gibbs counterpart.

mod marginal;
mod prepared;
mod scan;
mod steps;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::Indicators;
use crate::draws::{ChainDraws, Draw, RecordOptions};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det, principal};
use crate::model::{draw_phi_tau, log_prior_gamma, ChainState, ClusterParams, StickState};
use crate::rand_dist::{std_normal, trunc_normal, RngStream};

pub use marginal::{log_marginal_gaussian, marginal_precision_apply, ClusterSuff};
pub use prepared::{PreparedModel, SubjectCache};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Random effects and coefficients integrated out where the collapsed
    /// scheme allows.
    #[default]
    Pcg,
    /// Every update conditions on all other parameters.
    Gibbs,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcg" => Ok(Backend::Pcg),
            "gibbs" => Ok(Backend::Gibbs),
            _ => Err(Error::validation(format!("unknown backend {s:?} (expected pcg or gibbs)"))),
        }
    }
}

/// Steps of a sweep, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Gamma = 1,
    Sticks = 2,
    Phi = 3,
    RandomEffects = 4,
    Tau = 5,
    Psi = 6,
    Latent = 7,
    Alloc = 8,
    Beta = 9,
}

impl Step {
    pub const ALL: [Step; 9] = [
        Step::Gamma,
        Step::Sticks,
        Step::Phi,
        Step::RandomEffects,
        Step::Tau,
        Step::Psi,
        Step::Latent,
        Step::Alloc,
        Step::Beta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::Gamma => "indicator update",
            Step::Sticks => "stick-breaking update",
            Step::Phi => "coefficient update",
            Step::RandomEffects => "random-effect update",
            Step::Tau => "scale update",
            Step::Psi => "random-effect covariance update",
            Step::Latent => "latent utility update",
            Step::Alloc => "membership update",
            Step::Beta => "fixed-effect update",
        }
    }
}

/// Steps to skip; the remaining steps keep their order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeMask {
    pub gamma: bool,
    pub sticks: bool,
    pub phi: bool,
    pub b: bool,
    pub tau: bool,
    pub psi: bool,
    pub latent: bool,
    pub alloc: bool,
    pub beta: bool,
}

impl FreezeMask {
    /// Everything frozen except the listed steps.
    pub fn only(active: &[Step]) -> Self {
        let on = |s: Step| !active.contains(&s);
        FreezeMask {
            gamma: on(Step::Gamma),
            sticks: on(Step::Sticks),
            phi: on(Step::Phi),
            b: on(Step::RandomEffects),
            tau: on(Step::Tau),
            psi: on(Step::Psi),
            latent: on(Step::Latent),
            alloc: on(Step::Alloc),
            beta: on(Step::Beta),
        }
    }

    pub fn is_frozen(&self, step: Step) -> bool {
        match step {
            Step::Gamma => self.gamma,
            Step::Sticks => self.sticks,
            Step::Phi => self.phi,
            Step::RandomEffects => self.b,
            Step::Tau => self.tau,
            Step::Psi => self.psi,
            Step::Latent => self.latent,
            Step::Alloc => self.alloc,
            Step::Beta => self.beta,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaInit {
    /// Each selectable indicator on with probability 1/2.
    #[default]
    Random,
    ConstantOnly,
    All,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerOptions {
    pub backend: Backend,
    pub freeze: FreezeMask,
    pub gamma_init: GammaInit,
}

impl SamplerOptions {
    pub fn validate(&self) -> Result<()> {
        if self.freeze.phi && !self.freeze.gamma {
            return Err(Error::validation(
                "freezing the coefficients requires freezing the indicators as well",
            ));
        }
        Ok(())
    }
}

const INIT_ID: u64 = u64::MAX;

/// One Markov chain bound to a prepared model.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    model: &'a PreparedModel,
    opts: SamplerOptions,
    stream: RngStream,
    chain: u64,
    state: ChainState,
    sweeps: u64,
}

impl<'a> Sampler<'a> {
    /// Starts a chain from the default initialization.
    pub fn new(model: &'a PreparedModel, opts: SamplerOptions, seed: u64, chain: u64) -> Result<Self> {
        opts.validate()?;
        let stream = RngStream::new(seed).substream(chain);
        let state = initial_state(model, &opts, &stream.substream(INIT_ID))?;
        Ok(Sampler {
            model,
            opts,
            stream,
            chain,
            state,
            sweeps: 0,
        })
    }

    /// Continues a chain from a given state after `sweeps` completed sweeps.
    pub fn with_state(
        model: &'a PreparedModel,
        opts: SamplerOptions,
        seed: u64,
        chain: u64,
        state: ChainState,
        sweeps: u64,
    ) -> Result<Self> {
        opts.validate()?;
        state.validate(model.dataset(), model.basis())?;
        if state.clusters.len() != model.k() {
            return Err(Error::validation("state cluster count differs from K"));
        }
        Ok(Sampler {
            model,
            opts,
            stream: RngStream::new(seed).substream(chain),
            chain,
            state,
            sweeps,
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn into_state(self) -> ChainState {
        self.state
    }

    pub fn chain(&self) -> u64 {
        self.chain
    }

    pub fn sweeps_done(&self) -> u64 {
        self.sweeps
    }

    pub fn model(&self) -> &PreparedModel {
        self.model
    }

    /// Runs steps 1 to 9 once, skipping frozen steps.
    pub fn sweep(&mut self) -> Result<()> {
        let sweep = self.sweeps + 1;
        let base = self.stream.substream(sweep);
        let frozen = self.opts.freeze;
        let model = self.model;
        let wrap = |step: Step| {
            move |e: Error| Error::Sweep {
                sweep,
                step: step.name(),
                source: Box::new(e),
            }
        };
        let dims = model.dataset().dims();
        let suff = if !frozen.gamma || !frozen.phi {
            Some(steps::cluster_suffstats(model, &self.state, self.opts.backend).map_err(wrap(Step::Gamma))?)
        } else {
            None
        };
        for step in Step::ALL {
            if frozen.is_frozen(step) {
                continue;
            }
            let s = base.substream(step as u64);
            let st = &mut self.state;
            let res = match step {
                Step::Gamma => steps::update_gamma(model, st, suff.as_deref().unwrap_or_default(), &s),
                Step::Sticks => steps::update_sticks(model, st, &s),
                Step::Phi => steps::update_phi(model, st, suff.as_deref().unwrap_or_default(), &s),
                Step::RandomEffects if dims.r > 0 => steps::update_b(model, st, &s),
                Step::Tau => steps::update_tau(model, st, &s),
                Step::Psi if dims.r > 0 => steps::update_psi(model, st, &s),
                Step::Latent => steps::update_latent(model, st, &s),
                Step::Alloc => steps::update_alloc(model, st, &s),
                Step::Beta if dims.q > 0 => steps::update_beta(model, st, &s),
                _ => Ok(()),
            };
            res.map_err(wrap(step))?;
        }
        self.sweeps = sweep;
        Ok(())
    }

    /// Complete-data log posterior of the current state, up to a constant.
    pub fn log_posterior(&self) -> Result<f64> {
        log_posterior(self.model, &self.state)
    }

    pub fn draw(&self, record: &RecordOptions) -> Result<Draw> {
        Ok(Draw::from_state(&self.state, self.sweeps, self.log_posterior()?, record))
    }

    /// Runs `n_sweeps` further sweeps, passing every `record.thin`-th state to
    /// `sink`.
    pub fn run(&mut self, n_sweeps: u64, record: &RecordOptions, mut sink: impl FnMut(Draw) -> Result<()>) -> Result<()> {
        let thin = record.thin.max(1);
        for _ in 0..n_sweeps {
            self.sweep()?;
            if self.sweeps % thin == 0 {
                sink(self.draw(record)?)?;
            }
        }
        Ok(())
    }
}

/// Runs independent chains in parallel and keeps their draws in memory,
/// starting with the initial state as sweep 0.
pub fn run_chains(
    model: &PreparedModel,
    opts: &SamplerOptions,
    seed: u64,
    n_chains: usize,
    n_sweeps: u64,
    record: &RecordOptions,
) -> Result<Vec<ChainDraws>> {
    (0..n_chains as u64)
        .into_par_iter()
        .map(|c| {
            let mut sampler = Sampler::new(model, opts.clone(), seed, c)?;
            let mut draws = vec![sampler.draw(record)?];
            sampler.run(n_sweeps, record, |d| {
                draws.push(d);
                Ok(())
            })?;
            Ok(ChainDraws { chain: c, draws })
        })
        .collect()
}

/// Single chain of the plain Gibbs backend.
pub fn run_plain_gibbs(model: &PreparedModel, seed: u64, n_sweeps: u64, record: &RecordOptions) -> Result<ChainDraws> {
    let opts = SamplerOptions {
        backend: Backend::Gibbs,
        ..SamplerOptions::default()
    };
    let mut out = run_chains(model, &opts, seed, 1, n_sweeps, record)?;
    Ok(out.remove(0))
}

fn initial_state(model: &PreparedModel, opts: &SamplerOptions, stream: &RngStream) -> Result<ChainState> {
    let mut rng = stream.rng();
    let k = model.k();
    let n = model.n_subjects();
    let dims = model.dataset().dims();
    let hyper = model.hyper();
    let alloc: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut clusters = Vec::with_capacity(k);
    for _ in 0..k {
        let gamma: Vec<Indicators> = model
            .basis()
            .knots
            .iter()
            .map(|ks| match opts.gamma_init {
                GammaInit::ConstantOnly => Indicators::constant_only(ks.len()),
                GammaInit::All => Indicators::all(ks.len()),
                GammaInit::Random => {
                    let mut g = Indicators::constant_only(ks.len());
                    for m in 1..g.len() {
                        g.set(m, rng.random::<bool>());
                    }
                    g
                }
            })
            .collect();
        let (phi, tau) = draw_phi_tau(&gamma, hyper, model, &mut rng)?;
        clusters.push(ClusterParams { gamma, phi, tau });
    }
    let beta = DVector::from_fn(dims.q, |_, _| std_normal(&mut rng));
    let mut state = ChainState {
        clusters,
        sticks: StickState::halves(k),
        alloc,
        beta,
        b: vec![DVector::zeros(dims.r); n],
        psi: DMatrix::identity(dims.r, dims.r),
        latent: Vec::with_capacity(n),
    };
    let phis = steps::sparse_phis(model, &state);
    for (i, subj) in model.dataset().subjects().iter().enumerate() {
        let sc = &model.subjects()[i];
        let mu = phis[state.alloc[i]].fitted(&sc.w) + &subj.x * &state.beta;
        state
            .latent
            .push(DVector::from_fn(mu.len(), |j, _| trunc_normal(mu[j], sc.sides[j], &mut rng)));
    }
    Ok(state)
}

/// Complete-data log posterior (latent utilities, random effects and all
/// parameters), dropping constants that do not depend on the state.
pub fn log_posterior(model: &PreparedModel, state: &ChainState) -> Result<f64> {
    let h = model.hyper();
    let dims = model.dataset().dims();
    let phis = steps::sparse_phis(model, state);
    let weights = state.sticks.weights();
    let mut lp = 0.0;
    for (i, subj) in model.dataset().subjects().iter().enumerate() {
        let sc = &model.subjects()[i];
        let c = state.alloc[i];
        let mu = phis[c].fitted(&sc.w) + &subj.x * &state.beta + &subj.z * &state.b[i];
        lp += weights[c].ln() - 0.5 * (&state.latent[i] - mu).norm_squared();
    }
    if dims.r > 0 {
        let chol = cholesky(&state.psi, "random-effect covariance")?;
        let n = state.b.len() as f64;
        let quad: f64 = state.b.iter().map(|b| b.dot(&chol.solve(b))).sum();
        lp += -0.5 * quad - 0.5 * n * log_det(&chol);
        let scale_term = (h.iw_scale.clone() * chol.inverse()).trace();
        lp += -0.5 * (h.iw_df + dims.r as f64 + 1.0) * log_det(&chol) - 0.5 * scale_term;
    }
    if dims.q > 0 {
        lp += -0.5 * state.beta.dot(&(model.beta_prior_prec() * &state.beta));
    }
    for c in &state.clusters {
        lp += c.gamma.iter().map(|g| log_prior_gamma(g, h.a, h.b)).sum::<f64>();
        let idx = model.layout().active_indices(&c.gamma);
        let r = principal(model.r_full(), &idx);
        let chol = cholesky(&r, "coefficient prior Gram")?;
        let d = idx.len() as f64;
        lp += -0.5 * d * (2.0 * std::f64::consts::PI * c.tau).ln() + 0.5 * log_det(&chol)
            - 0.5 * c.phi.dot(&(&r * &c.phi)) / c.tau;
        lp += -(h.tau_shape + 1.0) * c.tau.ln() - h.tau_scale / c.tau;
    }
    if h.nu != 1.0 {
        let v = state.sticks.fractions();
        for &vk in &v[..v.len() - 1] {
            lp += (h.nu - 1.0) * (1.0 - vk).ln();
        }
    }
    Ok(lp)
}
