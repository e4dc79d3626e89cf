use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use super::marginal::ClusterSuff;
use super::scan::MarginalScan;
use super::prepared::PreparedModel;
use super::Backend;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, principal, spd_inverse};
use crate::model::{log_prior_gamma, ChainState};
use crate::rand_dist::{beta_draw, categorical_draw, inv_gamma, inv_wishart, mvn_canonical, trunc_normal, RngStream};

const MIN_PAR_LEN: usize = 32;

pub(crate) fn members(alloc: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); k];
    for (i, &c) in alloc.iter().enumerate() {
        out[c].push(i);
    }
    out
}

/// Selected full-design columns and coefficients of one cluster.
pub(crate) struct SparsePhi {
    idx: Vec<usize>,
    coef: Vec<f64>,
}

impl SparsePhi {
    /// W[:, idx] * coef.
    pub(crate) fn fitted(&self, w: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(w.nrows());
        for (&j, &c) in self.idx.iter().zip(&self.coef) {
            out.axpy(c, &w.column(j), 1.0);
        }
        out
    }
}

pub(crate) fn sparse_phis(model: &PreparedModel, state: &ChainState) -> Vec<SparsePhi> {
    state
        .clusters
        .iter()
        .map(|c| SparsePhi {
            idx: model.layout().active_indices(&c.gamma),
            coef: c.phi.iter().copied().collect(),
        })
        .collect()
}

fn lower_solve(l: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    l.solve_lower_triangular(rhs)
        .ok_or_else(|| Error::numerical("random-effect core triangular solve"))
}

/// Per-cluster Xi and xi on the full design. The collapsed backend uses the
/// marginal precision (I + Z Psi Z^T)^-1 and residual L - X beta; the plain
/// backend conditions on b and uses the identity with residual L - X beta - Z b.
pub(crate) fn cluster_suffstats(model: &PreparedModel, state: &ChainState, backend: Backend) -> Result<Vec<ClusterSuff>> {
    let d = model.layout().total;
    let r = model.dataset().dims().r;
    let groups = members(&state.alloc, state.clusters.len());
    let psi_inv = if backend == Backend::Pcg && r > 0 {
        Some(spd_inverse(&state.psi, "random-effect covariance")?)
    } else {
        None
    };
    groups
        .par_iter()
        .map(|group| {
            let mut s = ClusterSuff::zeros(d);
            s.members = group.len();
            let mut t_stack = DMatrix::zeros(if psi_inv.is_some() { r * group.len() } else { 0 }, d);
            let mut u_stack = DVector::zeros(t_stack.nrows());
            for (pos, &i) in group.iter().enumerate() {
                let sc = &model.subjects()[i];
                let subj = &model.dataset().subjects()[i];
                let mut e = &state.latent[i] - &subj.x * &state.beta;
                if backend == Backend::Gibbs && r > 0 {
                    e -= &subj.z * &state.b[i];
                }
                s.xi_mat += &sc.g;
                s.xi_vec.gemv_tr(1.0, &sc.w, &e, 1.0);
                if let Some(pi) = &psi_inv {
                    let chol = cholesky(&(pi + &sc.ztz), "random-effect core")?;
                    let t = lower_solve(chol.l_dirty(), &sc.ztw)?;
                    let u = lower_solve(chol.l_dirty(), &DMatrix::from_column_slice(r, 1, subj.z.tr_mul(&e).as_slice()))?;
                    t_stack.rows_mut(pos * r, r).copy_from(&t);
                    u_stack.rows_mut(pos * r, r).copy_from(&u.column(0));
                }
            }
            if t_stack.nrows() > 0 {
                s.xi_mat.gemm_tr(-1.0, &t_stack, &t_stack, 1.0);
                s.xi_vec.gemv_tr(-1.0, &t_stack, &u_stack, 1.0);
            }
            Ok(s)
        })
        .collect()
}

/// log f(gamma) for one cluster: beta-binomial prior plus, when the cluster
/// has members, the Gaussian marginal likelihood term.
#[cfg(test)]
pub(crate) fn gamma_log_target(model: &PreparedModel, gammas: &[crate::basis::Indicators], tau: f64, suff: &ClusterSuff) -> Result<f64> {
    let h = model.hyper();
    let mut lp: f64 = gammas.iter().map(|g| log_prior_gamma(g, h.a, h.b)).sum();
    if suff.members > 0 {
        let idx = model.layout().active_indices(gammas);
        let (xm, xv) = suff.select(&idx);
        let r = principal(model.r_full(), &idx);
        lp += super::marginal::log_marginal_gaussian(&xm, &xv, &r, tau)?;
    }
    Ok(lp)
}

/// Step 1: systematic scan over every selectable indicator of every cluster.
pub(crate) fn update_gamma(model: &PreparedModel, state: &mut ChainState, suff: &[ClusterSuff], stream: &RngStream) -> Result<()> {
    let h = model.hyper();
    let layout = model.layout();
    state
        .clusters
        .par_iter_mut()
        .zip(suff)
        .enumerate()
        .try_for_each(|(k, (c, s))| {
            let mut rng = stream.substream(k as u64).rng();
            let mut prior: Vec<f64> = c.gamma.iter().map(|g| log_prior_gamma(g, h.a, h.b)).collect();
            let mut scan = if s.members > 0 {
                let idx = layout.active_indices(&c.gamma);
                Some(MarginalScan::new(&s.xi_mat, &s.xi_vec, model.r_full(), c.tau, idx)?)
            } else {
                None
            };
            for l in 0..c.gamma.len() {
                for m in 1..c.gamma[l].len() {
                    let j = layout.offsets[l] + m;
                    let on = c.gamma[l].get(m);
                    let mut flipped = c.gamma[l].clone();
                    flipped.set(m, !on);
                    let prior_l = log_prior_gamma(&flipped, h.a, h.b);
                    let mut delta = prior_l - prior[l];
                    let cand = match &scan {
                        Some(sc) => {
                            let cand = if on { sc.without(j)? } else { sc.with(j)? };
                            delta += cand.value - sc.value();
                            Some(cand)
                        }
                        None => None,
                    };
                    // Probability of the flipped value: logistic of the log-target gain.
                    let p_flip = 1.0 / (1.0 + (-delta).exp());
                    if rng.random::<f64>() < p_flip {
                        c.gamma[l] = flipped;
                        prior[l] = prior_l;
                        if let (Some(sc), Some(cand)) = (&mut scan, cand) {
                            sc.accept(cand)?;
                        }
                    }
                }
            }
            Ok(())
        })
}

/// Step 2: stick-breaking fractions given the occupancy counts.
pub(crate) fn update_sticks(model: &PreparedModel, state: &mut ChainState, stream: &RngStream) -> Result<()> {
    let mut rng = stream.rng();
    let m = state.occupancy();
    let mut tail: usize = m.iter().sum();
    for k in 0..m.len() - 1 {
        tail -= m[k];
        let v = beta_draw(1.0 + m[k] as f64, model.hyper().nu + tail as f64, &mut rng)?;
        state.sticks.set(k, v);
    }
    Ok(())
}

/// Step 3: cluster coefficients given the indicators.
pub(crate) fn update_phi(model: &PreparedModel, state: &mut ChainState, suff: &[ClusterSuff], stream: &RngStream) -> Result<()> {
    state
        .clusters
        .par_iter_mut()
        .zip(suff)
        .enumerate()
        .try_for_each(|(k, (c, s))| {
            let mut rng = stream.substream(k as u64).rng();
            let idx = model.layout().active_indices(&c.gamma);
            let (xm, xv) = s.select(&idx);
            let prec = xm + principal(model.r_full(), &idx) / c.tau;
            c.phi = mvn_canonical(&prec, &xv, &mut rng, "cluster coefficient posterior")?;
            Ok(())
        })
}

/// Step 4: subject random effects.
pub(crate) fn update_b(model: &PreparedModel, state: &mut ChainState, stream: &RngStream) -> Result<()> {
    let psi_inv = spd_inverse(&state.psi, "random-effect covariance")?;
    let phis = sparse_phis(model, state);
    let (latent, alloc, beta) = (&state.latent, &state.alloc, &state.beta);
    state
        .b
        .par_iter_mut()
        .with_min_len(MIN_PAR_LEN)
        .enumerate()
        .try_for_each(|(i, bi)| {
            let mut rng = stream.substream(i as u64).rng();
            let sc = &model.subjects()[i];
            let subj = &model.dataset().subjects()[i];
            let resid = &latent[i] - phis[alloc[i]].fitted(&sc.w) - &subj.x * beta;
            *bi = mvn_canonical(&(&psi_inv + &sc.ztz), &subj.z.tr_mul(&resid), &mut rng, "random-effect posterior")?;
            Ok(())
        })
}

/// Step 5: cluster scales.
pub(crate) fn update_tau(model: &PreparedModel, state: &mut ChainState, stream: &RngStream) -> Result<()> {
    let h = model.hyper();
    for (k, c) in state.clusters.iter_mut().enumerate() {
        let mut rng = stream.substream(k as u64).rng();
        let idx = model.layout().active_indices(&c.gamma);
        let r = principal(model.r_full(), &idx);
        let quad = c.phi.dot(&(&r * &c.phi));
        c.tau = inv_gamma(h.tau_shape + 0.5 * idx.len() as f64, h.tau_scale + 0.5 * quad, &mut rng)?;
    }
    Ok(())
}

/// Step 6: random-effect covariance.
pub(crate) fn update_psi(model: &PreparedModel, state: &mut ChainState, stream: &RngStream) -> Result<()> {
    let mut rng = stream.rng();
    let h = model.hyper();
    let mut scale = h.iw_scale.clone();
    for b in &state.b {
        scale.ger(1.0, b, b, 1.0);
    }
    state.psi = inv_wishart(h.iw_df + state.b.len() as f64, &scale, &mut rng)?;
    Ok(())
}

/// Step 7: latent utilities, truncated to the side given by each response.
pub(crate) fn update_latent(model: &PreparedModel, state: &mut ChainState, stream: &RngStream) -> Result<()> {
    let phis = sparse_phis(model, state);
    let (b, alloc, beta) = (&state.b, &state.alloc, &state.beta);
    state
        .latent
        .par_iter_mut()
        .with_min_len(MIN_PAR_LEN)
        .enumerate()
        .for_each(|(i, li)| {
            let mut rng = stream.substream(i as u64).rng();
            let sc = &model.subjects()[i];
            let subj = &model.dataset().subjects()[i];
            let mu = phis[alloc[i]].fitted(&sc.w) + &subj.x * beta + &subj.z * &b[i];
            for (j, side) in sc.sides.iter().enumerate() {
                li[j] = trunc_normal(mu[j], *side, &mut rng);
            }
        });
    Ok(())
}

/// Step 8: cluster memberships.
pub(crate) fn update_alloc(model: &PreparedModel, state: &mut ChainState, stream: &RngStream) -> Result<()> {
    let phis = sparse_phis(model, state);
    let log_pi: Vec<f64> = state.sticks.weights().iter().map(|w| w.ln()).collect();
    let (b, latent, beta) = (&state.b, &state.latent, &state.beta);
    state
        .alloc
        .par_iter_mut()
        .with_min_len(MIN_PAR_LEN)
        .enumerate()
        .try_for_each(|(i, ci)| {
            let mut rng = stream.substream(i as u64).rng();
            let sc = &model.subjects()[i];
            let subj = &model.dataset().subjects()[i];
            let off = &latent[i] - &subj.x * beta - &subj.z * &b[i];
            let logw: Vec<f64> = phis
                .iter()
                .zip(&log_pi)
                .map(|(phi, lp)| lp - 0.5 * (&off - phi.fitted(&sc.w)).norm_squared())
                .collect();
            *ci = categorical_draw(&logw, &mut rng)?;
            Ok(())
        })
}

/// Step 9: fixed effects.
pub(crate) fn update_beta(model: &PreparedModel, state: &mut ChainState, stream: &RngStream) -> Result<()> {
    let mut rng = stream.rng();
    let phis = sparse_phis(model, state);
    let q = state.beta.len();
    let mut h = DVector::zeros(q);
    for (i, subj) in model.dataset().subjects().iter().enumerate() {
        let sc = &model.subjects()[i];
        let resid = &state.latent[i] - phis[state.alloc[i]].fitted(&sc.w) - &subj.z * &state.b[i];
        h.gemv_tr(1.0, &subj.x, &resid, 1.0);
    }
    let chol = model.beta_post_prec();
    let mean = chol.solve(&h);
    let z = DVector::from_fn(q, |_, _| crate::rand_dist::std_normal(&mut rng));
    let dev = chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::numerical("fixed-effect posterior triangular solve"))?;
    state.beta = mean + dev;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_design, default_knots};
    use crate::data::{simulate_dataset, SimulationSpec};
    use crate::model::Hyperparams;
    use crate::sampler::{SamplerOptions, Sampler};

    fn small_model() -> PreparedModel {
        let (ds, _) = simulate_dataset(&SimulationSpec::three_cluster([4, 3, 3]), 11).unwrap();
        let basis = default_knots(&ds, 3).unwrap();
        let hyper = Hyperparams {
            k: 3,
            ..Hyperparams::defaults(ds.dims(), ds.n_subjects())
        };
        PreparedModel::new(ds, basis, hyper).unwrap()
    }

    #[test]
    fn suffstats_match_dense_marginal_precision() {
        let model = small_model();
        let sampler = Sampler::new(&model, SamplerOptions::default(), 4, 0).unwrap();
        let mut state = sampler.state().clone();
        state.psi = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.2, 0.4]);
        state.b = (0..model.n_subjects()).map(|i| DVector::from_vec(vec![0.1 * i as f64, -0.2])).collect();
        for backend in [Backend::Pcg, Backend::Gibbs] {
            let suff = cluster_suffstats(&model, &state, backend).unwrap();
            for (k, s) in suff.iter().enumerate() {
                let d = model.layout().total;
                let mut xi_mat = DMatrix::zeros(d, d);
                let mut xi_vec = DVector::zeros(d);
                for (i, subj) in model.dataset().subjects().iter().enumerate() {
                    if state.alloc[i] != k {
                        continue;
                    }
                    let w = &model.subjects()[i].w;
                    let n = subj.n_obs();
                    let mut e = &state.latent[i] - &subj.x * &state.beta;
                    let prec = match backend {
                        Backend::Pcg => (DMatrix::identity(n, n) + &subj.z * &state.psi * subj.z.transpose())
                            .try_inverse()
                            .unwrap(),
                        Backend::Gibbs => {
                            e -= &subj.z * &state.b[i];
                            DMatrix::identity(n, n)
                        }
                    };
                    xi_mat += w.transpose() * &prec * w;
                    xi_vec += w.transpose() * &prec * e;
                }
                assert!((&s.xi_mat - xi_mat).amax() < 1e-9);
                assert!((&s.xi_vec - xi_vec).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn scan_target_matches_direct_target() {
        let model = small_model();
        let sampler = Sampler::new(&model, SamplerOptions::default(), 5, 0).unwrap();
        let state = sampler.state();
        let suff = cluster_suffstats(&model, state, Backend::Pcg).unwrap();
        for (c, s) in state.clusters.iter().zip(&suff) {
            if s.members == 0 {
                continue;
            }
            let idx = model.layout().active_indices(&c.gamma);
            let scan = MarginalScan::new(&s.xi_mat, &s.xi_vec, model.r_full(), c.tau, idx).unwrap();
            let h = model.hyper();
            let prior: f64 = c.gamma.iter().map(|g| log_prior_gamma(g, h.a, h.b)).sum();
            let direct = gamma_log_target(&model, &c.gamma, c.tau, s).unwrap();
            assert!((prior + scan.value() - direct).abs() < 1e-8);
        }
    }

    #[test]
    fn sparse_fitted_values_match_selected_design() {
        let model = small_model();
        let sampler = Sampler::new(&model, SamplerOptions::default(), 6, 0).unwrap();
        let state = sampler.state();
        let phis = sparse_phis(&model, state);
        for (i, subj) in model.dataset().subjects().iter().enumerate() {
            for (c, sp) in state.clusters.iter().zip(&phis) {
                let w = build_design(subj, &c.gamma, model.basis()).unwrap();
                let want = w * &c.phi;
                assert!((sp.fitted(&model.subjects()[i].w) - want).amax() < 1e-12);
            }
        }
    }
}
