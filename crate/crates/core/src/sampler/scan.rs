//! Incremental evaluation of the collapsed indicator target when a single
//! term is added to or removed from the selected set.
//!
//! The target only involves log-determinants and a quadratic form, which do
//! not depend on the order of the selected columns, so the factors are kept
//! in insertion order: adding a column appends a row to each Cholesky factor
//! and removing one is a rank-one update of the trailing block.

use nalgebra::{DMatrix, DVector};

use super::marginal::log_marginal_gaussian;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, principal, subvector};

const PIVOT_TOL: f64 = 1e-10;

#[derive(Clone)]
struct Factor {
    l: DMatrix<f64>,
    log_det: f64,
}

impl Factor {
    fn new(m: &DMatrix<f64>, context: &str) -> Result<Self> {
        let l = cholesky(m, context)?.unpack();
        let log_det = l.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        Ok(Factor { l, log_det })
    }

    fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.l
            .solve_lower_triangular(v)
            .ok_or_else(|| Error::numerical("indicator update triangular solve"))
    }

    /// Diagonal entry `p` of the inverse of L L^T.
    fn inv_diag(&self, p: usize) -> Result<f64> {
        let mut e = DVector::zeros(self.l.nrows());
        e[p] = 1.0;
        Ok(self.solve(&e)?.norm_squared())
    }

    /// Factor of [[M, c], [c^T, m_jj]] given v = L^-1 c and s = m_jj - |v|^2.
    fn append(&self, v: &DVector<f64>, s: f64) -> Factor {
        let d = self.l.nrows();
        let mut l = self.l.clone().resize(d + 1, d + 1, 0.0);
        for (k, &vk) in v.iter().enumerate() {
            l[(d, k)] = vk;
        }
        l[(d, d)] = s.sqrt();
        Factor {
            l,
            log_det: self.log_det + s.ln(),
        }
    }

    /// Factor with row and column `p` removed.
    fn remove(&self, p: usize) -> Factor {
        let d = self.l.nrows();
        let mut x: Vec<f64> = (p + 1..d).map(|i| self.l[(i, p)]).collect();
        let l = self.l.clone().remove_row(p).remove_column(p);
        let mut l = l;
        let n = x.len();
        for k in 0..n {
            let kk = p + k;
            let lkk = l[(kk, kk)];
            let r = lkk.hypot(x[k]);
            let c = r / lkk;
            let s = x[k] / lkk;
            l[(kk, kk)] = r;
            for i in k + 1..n {
                let ii = p + i;
                l[(ii, kk)] = (l[(ii, kk)] + s * x[i]) / c;
                x[i] = c * x[i] - s * l[(ii, kk)];
            }
        }
        let log_det = l.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        Factor { l, log_det }
    }
}

enum Update {
    Append { a: Factor, r: Factor },
    Remove { pos: usize },
    Refactor,
}

/// A proposed one-term change and its target value.
pub(crate) struct Candidate {
    pub(crate) value: f64,
    order: Vec<usize>,
    update: Update,
}

/// Gaussian marginal term for the current selection. `a_full = Xi + R / tau`
/// on the full design.
pub(crate) struct MarginalScan<'a> {
    a_full: DMatrix<f64>,
    xi_mat: &'a DMatrix<f64>,
    xi_vec: &'a DVector<f64>,
    r_full: &'a DMatrix<f64>,
    tau: f64,
    order: Vec<usize>,
    fa: Factor,
    fr: Factor,
    u: DVector<f64>,
    x: DVector<f64>,
    value: f64,
}

impl<'a> MarginalScan<'a> {
    pub(crate) fn new(
        xi_mat: &'a DMatrix<f64>,
        xi_vec: &'a DVector<f64>,
        r_full: &'a DMatrix<f64>,
        tau: f64,
        idx: Vec<usize>,
    ) -> Result<Self> {
        let a_full = xi_mat + r_full / tau;
        let fa = Factor::new(&principal(&a_full, &idx), "indicator update posterior precision")?;
        let fr = Factor::new(&principal(r_full, &idx), "indicator update Gram")?;
        let mut scan = MarginalScan {
            a_full,
            xi_mat,
            xi_vec,
            r_full,
            tau,
            order: idx,
            fa,
            fr,
            u: DVector::zeros(0),
            x: DVector::zeros(0),
            value: 0.0,
        };
        scan.refresh()?;
        Ok(scan)
    }

    fn refresh(&mut self) -> Result<()> {
        self.u = self.fa.solve(&subvector(self.xi_vec, &self.order))?;
        self.x = self
            .fa
            .l
            .tr_solve_lower_triangular(&self.u)
            .ok_or_else(|| Error::numerical("indicator update triangular solve"))?;
        self.value = gaussian_term(self.order.len(), self.tau, self.fa.log_det, self.fr.log_det, self.u.norm_squared());
        Ok(())
    }

    pub(crate) fn value(&self) -> f64 {
        self.value
    }

    /// Adds full-design column `j`, which must not be selected.
    pub(crate) fn with(&self, j: usize) -> Result<Candidate> {
        let col_a = DVector::from_iterator(self.order.len(), self.order.iter().map(|&i| self.a_full[(i, j)]));
        let col_r = DVector::from_iterator(self.order.len(), self.order.iter().map(|&i| self.r_full[(i, j)]));
        let v = self.fa.solve(&col_a)?;
        let w = self.fr.solve(&col_r)?;
        let s = self.a_full[(j, j)] - v.norm_squared();
        let s_r = self.r_full[(j, j)] - w.norm_squared();
        let mut order = self.order.clone();
        order.push(j);
        if s > PIVOT_TOL * self.a_full[(j, j)].abs() && s_r > PIVOT_TOL * self.r_full[(j, j)].abs() {
            let e = self.xi_vec[j] - v.dot(&self.u);
            let value = gaussian_term(
                order.len(),
                self.tau,
                self.fa.log_det + s.ln(),
                self.fr.log_det + s_r.ln(),
                self.u.norm_squared() + e * e / s,
            );
            return Ok(Candidate {
                value,
                order,
                update: Update::Append {
                    a: self.fa.append(&v, s),
                    r: self.fr.append(&w, s_r),
                },
            });
        }
        self.refactor_candidate(order)
    }

    /// Removes full-design column `j`, which must be selected.
    pub(crate) fn without(&self, j: usize) -> Result<Candidate> {
        let pos = self
            .order
            .iter()
            .position(|&i| i == j)
            .ok_or_else(|| Error::Internal("removing an unselected term".into()))?;
        let mut order = self.order.clone();
        order.remove(pos);
        let da = self.fa.inv_diag(pos)?;
        let dr = self.fr.inv_diag(pos)?;
        if da.is_finite() && da > 0.0 && dr.is_finite() && dr > 0.0 {
            let value = gaussian_term(
                order.len(),
                self.tau,
                self.fa.log_det + da.ln(),
                self.fr.log_det + dr.ln(),
                self.u.norm_squared() - self.x[pos] * self.x[pos] / da,
            );
            return Ok(Candidate {
                value,
                order,
                update: Update::Remove { pos },
            });
        }
        self.refactor_candidate(order)
    }

    fn refactor_candidate(&self, order: Vec<usize>) -> Result<Candidate> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        let value = log_marginal_gaussian(
            &principal(self.xi_mat, &sorted),
            &subvector(self.xi_vec, &sorted),
            &principal(self.r_full, &sorted),
            self.tau,
        )?;
        Ok(Candidate {
            value,
            order: sorted,
            update: Update::Refactor,
        })
    }

    pub(crate) fn accept(&mut self, cand: Candidate) -> Result<()> {
        match cand.update {
            Update::Append { a, r } => {
                self.fa = a;
                self.fr = r;
            }
            Update::Remove { pos } => {
                self.fa = self.fa.remove(pos);
                self.fr = self.fr.remove(pos);
            }
            Update::Refactor => {
                self.fa = Factor::new(&principal(&self.a_full, &cand.order), "indicator update posterior precision")?;
                self.fr = Factor::new(&principal(self.r_full, &cand.order), "indicator update Gram")?;
            }
        }
        self.order = cand.order;
        self.refresh()
    }
}

fn gaussian_term(d: usize, tau: f64, log_det_a: f64, log_det_r: f64, quad: f64) -> f64 {
    -0.5 * (d as f64 * tau.ln() + log_det_a - log_det_r) + 0.5 * quad
}
