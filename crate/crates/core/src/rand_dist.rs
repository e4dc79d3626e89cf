//! Random-variate primitives used by the sampler.
//!
//! All draws go through an explicit `&mut R: Rng`; reproducibility comes from
//! [`RngStream`], which derives independent ChaCha streams from a root seed and
//! a path of integer ids (chain, sweep, step, subject).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, ChiSquared, Distribution, Exp, Gamma, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky};

/// Above this |mu| the truncated-normal sampler leaves the inverse-CDF path.
pub const TAIL_THRESHOLD: f64 = 5.0;

/// Splittable, value-semantic generator key.
///
/// `substream(id)` is a pure function of the parent key and `id`, so a draw's
/// stream depends only on its position in the path, never on how many other
/// draws happened before it or on which thread ran it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    key: [u64; 4],
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u64; 4];
        let mut s = seed;
        for k in key.iter_mut() {
            s = splitmix64(s);
            *k = s;
        }
        RngStream { key }
    }

    pub fn substream(&self, id: u64) -> Self {
        let tag = splitmix64(id ^ 0xA076_1D64_78BD_642F);
        let mut key = [0u64; 4];
        for (i, k) in key.iter_mut().enumerate() {
            let salt = splitmix64(tag.wrapping_add((i as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB)));
            *k = splitmix64(self.key[i] ^ salt ^ self.key[(i + 1) % 4].rotate_left(17));
        }
        RngStream { key }
    }

    /// Follows a path of ids, e.g. `[chain, sweep, step, subject]`.
    pub fn path(&self, ids: &[u64]) -> Self {
        ids.iter().fold(*self, |s, &id| s.substream(id))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        for (chunk, k) in seed.chunks_exact_mut(8).zip(self.key.iter()) {
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function.
pub fn norm_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Draws from N(mean, precision^-1) via the Cholesky factor of the precision.
pub fn mvn_prec<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    precision: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if precision.nrows() != mean.len() || !precision.is_square() {
        return Err(Error::Internal("mvn_prec: dimension mismatch".into()));
    }
    let chol = cholesky(precision, "mvn_prec precision")?;
    let z = DVector::from_fn(mean.len(), |_, _| std_normal(rng));
    let dev = chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::numerical("mvn_prec triangular solve"))?;
    Ok(mean + dev)
}

/// Draws from N(precision^-1 h, precision^-1), sharing one factorization
/// between the mean solve and the noise.
pub fn mvn_canonical<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    h: &DVector<f64>,
    rng: &mut R,
    context: &str,
) -> Result<DVector<f64>> {
    let chol = cholesky(precision, context)?;
    let mut x = chol.solve(h);
    let z = DVector::from_fn(h.len(), |_, _| std_normal(rng));
    let dev = chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::numerical(context.to_string()))?;
    x += dev;
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Support (-inf, 0].
    NonPositive,
    /// Support (0, inf).
    Positive,
}

impl Side {
    pub fn for_response(y: u8) -> Side {
        if y == 1 {
            Side::Positive
        } else {
            Side::NonPositive
        }
    }
}

/// Standard normal restricted to (a, inf).
fn std_normal_above<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a <= -TAIL_THRESHOLD {
        loop {
            let z = std_normal(rng);
            if z > a {
                return z;
            }
        }
    } else if a >= TAIL_THRESHOLD {
        // Robert (1995) exponential proposal with the optimal rate.
        let rate = 0.5 * (a + (a * a + 4.0).sqrt());
        let exp = Exp::new(rate).expect("positive rate");
        loop {
            let z = a + exp.sample(rng);
            let u: f64 = rng.random();
            if u <= (-0.5 * (z - rate) * (z - rate)).exp() {
                return z;
            }
        }
    } else {
        let upper_mass = norm_cdf(-a);
        let u = 1.0 - rng.random::<f64>();
        (-norm_quantile(u * upper_mass)).max(a)
    }
}

/// Unit-variance normal with location `mu` truncated to one side of zero.
pub fn trunc_normal<R: Rng + ?Sized>(mu: f64, side: Side, rng: &mut R) -> f64 {
    match side {
        Side::Positive => {
            let x = mu + std_normal_above(-mu, rng);
            if x > 0.0 {
                x
            } else {
                f64::MIN_POSITIVE
            }
        }
        Side::NonPositive => {
            let x = -(-mu + std_normal_above(mu, rng));
            x.min(0.0)
        }
    }
}

/// Inverse-Wishart draw with `df` degrees of freedom and the given scale,
/// via a Bartlett factor and triangular solves.
pub fn inv_wishart<R: Rng + ?Sized>(
    df: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let r = scale.nrows();
    if !scale.is_square() {
        return Err(Error::validation("inverse-Wishart scale must be square"));
    }
    if !(df > r as f64 - 1.0) {
        return Err(Error::validation(format!(
            "inverse-Wishart degrees of freedom {df} must exceed dimension - 1 = {}",
            r as f64 - 1.0
        )));
    }
    if r == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let c = cholesky(scale, "inverse-Wishart scale")?;
    let mut a = DMatrix::zeros(r, r);
    for i in 0..r {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::validation(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    // Psi = C A^-T A^-1 C^T = X^T X with X = A^-1 C^T.
    let ct = c.l_dirty().lower_triangle().transpose();
    let x = a
        .solve_lower_triangular(&ct)
        .ok_or_else(|| Error::numerical("inverse-Wishart Bartlett solve"))?;
    let mut psi = x.transpose() * x;
    linalg::symmetrize(&mut psi);
    Ok(psi)
}

/// Inverse-gamma with density proportional to x^(-shape-1) exp(-scale/x).
pub fn inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && scale > 0.0) {
        return Err(Error::validation(format!(
            "inverse-gamma parameters must be positive (shape {shape}, scale {scale})"
        )));
    }
    let g = Gamma::new(shape, 1.0).map_err(|e| Error::validation(e.to_string()))?;
    loop {
        let x: f64 = g.sample(rng);
        if x > 0.0 {
            return Ok(scale / x);
        }
    }
}

pub fn beta_draw<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    let dist = Beta::new(a, b).map_err(|e| Error::validation(format!("beta({a}, {b}): {e}")))?;
    Ok(dist.sample(rng).clamp(0.0, 1.0))
}

/// Index drawn with probability proportional to `exp(log_weights)`.
pub fn categorical_draw<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Result<usize> {
    let max = log_weights
        .iter()
        .copied()
        .filter(|w| !w.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Internal(
            "categorical draw with no finite log weight".into(),
        ));
    }
    let weights: Vec<f64> = log_weights
        .iter()
        .map(|&w| if w.is_nan() { 0.0 } else { (w - max).exp() })
        .collect();
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if target < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}
