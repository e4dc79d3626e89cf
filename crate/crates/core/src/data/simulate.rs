use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{LongitudinalDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::linalg::{self, cholesky};
use crate::rand_dist::{std_normal, RngStream};

/// A true varying-coefficient function for simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaFn {
    /// One of the built-in functions `a11`, `a12`, `a21`, `a22`, `a31`, `a32`.
    Catalog(String),
    Constant(f64),
    /// Coefficients in increasing degree: c0 + c1 t + c2 t^2 + ...
    Polynomial(Vec<f64>),
    /// amplitude * sin(2 pi frequency t + phase)
    Sine {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
}

const CATALOG_IDS: [&str; 6] = ["a11", "a12", "a21", "a22", "a31", "a32"];

fn catalog_value(id: &str, t: f64) -> Option<f64> {
    let v = match id {
        "a11" => 2.0 * (-200.0 * (t - 0.2).powi(2)).exp() + (-10.0 * (t - 0.6).powi(2)).exp(),
        "a12" => (2.0 * PI * t.powi(3)).sin(),
        "a21" => (8.0 * (t - 0.5)).sin() + 1.5 * (-400.0 * (t - 0.5).powi(2)).exp(),
        "a22" => 2.0 * t,
        "a31" => -2.0 * t,
        "a32" => 0.0,
        _ => return None,
    };
    Some(v)
}

impl AlphaFn {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            AlphaFn::Catalog(id) => catalog_value(id, t).unwrap_or(f64::NAN),
            AlphaFn::Constant(c) => *c,
            AlphaFn::Polynomial(coef) => coef.iter().rev().fold(0.0, |acc, c| acc * t + c),
            AlphaFn::Sine {
                amplitude,
                frequency,
                phase,
            } => amplitude * (2.0 * PI * frequency * t + phase).sin(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            AlphaFn::Catalog(id) if catalog_value(id, 0.0).is_none() => Err(Error::validation(format!(
                "unknown catalog function '{id}' (known: {})",
                CATALOG_IDS.join(", ")
            ))),
            _ => Ok(()),
        }
    }
}

/// The six three-cluster test functions, keyed `a{cluster}{covariate}`.
pub fn true_alpha_catalog() -> Vec<(&'static str, AlphaFn)> {
    CATALOG_IDS
        .iter()
        .map(|&id| (id, AlphaFn::Catalog(id.to_string())))
        .collect()
}

fn default_poisson_mean() -> f64 {
    10.0
}

fn default_time_range() -> (f64, f64) {
    (0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub cluster_sizes: Vec<usize>,
    /// `alphas[k][l]`: true function for covariate `l` in cluster `k`.
    pub alphas: Vec<Vec<AlphaFn>>,
    pub beta: Vec<f64>,
    pub psi: Vec<Vec<f64>>,
    /// Observations per subject are 1 + Poisson(poisson_mean).
    #[serde(default = "default_poisson_mean")]
    pub poisson_mean: f64,
    #[serde(default = "default_time_range")]
    pub time_range: (f64, f64),
}

impl SimulationSpec {
    /// Three clusters using the catalog functions, beta = (1, -1) and
    /// Psi = [[0.5, 0.25], [0.25, 0.8]].
    pub fn three_cluster(sizes: [usize; 3]) -> Self {
        let cat = |id: &str| AlphaFn::Catalog(id.to_string());
        SimulationSpec {
            cluster_sizes: sizes.to_vec(),
            alphas: vec![
                vec![cat("a11"), cat("a12")],
                vec![cat("a21"), cat("a22")],
                vec![cat("a31"), cat("a32")],
            ],
            beta: vec![1.0, -1.0],
            psi: vec![vec![0.5, 0.25], vec![0.25, 0.8]],
            poisson_mean: default_poisson_mean(),
            time_range: default_time_range(),
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<DMatrix<f64>> {
        if self.cluster_sizes.is_empty() || self.cluster_sizes.contains(&0) {
            return Err(Error::validation("simulation needs at least one non-empty cluster"));
        }
        if self.alphas.len() != self.cluster_sizes.len() {
            return Err(Error::validation(format!(
                "{} clusters but {} rows of alpha functions",
                self.cluster_sizes.len(),
                self.alphas.len()
            )));
        }
        let p = self.alphas[0].len();
        if p == 0 || self.alphas.iter().any(|row| row.len() != p) {
            return Err(Error::validation("every cluster needs the same number (>= 1) of alpha functions"));
        }
        for f in self.alphas.iter().flatten() {
            f.validate()?;
        }
        if !(self.poisson_mean >= 0.0) {
            return Err(Error::validation("poisson_mean must be non-negative"));
        }
        if !(self.time_range.0 < self.time_range.1) {
            return Err(Error::validation("time_range must be increasing"));
        }
        let psi = linalg::from_rows(&self.psi)?;
        if !linalg::is_spd(&psi) {
            return Err(Error::validation("Psi must be symmetric positive definite"));
        }
        Ok(psi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTruth {
    /// True cluster (0-based) of each subject.
    pub cluster_of: Vec<usize>,
    pub alphas: Vec<Vec<AlphaFn>>,
    pub beta: Vec<f64>,
    pub psi: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub latent: Vec<Vec<f64>>,
}

impl SimulationTruth {
    pub fn alpha(&self, cluster: usize, covariate: usize, t: f64) -> f64 {
        self.alphas[cluster][covariate].eval(t)
    }
}

fn normal_matrix<R: Rng>(n: usize, cols: usize, intercept: bool, rng: &mut R) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, cols);
    for i in 0..n {
        for j in 0..cols {
            m[(i, j)] = if intercept && j == 0 { 1.0 } else { std_normal(rng) };
        }
    }
    m
}

/// Generates a dataset with known cluster structure. Subject `i` draws from
/// substream `i` of the seed, so results do not depend on evaluation order.
pub fn simulate_dataset(spec: &SimulationSpec, seed: u64) -> Result<(LongitudinalDataset, SimulationTruth)> {
    let psi = spec.validate()?;
    let r = psi.nrows();
    let q = spec.beta.len();
    let p = spec.alphas[0].len();
    let psi_chol = if r > 0 { Some(cholesky(&psi, "simulation Psi")?) } else { None };
    let beta = DVector::from_column_slice(&spec.beta);
    let poisson = if spec.poisson_mean > 0.0 {
        Some(Poisson::new(spec.poisson_mean).map_err(|e| Error::validation(e.to_string()))?)
    } else {
        None
    };
    let root = RngStream::new(seed);
    let (t0, t1) = spec.time_range;

    let mut subjects = Vec::with_capacity(spec.n_subjects());
    let mut truth = SimulationTruth {
        cluster_of: Vec::with_capacity(spec.n_subjects()),
        alphas: spec.alphas.clone(),
        beta: spec.beta.clone(),
        psi: spec.psi.clone(),
        b: Vec::new(),
        latent: Vec::new(),
    };
    let mut index = 0u64;
    for (k, &size) in spec.cluster_sizes.iter().enumerate() {
        for _ in 0..size {
            let mut rng = root.substream(index).rng();
            let extra = poisson.map_or(0, |d| d.sample(&mut rng) as usize);
            let n = extra + 1;
            let mut times: Vec<f64> = (0..n).map(|_| t0 + (t1 - t0) * rng.random::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            let w = normal_matrix(n, p, true, &mut rng);
            let x = normal_matrix(n, q, false, &mut rng);
            let z = normal_matrix(n, r, true, &mut rng);
            let b = match &psi_chol {
                Some(c) => c.l_dirty().lower_triangle() * DVector::from_fn(r, |_, _| std_normal(&mut rng)),
                None => DVector::zeros(0),
            };
            let fixed = &x * &beta + &z * &b;
            let mut latent = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for j in 0..n {
                let varying: f64 = (0..p).map(|l| w[(j, l)] * spec.alphas[k][l].eval(times[j])).sum();
                let lij = varying + fixed[j] + std_normal(&mut rng);
                latent.push(lij);
                y.push(u8::from(lij > 0.0));
            }
            subjects.push(SubjectRecord {
                id: format!("{}", index + 1),
                times,
                y,
                w,
                x,
                z,
            });
            truth.cluster_of.push(k);
            truth.b.push(b.iter().copied().collect());
            truth.latent.push(latent);
            index += 1;
        }
    }
    let dataset = LongitudinalDataset::with_time_range(subjects, spec.time_range)?;
    Ok((dataset, truth))
}
