//! Longitudinal binary datasets: in-memory representation, CSV exchange and
//! the synthetic generator used for simulation studies.

mod io;
mod simulate;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub use io::{load_csv, read_csv, write_csv, ColumnSchema};
pub use simulate::{simulate_dataset, true_alpha_catalog, AlphaFn, SimulationSpec, SimulationTruth};

/// One subject's repeated binary observations and design matrices.
///
/// Row `j` of `w`, `x` and `z` belongs to observation `j` at `times[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<u8>,
    /// Covariates with time-varying (clustered) effects.
    pub w: DMatrix<f64>,
    /// Covariates with fixed effects.
    pub x: DMatrix<f64>,
    /// Covariates with subject-level random effects.
    pub z: DMatrix<f64>,
}

impl SubjectRecord {
    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n == 0 {
            return Err(Error::validation(format!("subject {} has no observations", self.id)));
        }
        if self.y.len() != n || self.w.nrows() != n || self.x.nrows() != n || self.z.nrows() != n {
            return Err(Error::validation(format!(
                "subject {}: row counts of times, y, W, X, Z differ",
                self.id
            )));
        }
        if let Some(bad) = self.y.iter().find(|&&v| v > 1) {
            return Err(Error::validation(format!(
                "subject {}: response {bad} is not binary",
                self.id
            )));
        }
        if self.times.iter().any(|t| !t.is_finite())
            || self.w.iter().chain(self.x.iter()).chain(self.z.iter()).any(|v| !v.is_finite())
        {
            return Err(Error::validation(format!("subject {}: non-finite value", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    /// Number of varying-coefficient covariates.
    pub p: usize,
    /// Number of fixed effects.
    pub q: usize,
    /// Number of random effects.
    pub r: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<SubjectRecord>,
    time_range: (f64, f64),
    dims: Dims,
}

impl LongitudinalDataset {
    /// Validates the records and derives the time range from the data.
    pub fn new(subjects: Vec<SubjectRecord>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::validation("dataset has no subjects"))?;
        let dims = Dims {
            p: first.w.ncols(),
            q: first.x.ncols(),
            r: first.z.ncols(),
        };
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in &subjects {
            s.validate()?;
            if s.w.ncols() != dims.p || s.x.ncols() != dims.q || s.z.ncols() != dims.r {
                return Err(Error::validation(format!(
                    "subject {} has covariate counts different from the first subject",
                    s.id
                )));
            }
            for &t in &s.times {
                lo = lo.min(t);
                hi = hi.max(t);
            }
        }
        Ok(LongitudinalDataset {
            subjects,
            time_range: (lo, hi),
            dims,
        })
    }

    /// Like [`new`](Self::new) but with a declared time range, which must
    /// cover every observed time.
    pub fn with_time_range(subjects: Vec<SubjectRecord>, range: (f64, f64)) -> Result<Self> {
        let mut ds = Self::new(subjects)?;
        if !(range.0 <= ds.time_range.0 && range.1 >= ds.time_range.1) {
            return Err(Error::validation(format!(
                "declared time range [{}, {}] does not cover observed [{}, {}]",
                range.0, range.1, ds.time_range.0, ds.time_range.1
            )));
        }
        ds.time_range = range;
        Ok(ds)
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(SubjectRecord::n_obs).sum()
    }

    pub fn time_range(&self) -> (f64, f64) {
        self.time_range
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn pooled_times(&self) -> Vec<f64> {
        self.subjects.iter().flat_map(|s| s.times.iter().copied()).collect()
    }
}
