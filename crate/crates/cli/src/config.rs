//! Declarative run configuration, read from JSON with command-line overrides.

use std::path::{Path, PathBuf};

use funclust::diagnostics::DiagnosticsConfig;
use funclust::sampler::GammaInit;
use funclust::summary::DEFAULT_PROBS;
use funclust::{Backend, ColumnSchema, Error, HyperConfig, RecordOptions, Result, SimulationSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Simulation {
        spec: SimulationSpec,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        schema: ColumnSchema,
        /// Declared time range; defaults to the observed one.
        #[serde(default)]
        time_range: Option<(f64, f64)>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Simulation {
            spec: SimulationSpec::three_cluster([150, 150, 150]),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisSpec {
    /// Knots at equally spaced quantiles of the pooled observation times.
    NKnots(usize),
    Knots(Vec<Vec<f64>>),
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec::NKnots(30)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub n_chains: usize,
    pub n_sweeps: u64,
    pub seed: u64,
    pub backend: Backend,
    pub gamma_init: GammaInit,
    pub record: RecordOptions,
    /// Sweeps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            n_chains: 3,
            n_sweeps: 4000,
            seed: 1,
            backend: Backend::Pcg,
            gamma_init: GammaInit::Random,
            record: RecordOptions::default(),
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarySettings {
    pub n_grid: usize,
    pub probs: [f64; 3],
    pub min_occupancy: f64,
}

impl Default for SummarySettings {
    fn default() -> Self {
        SummarySettings {
            n_grid: 100,
            probs: DEFAULT_PROBS,
            min_occupancy: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicateSettings {
    pub n_replicates: usize,
    /// Concentration values to compare; empty means the one in `hyper`.
    pub nus: Vec<f64>,
    /// Replicate `j` simulates with seed `first_seed + j`.
    pub first_seed: u64,
}

impl Default for ReplicateSettings {
    fn default() -> Self {
        ReplicateSettings {
            n_replicates: 20,
            nus: Vec::new(),
            first_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub hyper: HyperConfig,
    pub basis: BasisSpec,
    pub sampler: SamplerSettings,
    pub diagnostics: DiagnosticsConfig,
    pub summary: SummarySettings,
    pub replicate: ReplicateSettings,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::default(),
            hyper: HyperConfig::default(),
            basis: BasisSpec::default(),
            sampler: SamplerSettings::default(),
            diagnostics: DiagnosticsConfig::default(),
            summary: SummarySettings::default(),
            replicate: ReplicateSettings::default(),
            output: PathBuf::from("out"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub chains: Option<usize>,
    pub sweeps: Option<u64>,
    pub backend: Option<Backend>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a config file; relative CSV paths are taken relative to it.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        if let DataSource::Csv { path: csv, .. } = &mut cfg.data {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.sampler.seed = seed;
        }
        if let Some(c) = o.chains {
            self.sampler.n_chains = c;
        }
        if let Some(s) = o.sweeps {
            self.sampler.n_sweeps = s;
        }
        if let Some(b) = o.backend {
            self.sampler.backend = b;
        }
        if let Some(out) = &o.out {
            self.output = out.clone();
        }
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Simulation { spec, .. } => {
                spec.validate()?;
            }
            DataSource::Csv { schema, time_range, .. } => {
                if schema.w.is_empty() && !schema.w_intercept {
                    return Err(Error::validation("schema needs at least one varying-coefficient column"));
                }
                if let Some((lo, hi)) = time_range {
                    if !(lo < hi) {
                        return Err(Error::validation("time_range must be increasing"));
                    }
                }
            }
        }
        if let BasisSpec::NKnots(0) = self.basis {
            return Err(Error::validation("n_knots must be at least 1"));
        }
        let s = &self.sampler;
        if s.n_chains == 0 {
            return Err(Error::validation("n_chains must be at least 1"));
        }
        if s.record.thin == 0 {
            return Err(Error::validation("record.thin must be at least 1"));
        }
        let d = &self.diagnostics;
        if !(0.0..1.0).contains(&d.burn) {
            return Err(Error::validation("diagnostics.burn must lie in [0, 1)"));
        }
        if d.thin == 0 {
            return Err(Error::validation("diagnostics.thin must be at least 1"));
        }
        if d.grid_points.is_none() && d.n_grid_points == 0 {
            return Err(Error::validation("diagnostics need at least one monitored time"));
        }
        let p = &self.summary.probs;
        if !(0.0 < p[0] && p[0] < p[1] && p[1] < p[2] && p[2] < 1.0) {
            return Err(Error::validation("summary.probs must be increasing within (0, 1)"));
        }
        if self.summary.n_grid < 2 {
            return Err(Error::validation("summary.n_grid must be at least 2"));
        }
        if self.replicate.n_replicates == 0 {
            return Err(Error::validation("replicate.n_replicates must be at least 1"));
        }
        if self.replicate.nus.iter().any(|&nu| !(nu > 0.0)) {
            return Err(Error::validation("replicate.nus must be positive"));
        }
        let nus = &self.replicate.nus;
        if nus.iter().enumerate().any(|(i, a)| nus[..i].contains(a)) {
            return Err(Error::validation("replicate.nus must not repeat a value"));
        }
        Ok(())
    }
}
