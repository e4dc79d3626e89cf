//! Bayesian functional clustering of binary longitudinal data.

pub mod assign;
pub mod basis;
pub mod data;
pub mod diagnostics;
pub mod draws;
pub mod error;
pub mod linalg;
pub mod model;
pub mod rand_dist;
pub mod sampler;
pub mod stats;
pub mod summary;

pub use basis::{BasisConfig, DesignLayout, Indicators};
pub use data::{ColumnSchema, Dims, LongitudinalDataset, SimulationSpec, SimulationTruth, SubjectRecord};
pub use diagnostics::{MixedDraw, PosteriorSamples};
pub use draws::{ChainDraws, Draw, RecordOptions};
pub use error::{Error, Result};
pub use model::{ChainState, ClusterParams, HyperConfig, Hyperparams, StickState};
pub use rand_dist::RngStream;
pub use sampler::{Backend, FreezeMask, PreparedModel, Sampler, SamplerOptions, Step};
