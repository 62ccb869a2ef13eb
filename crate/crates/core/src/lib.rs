//! Few-shot adaptation of a pretrained image generator with dual contrastive
//! regularization, together with the quality/diversity analysis toolkit used
//! to compare adaptation methods.

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mi;
pub mod models;
pub mod nn;

pub use adapt::{AdaptationConfig, AdaptationRun, MetricRow, MetricSeries, Method, PretrainConfig, SourceModels};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use data::{Dataset, DatasetSpec};
pub use error::{Error, Result};
pub use losses::{LossBundle, NegativeSetup};
pub use metrics::{EvalReport, PairBudget};
pub use mi::{BoundReport, ToyJointDistribution};
pub use models::{ImageBatch, LatentBatch, ModelConfig, Provenance};
