//! Selective contrastive learning for unsupervised person re-identification.
//!
//! A small convolution-free encoder produces a feature map that is pooled
//! globally and in horizontal stripes. Projected keys are compared against
//! per-sample memory banks to pick, for every anchor, a handful of likely
//! same-identity positives and a band of hard negatives. Training minimizes a
//! weighted contrastive loss against a mixture bank. No identity labels are
//! used outside evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod loss;
pub mod memory;
pub mod model;
pub mod sampling;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{EvalConfig, PathsConfig, RunConfig};
pub use error::{Error, Result};
pub use eval::{EvalFeature, EvalProtocol, EvalReport};
pub use loss::LossConfig;
pub use memory::MemoryBanks;
pub use model::{ModelConfig, ModelParams, ProjectedKeys};
pub use sampling::{SampleSelection, SimilarityConfig};
pub use synthdata::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetSpec, ImageSample};
pub use tensor::Tensor;
pub use trainer::{BatchHook, BatchReport, EpochStats, MixtureKeys, Phase, TrainConfig, Trainer};
