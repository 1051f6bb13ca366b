//! Training, one-pass evaluation, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod train;

use std::path::{Path, PathBuf};

use crate::kv::KvError;
use crate::synthdata::SynthError;
use crate::tensor::TensorError;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_file, save_checkpoint_file,
    CheckpointError,
};
pub use config::{BackboneInput, Config, ModelConfig, Profile, TrainConfig, TrainMode};
pub use eval::{evaluate, evaluate_with, ope_metrics, Evaluation, OpeResult, Tracker};
pub use model::Model;
pub use train::{build, train, StepRecord, Trained};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFinite { step: usize, breakdown: String },
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
