//! Training, prediction and evaluation.
//!
//! [`train`] consumes fixed-length samples, usually produced by
//! [`prepare_training_samples`] (length filter, mean FA, class balancing).
//! [`predict`] applies a [`Model`] to a tractogram and [`evaluate`] scores
//! predicted labels against ground truth.

mod config;
mod data;
mod metrics;
mod model;
mod predict;
mod train;

pub use config::{FloatMode, LossMode, TrainConfig};
pub use data::{
    join_labels, labeled_streamlines, load_dataset, read_labels, read_samples, resampled_samples,
    save_dataset, split_dataset, write_labels, write_samples, LabelRow, Subject, LABELS_FILE,
    SAMPLES_FILE,
};
pub use metrics::{evaluate, Metrics};
pub use model::Model;
pub use predict::{predict, Prediction};
pub use train::{format_log, input_tensor, train, EpochRecord, Stage, TrainOutcome};

use thiserror::Error;

use crate::augment::{balance_dataset, AugmentError};
use crate::contrastive::ContrastiveError;
use crate::nn::NnError;
use crate::streamline::{FeatureSample, StreamlineError};
use crate::tract_io::TractIoError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least 3 subjects to split, got {0}")]
    TooFewSubjects(usize),
    #[error("training data must contain both classes")]
    SingleClassTrainingData,
    #[error("non-finite loss in {stage} epoch {epoch} batch {batch}")]
    NonFiniteLoss { stage: Stage, epoch: usize, batch: usize },
    #[error("no streamline passes the length filter")]
    EmptyTractogram,
    #[error("{pred} predictions but {truth} ground-truth labels")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("{path} line {line}: {message}")]
    LabelsFile { path: String, line: usize, message: String },
    #[error("samples file line {line}: {message}")]
    SamplesFile { line: usize, message: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    TractIo(#[from] TractIoError),
    #[error(transparent)]
    Streamline(#[from] StreamlineError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Length-filtered, balanced training samples for `cfg`.
pub fn prepare_training_samples(subjects: &[Subject], cfg: &TrainConfig) -> Result<Vec<FeatureSample>> {
    let labeled = labeled_streamlines(subjects, cfg.min_length_mm, &cfg.fa_channel)?;
    Ok(balance_dataset(&labeled, &cfg.augment())?)
}

/// Length-filtered, resampled, un-augmented samples for validation or testing.
pub fn prepare_eval_samples(subjects: &[Subject], cfg: &TrainConfig) -> Result<Vec<FeatureSample>> {
    let labeled = labeled_streamlines(subjects, cfg.min_length_mm, &cfg.fa_channel)?;
    resampled_samples(&labeled, cfg.points)
}
