//! Cross-entropy loss, Adam, leave-one-speaker-out folds, recall metrics,
//! the training loop and a synthetic tone corpus for end-to-end checks.

mod adam;
mod data;
mod loss;
mod metrics;
mod trainer;

use thiserror::Error;

use crate::dsp::DspError;
use crate::model::ModelError;
use crate::tensor::TensorError;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use data::{
    featurize, loso_splits, nearest_centroid, synth_dataset, synth_tone_hz, Fold, LabeledDataset, LabeledItem,
    SynthClip, SynthSpec, MAX_SYNTH_CLASSES,
};
pub use loss::cross_entropy;
pub use metrics::{compute_metrics, Confusion, EvalReport};
pub use trainer::{argmax, evaluate, score, train_fold, vote, EpochRecord, Split, TrainConfig, TrainedFold, Vote};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
