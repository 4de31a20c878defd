//! Speech Swin-Transformer: hierarchical local/shifted window attention over
//! log-Mel spectrograms, with the feature front end, training loop and
//! leave-one-speaker-out evaluation needed to use it.

pub mod tensor;
pub mod dsp;
pub mod model;
pub mod train;
