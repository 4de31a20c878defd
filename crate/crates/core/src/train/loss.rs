use super::TrainError;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Mean over the batch of `-log softmax(logits)[label]`. The one-hot target
/// is built here from class indices.
pub fn cross_entropy<T: Scalar>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<Var, TrainError> {
    let shape = tape.shape(logits);
    let [b, k] = shape[..] else {
        return Err(TrainError::Invalid(format!("logits must be (b, k), got {shape:?}")));
    };
    if labels.len() != b {
        return Err(TrainError::Invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&z| z >= k) {
        return Err(TrainError::Label { label: bad, classes: k });
    }
    let mut onehot = vec![T::zero(); b * k];
    for (row, &z) in labels.iter().enumerate() {
        onehot[row * k + z] = T::one();
    }
    let target = tape.constant(Tensor::new(vec![b, k], onehot)?)?;
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.sum(tape.mul(logp, target)?)?;
    Ok(tape.scale(picked, -1.0 / b as f64)?)
}
