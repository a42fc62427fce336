use super::tape::{log_sum_exp, softmax, Tape};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// `(-log softmax(logits)[target], softmax(logits))`.
pub fn softmax_cross_entropy(logits: &[f64], target_id: usize) -> Result<(f64, Vec<f64>)> {
    if target_id >= logits.len() {
        return Err(Error::Invalid(format!(
            "target id {target_id} out of range for {} logits",
            logits.len()
        )));
    }
    Ok((log_sum_exp(logits) - logits[target_id], softmax(logits)))
}

/// Gradient of [`softmax_cross_entropy`] with respect to the logits, taken
/// through the tape.
pub fn softmax_cross_entropy_grad(logits: &[f64], target_id: usize) -> Result<Vec<f64>> {
    softmax_cross_entropy(logits, target_id)?;
    let mut store = ParamStore::new();
    let id = store.zeros("logits", vec![logits.len()]);
    store.get_mut(id).values_mut().copy_from_slice(logits);
    let mut tape = Tape::new(&store);
    let l = tape.param(id);
    let loss = tape.cross_entropy(l, target_id);
    let mut grads = super::params::Gradients::zeros_like(&store);
    tape.backward(loss, 1.0, &mut grads);
    Ok(grads.get(id).to_vec())
}
