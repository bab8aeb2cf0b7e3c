use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Cross-entropy of `softmax(logits)` against `target`, and its gradient
/// `softmax(logits) − one_hot(target)`.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "target {target} outside vocabulary of {}",
            logits.len()
        )));
    }
    let mut g = vec![0.0; logits.len()];
    let loss = softmax_xent_into(logits, target, &mut g);
    Ok((loss, g))
}

/// Writes the gradient into `g` and returns the loss; `target` must be in range.
pub(crate) fn softmax_xent_into(logits: &[f64], target: usize, g: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (gi, &l) in g.iter_mut().zip(logits) {
        *gi = libm::exp(l - max);
        sum += *gi;
    }
    let log_z = max + libm::log(sum);
    for gi in g.iter_mut() {
        *gi /= sum;
    }
    g[target] -= 1.0;
    log_z - logits[target]
}
