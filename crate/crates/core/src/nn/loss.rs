use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Class-weighted softmax cross-entropy, averaged with the weights as the
/// normaliser: `-Σ w_{y_i} log p_{i,y_i} / Σ w_{y_i}`.
///
/// Weights are divided by their maximum first, so uniform weights reduce to
/// the plain mean bit for bit.
pub fn softmax_cross_entropy<T: Float>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {shape:?} vs {} labels", labels.len()),
        ));
    }
    let c = shape[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} outside 0..{c}")));
    }
    let weights: Vec<f64> = match class_weights {
        Some(w) => {
            if w.len() != c {
                return Err(Error::invalid(format!("{} class weights for {c} classes", w.len())));
            }
            let max = w.iter().cloned().fold(0.0, f64::max);
            if w.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid("class weights must be positive"));
            }
            w.iter().map(|v| v / max).collect()
        }
        None => vec![1.0; c],
    };
    let total: f64 = labels.iter().map(|&y| weights[y]).sum();
    let mut pick = vec![T::zero(); labels.len() * c];
    for (i, &y) in labels.iter().enumerate() {
        pick[i * c + y] = T::of(weights[y] / total);
    }
    let ls = tape.log_softmax(logits)?;
    let pick = tape.constant(Tensor::new(&shape, pick)?);
    let picked = tape.mul(ls, pick)?;
    let s = tape.sum(picked, None)?;
    Ok(tape.neg(s))
}
