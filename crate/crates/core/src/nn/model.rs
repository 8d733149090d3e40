use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::error::Result;

use super::layers::Ctx;
use super::params::{Bound, Params};

/// Logits plus the representation that feeds the classification head.
#[derive(Clone, Copy, Debug)]
pub struct Output {
    pub logits: Var,
    pub intermediate: Var,
}

/// A trainable classifier over some input collection. `rows` selects the
/// samples that make up the batch.
pub trait Classifier {
    type Input<T: Float>;

    fn num_classes(&self) -> usize;

    fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: &Self::Input<T>,
        rows: &[usize],
        ctx: &mut Ctx<T>,
    ) -> Result<Output>;
}

/// Evaluation-mode outputs for `rows`, computed in chunks.
pub fn predict<M: Classifier, T: Float>(
    model: &M,
    params: &Params<T>,
    input: &M::Input<T>,
    rows: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut logits = Vec::new();
    let mut inter = Vec::new();
    let (mut c, mut d) = (model.num_classes(), 0);
    for chunk in rows.chunks(256) {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let out = model.forward(&mut tape, &b, input, chunk, &mut Ctx::eval())?;
        let (l, h) = (tape.value(out.logits), tape.value(out.intermediate));
        c = l.cols();
        d = h.len() / chunk.len().max(1);
        logits.extend_from_slice(l.data());
        inter.extend_from_slice(h.data());
    }
    Ok((Tensor::new(&[rows.len(), c], logits)?, Tensor::new(&[rows.len(), d], inter)?))
}
