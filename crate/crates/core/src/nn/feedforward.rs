//! Dense classifier stacks: the ReLU MLP used for tabular data and fusion
//! heads, and the SELU self-normalizing network used for copy-number data.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

use super::layers::{alpha_dropout, dropout, Ctx, Init, Linear};
use super::model::{Classifier, Output};
use super::params::{Bound, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub layer_widths: Vec<usize>,
    pub dropout_p: f64,
    pub num_classes: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            layer_widths: vec![128, 64],
            dropout_p: 0.0,
            num_classes: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnnConfig {
    pub layer_widths: Vec<usize>,
    pub alpha_dropout_p: f64,
    pub num_classes: usize,
}

impl Default for SnnConfig {
    fn default() -> Self {
        SnnConfig {
            layer_widths: vec![8192, 2048],
            alpha_dropout_p: 0.0,
            num_classes: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Selu,
}

/// Hidden stack plus linear head. The intermediate representation is the
/// last hidden activation (the input itself when there are no hidden layers).
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub input_dim: usize,
    pub activation: Activation,
    pub dropout_p: f64,
    pub hidden: Vec<Linear>,
    pub head: Linear,
    pub num_classes: usize,
}

fn validate(widths: &[usize], p: f64, classes: usize, input_dim: usize) -> Result<()> {
    if widths.iter().any(|&w| w == 0) || input_dim == 0 {
        return Err(Error::invalid(format!("layer widths must be positive: {widths:?}, input {input_dim}")));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if classes == 0 {
        return Err(Error::invalid("num_classes must be positive"));
    }
    Ok(())
}

impl FeedForward {
    pub fn mlp<T: Float>(cfg: &MlpConfig, input_dim: usize, params: &mut Params<T>, s: &mut Stream) -> Result<Self> {
        validate(&cfg.layer_widths, cfg.dropout_p, cfg.num_classes, input_dim)?;
        Ok(Self::build(
            "mlp",
            &cfg.layer_widths,
            cfg.num_classes,
            input_dim,
            Activation::Relu,
            cfg.dropout_p,
            Init::UniformFanIn,
            params,
            s,
        ))
    }

    pub fn snn<T: Float>(cfg: &SnnConfig, input_dim: usize, params: &mut Params<T>, s: &mut Stream) -> Result<Self> {
        validate(&cfg.layer_widths, cfg.alpha_dropout_p, cfg.num_classes, input_dim)?;
        Ok(Self::build(
            "snn",
            &cfg.layer_widths,
            cfg.num_classes,
            input_dim,
            Activation::Selu,
            cfg.alpha_dropout_p,
            Init::LecunNormal,
            params,
            s,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn build<T: Float>(
        prefix: &str,
        widths: &[usize],
        classes: usize,
        input_dim: usize,
        activation: Activation,
        dropout_p: f64,
        init: Init,
        params: &mut Params<T>,
        s: &mut Stream,
    ) -> Self {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for (i, &w) in widths.iter().enumerate() {
            hidden.push(Linear::new(params, &format!("{prefix}.hidden{i}"), prev, w, init, s));
            prev = w;
        }
        let head = Linear::new(params, &format!("{prefix}.head"), prev, classes, init, s);
        FeedForward {
            input_dim,
            activation,
            dropout_p,
            hidden,
            head,
            num_classes: classes,
        }
    }

    pub fn intermediate_dim(&self) -> usize {
        self.hidden.last().map_or(self.input_dim, |l| l.out_dim)
    }

    /// Forward from an already-recorded input (used by attribution).
    pub fn forward_var<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, ctx: &mut Ctx<T>) -> Result<Output> {
        let width = tape.shape(x).last().copied().unwrap_or(0);
        if width != self.input_dim {
            return Err(Error::shape(
                "feedforward",
                format!("input width {width}, model expects {}", self.input_dim),
            ));
        }
        let mut h = x;
        let mut intermediate = x;
        for layer in &self.hidden {
            let z = layer.forward(tape, p, h)?;
            let a = match self.activation {
                Activation::Relu => tape.relu(z),
                Activation::Selu => tape.selu(z),
            };
            intermediate = a;
            h = match self.activation {
                Activation::Relu => dropout(tape, a, self.dropout_p, ctx)?,
                Activation::Selu => alpha_dropout(tape, a, self.dropout_p, ctx)?,
            };
        }
        let logits = self.head.forward(tape, p, h)?;
        Ok(Output { logits, intermediate })
    }
}

impl Classifier for FeedForward {
    type Input<T: Float> = Tensor<T>;

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: &Tensor<T>,
        rows: &[usize],
        ctx: &mut Ctx<T>,
    ) -> Result<Output> {
        if input.rank() != 2 {
            return Err(Error::shape("feedforward", format!("expected [N, d] input, got {:?}", input.shape())));
        }
        let x = tape.constant(input.select_rows(rows));
        self.forward_var(tape, p, x, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::nn::loss::softmax_cross_entropy;
    use crate::rng::Rng;

    fn batch(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut s = Rng::new(seed).stream("x");
        Tensor::new(&[n, d], (0..n * d).map(|_| s.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let mut params = Params::<f64>::new();
        let cfg = MlpConfig { layer_widths: vec![4], dropout_p: 0.0, num_classes: 3 };
        let m = FeedForward::mlp(&cfg, 5, &mut params, &mut Rng::new(0).stream("init")).unwrap();
        for t in params.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let out = m.forward(&mut tape, &b, &batch(2, 5, 1), &[0, 1], &mut Ctx::eval()).unwrap();
        assert!(tape.value(out.logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_by_hand() {
        let mut params = Params::<f64>::new();
        let cfg = MlpConfig { layer_widths: vec![], dropout_p: 0.0, num_classes: 2 };
        let m = FeedForward::mlp(&cfg, 2, &mut params, &mut Rng::new(0).stream("init")).unwrap();
        params.set(m.head.weight, Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        params.set(m.head.bias, Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap());
        let x = Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let out = m.forward(&mut tape, &b, &x, &[0], &mut Ctx::eval()).unwrap();
        // [1,1]·[[1,2],[3,4]] + [0.5,-0.5]
        assert_eq!(tape.value(out.logits).data(), &[4.5, 5.5]);
    }

    #[test]
    fn width_mismatch_errors() {
        let mut params = Params::<f64>::new();
        let m = FeedForward::mlp(&MlpConfig::default(), 5, &mut params, &mut Rng::new(0).stream("i")).unwrap();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        assert!(m.forward(&mut tape, &b, &batch(2, 4, 1), &[0], &mut Ctx::eval()).is_err());
    }

    #[test]
    fn mlp_and_snn_pass_grad_check() {
        for snn in [false, true] {
            let mut params = Params::<f64>::new();
            let mut s = Rng::new(5).stream("init");
            let m = if snn {
                let cfg = SnnConfig { layer_widths: vec![6, 5], alpha_dropout_p: 0.0, num_classes: 3 };
                FeedForward::snn(&cfg, 4, &mut params, &mut s).unwrap()
            } else {
                let cfg = MlpConfig { layer_widths: vec![6, 5], dropout_p: 0.0, num_classes: 3 };
                FeedForward::mlp(&cfg, 4, &mut params, &mut s).unwrap()
            };
            let x = batch(5, 4, 9);
            let labels = [0, 2, 1, 1, 0];
            let r = grad_check_many(
                |tape, vars| {
                    let b = Params::<f64>::bind_vars(vars.to_vec());
                    let out = m.forward(tape, &b, &x, &[0, 1, 2, 3, 4], &mut Ctx::eval())?;
                    softmax_cross_entropy(tape, out.logits, &labels, Some(&[1.0, 2.0, 0.5]))
                },
                params.tensors(),
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "snn={snn}: {r:?}");
        }
    }

    #[test]
    fn eval_mode_ignores_dropout_stream() {
        let mut params = Params::<f32>::new();
        let cfg = SnnConfig { layer_widths: vec![8, 8], alpha_dropout_p: 0.3, num_classes: 2 };
        let m = FeedForward::snn(&cfg, 3, &mut params, &mut Rng::new(1).stream("init")).unwrap();
        let x = batch(4, 3, 2).cast::<f32>();
        let run = |_seed: u64| {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let out = m.forward(&mut tape, &b, &x, &[0, 1, 2, 3], &mut Ctx::eval()).unwrap();
            tape.value(out.logits).clone()
        };
        assert_eq!(run(1), run(2));
    }
}
