//! Token-level fusion encoder. Each modality's intermediate vector becomes
//! one token through its own affine projection plus a learned modality
//! embedding; a learned classification token is appended and the MLP head
//! reads its final state. Pre-norm residual blocks, no positional encoding.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

use super::layers::{dropout, Ctx, Init, LayerNorm, Linear};
use super::model::{Classifier, Output};
use super::params::{uniform_fan_in, Bound, ParamId, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub mlp_head_widths: Vec<usize>,
    pub dropout_p: f64,
    /// Input width of each modality token, in canonical modality order.
    pub token_widths: Vec<usize>,
    pub num_classes: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            num_layers: 6,
            model_dim: 512,
            num_heads: 8,
            ff_dim: 2048,
            mlp_head_widths: vec![128],
            dropout_p: 0.1,
            token_widths: Vec::new(),
            num_classes: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    projections: Vec<Linear>,
    modality_embedding: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    head_hidden: Vec<Linear>,
    head: Linear,
}

/// One `[N, d_m]` matrix per modality, rows aligned by patient.
pub type TokenSet<T> = Vec<Tensor<T>>;

impl Transformer {
    pub fn new<T: Float>(cfg: &TransformerConfig, params: &mut Params<T>, s: &mut Stream) -> Result<Self> {
        let d = cfg.model_dim;
        if cfg.num_heads == 0 || d == 0 || d % cfg.num_heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {d} must be a positive multiple of num_heads {}",
                cfg.num_heads
            )));
        }
        if cfg.token_widths.is_empty() {
            return Err(Error::invalid("transformer needs at least one modality token"));
        }
        if cfg.token_widths.iter().chain(&cfg.mlp_head_widths).any(|&w| w == 0) || cfg.ff_dim == 0 {
            return Err(Error::invalid("transformer widths must be positive"));
        }
        let m = cfg.token_widths.len();
        let projections = cfg
            .token_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Linear::new(params, &format!("tf.proj{i}"), w, d, Init::UniformFanIn, s))
            .collect();
        let modality_embedding = params.add("tf.modality_embedding", uniform_fan_in(&[m, d], d, s));
        let cls = params.add("tf.cls", uniform_fan_in(&[d], d, s));
        let blocks = (0..cfg.num_layers)
            .map(|l| {
                let n = |part: &str| format!("tf.layer{l}.{part}");
                Block {
                    norm1: LayerNorm::new(params, &n("norm1"), d),
                    q: Linear::new(params, &n("q"), d, d, Init::UniformFanIn, s),
                    k: Linear::new(params, &n("k"), d, d, Init::UniformFanIn, s),
                    v: Linear::new(params, &n("v"), d, d, Init::UniformFanIn, s),
                    o: Linear::new(params, &n("o"), d, d, Init::UniformFanIn, s),
                    norm2: LayerNorm::new(params, &n("norm2"), d),
                    ff1: Linear::new(params, &n("ff1"), d, cfg.ff_dim, Init::UniformFanIn, s),
                    ff2: Linear::new(params, &n("ff2"), cfg.ff_dim, d, Init::UniformFanIn, s),
                }
            })
            .collect();
        let mut prev = d;
        let head_hidden = cfg
            .mlp_head_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Linear::new(params, &format!("tf.head_hidden{i}"), prev, w, Init::UniformFanIn, s);
                prev = w;
                l
            })
            .collect();
        let head = Linear::new(params, "tf.head", prev, cfg.num_classes, Init::UniformFanIn, s);
        Ok(Transformer {
            cfg: cfg.clone(),
            projections,
            modality_embedding,
            cls,
            blocks,
            head_hidden,
            head,
        })
    }

    /// Parameters of the residual branches (attention output and second
    /// feed-forward projection) of every block.
    pub fn residual_branch_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [b.o.weight, b.o.bias, b.ff2.weight, b.ff2.bias])
            .collect()
    }

    pub fn cls_param(&self) -> ParamId {
        self.cls
    }

    /// Full forward from recorded token matrices (`[B, d_m]` each). Returns
    /// the output plus the attention probabilities `[B, S, S]` of every
    /// (layer, head).
    pub fn forward_tokens<T: Float>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[Var],
        ctx: &mut Ctx<T>,
    ) -> Result<(Output, Vec<Var>)> {
        let m = self.projections.len();
        if tokens.is_empty() {
            return Err(Error::invalid("empty token set"));
        }
        if tokens.len() != m {
            return Err(Error::shape("transformer", format!("{} tokens for {m} modalities", tokens.len())));
        }
        let d = self.cfg.model_dim;
        let bsz = tape.shape(tokens[0])[0];
        let mut seq = Vec::with_capacity(m + 1);
        for (i, (&tok, proj)) in tokens.iter().zip(&self.projections).enumerate() {
            let h = proj.forward(tape, p, tok)?;
            let e = tape.slice(p.var(self.modality_embedding), 0, i, i + 1)?;
            let h = tape.add(h, e)?;
            seq.push(tape.reshape(h, &[bsz, 1, d])?);
        }
        let cls = tape.reshape(p.var(self.cls), &[1, 1, d])?;
        seq.push(tape.broadcast_to(cls, &[bsz, 1, d])?);
        let mut h = tape.concat(&seq, 1)?;

        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(self.blocks.len() * heads);
        for b in &self.blocks {
            let x = b.norm1.forward(tape, p, h)?;
            let q = b.q.forward(tape, p, x)?;
            let k = b.k.forward(tape, p, x)?;
            let v = b.v.forward(tape, p, x)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh = tape.slice(q, 2, lo, hi)?;
                let kh = tape.slice(k, 2, lo, hi)?;
                let vh = tape.slice(v, 2, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale);
                let att = tape.softmax(scores)?;
                attention.push(att);
                outs.push(tape.matmul(att, vh)?);
            }
            let cat = if heads == 1 { outs[0] } else { tape.concat(&outs, 2)? };
            let a = b.o.forward(tape, p, cat)?;
            let a = dropout(tape, a, self.cfg.dropout_p, ctx)?;
            h = tape.add(h, a)?;

            let x = b.norm2.forward(tape, p, h)?;
            let f = b.ff1.forward(tape, p, x)?;
            let f = tape.relu(f);
            let f = b.ff2.forward(tape, p, f)?;
            let f = dropout(tape, f, self.cfg.dropout_p, ctx)?;
            h = tape.add(h, f)?;
        }
        let cls_out = tape.slice(h, 1, m, m + 1)?;
        let cls_out = tape.reshape(cls_out, &[bsz, d])?;
        let mut z = cls_out;
        for l in &self.head_hidden {
            let y = l.forward(tape, p, z)?;
            z = tape.relu(y);
        }
        let logits = self.head.forward(tape, p, z)?;
        Ok((
            Output {
                logits,
                intermediate: cls_out,
            },
            attention,
        ))
    }
}

impl Classifier for Transformer {
    type Input<T: Float> = TokenSet<T>;

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: &TokenSet<T>,
        rows: &[usize],
        ctx: &mut Ctx<T>,
    ) -> Result<Output> {
        let tokens: Vec<Var> = input.iter().map(|t| tape.constant(t.select_rows(rows))).collect();
        Ok(self.forward_tokens(tape, p, &tokens, ctx)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::nn::loss::softmax_cross_entropy;
    use crate::rng::Rng;

    fn small(widths: Vec<usize>) -> TransformerConfig {
        TransformerConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 12,
            mlp_head_widths: vec![6],
            dropout_p: 0.0,
            token_widths: widths,
            num_classes: 3,
        }
    }

    fn tokens(widths: &[usize], n: usize, seed: u64) -> TokenSet<f64> {
        let mut s = Rng::new(seed).stream("tok");
        widths
            .iter()
            .map(|&w| Tensor::new(&[n, w], (0..n * w).map(|_| s.normal()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut cfg = small(vec![3]);
        cfg.num_heads = 3;
        assert!(Transformer::new(&cfg, &mut Params::<f64>::new(), &mut Rng::new(0).stream("i")).is_err());
    }

    #[test]
    fn zeroed_residual_branches_pass_cls_through() {
        let cfg = small(vec![5]);
        let mut params = Params::<f64>::new();
        let tf = Transformer::new(&cfg, &mut params, &mut Rng::new(1).stream("init")).unwrap();
        for id in tf.residual_branch_params() {
            let z = Tensor::zeros(params.get(id).shape());
            params.set(id, z);
        }
        let input = tokens(&[5], 3, 2);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let out = tf.forward(&mut tape, &b, &input, &[0, 1, 2], &mut Ctx::eval()).unwrap();
        let cls = params.get(tf.cls_param()).data().to_vec();
        let got = tape.value(out.intermediate);
        for r in 0..3 {
            assert_eq!(got.row(r), cls.as_slice());
        }
        assert_eq!(tape.shape(out.logits), &[3, 3]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small(vec![4, 3, 6]);
        let mut params = Params::<f64>::new();
        let tf = Transformer::new(&cfg, &mut params, &mut Rng::new(3).stream("init")).unwrap();
        let input = tokens(&[4, 3, 6], 5, 4);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let toks: Vec<Var> = input.iter().map(|t| tape.constant(t.clone())).collect();
        let (_, att) = tf.forward_tokens(&mut tape, &b, &toks, &mut Ctx::eval()).unwrap();
        assert_eq!(att.len(), 4);
        for a in att {
            let t = tape.value(a);
            assert_eq!(t.shape(), &[5, 4, 4]);
            for row in t.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_token_set_errors() {
        let cfg = small(vec![4]);
        let mut params = Params::<f64>::new();
        let tf = Transformer::new(&cfg, &mut params, &mut Rng::new(3).stream("init")).unwrap();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        assert!(tf.forward_tokens(&mut tape, &b, &[], &mut Ctx::eval()).is_err());
    }

    #[test]
    fn reduced_config_passes_grad_check() {
        let cfg = small(vec![4, 3]);
        let mut params = Params::<f64>::new();
        let tf = Transformer::new(&cfg, &mut params, &mut Rng::new(7).stream("init")).unwrap();
        let input = tokens(&[4, 3], 3, 8);
        let labels = [0, 2, 1];
        let r = grad_check_many(
            |tape, vars| {
                let b = Params::<f64>::bind_vars(vars.to_vec());
                let out = tf.forward(tape, &b, &input, &[0, 1, 2], &mut Ctx::eval())?;
                softmax_cross_entropy(tape, out.logits, &labels, None)
            },
            params.tensors(),
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
