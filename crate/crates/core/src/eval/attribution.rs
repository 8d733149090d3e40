//! Integrated gradients and the reports built on them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gnn::{Gnn, GnnModel, GraphData};
use crate::graph::WsiGraph;
use crate::nn::{Ctx, FeedForward, Params};

pub const DEFAULT_IG_STEPS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct IgResult {
    /// Same shape as the input.
    pub attributions: Tensor<f64>,
    pub target: usize,
    pub f_input: f64,
    pub f_baseline: f64,
    /// `Σ IG − (f(x) − f(baseline))`.
    pub residual: f64,
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, j| if v[j] > v[b] { j } else { b })
}

/// Midpoint Riemann sum over `steps` points of the straight path from
/// `baseline` (zeros when `None`) to `x`. `f` maps the recorded input to a
/// single row of logits; the target is the logit of the class predicted at
/// `x`.
pub fn integrated_gradients<F>(f: F, x: &Tensor<f64>, baseline: Option<&Tensor<f64>>, steps: usize) -> Result<IgResult>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs at least one step"));
    }
    let zero = Tensor::zeros(x.shape());
    let base = baseline.unwrap_or(&zero);
    if base.shape() != x.shape() {
        return Err(Error::shape("integrated_gradients", format!("baseline {:?} vs input {:?}", base.shape(), x.shape())));
    }
    let eval = |point: &Tensor<f64>| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data().to_vec())
    };
    let fx = eval(x)?;
    let target = argmax(&fx);
    let fb = eval(base)?;
    if fb.len() != fx.len() {
        return Err(Error::shape("integrated_gradients", "model output width changed along the path"));
    }
    let diff: Vec<f64> = x.data().iter().zip(base.data()).map(|(a, b)| a - b).collect();
    let mut total = vec![0.0; x.len()];
    for k in 0..steps {
        let a = (k as f64 + 0.5) / steps as f64;
        let point: Vec<f64> = base.data().iter().zip(&diff).map(|(b, d)| b + a * d).collect();
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(x.shape(), point)?, true);
        let out = f(&mut tape, v)?;
        let mut pick = vec![0.0; fx.len()];
        pick[target] = 1.0;
        let pick = tape.constant(Tensor::new(tape.shape(out), pick)?);
        let picked = tape.mul(out, pick)?;
        let s = tape.sum(picked, None)?;
        let g = tape.backward(s)?.wrt(v);
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at path step {k}")));
        }
        for (t, gv) in total.iter_mut().zip(g.data()) {
            *t += gv;
        }
    }
    let attr: Vec<f64> = total.iter().zip(&diff).map(|(g, d)| d * g / steps as f64).collect();
    let delta = fx[target] - fb[target];
    let residual = attr.iter().sum::<f64>() - delta;
    Ok(IgResult {
        attributions: Tensor::new(x.shape(), attr)?,
        target,
        f_input: fx[target],
        f_baseline: fb[target],
        residual,
    })
}

/// Integrated gradients of a dense model for one input row.
pub fn ig_feedforward(net: &FeedForward, params: &Params<f64>, x: &[f64], baseline: Option<&[f64]>, steps: usize) -> Result<IgResult> {
    let xt = Tensor::new(&[1, x.len()], x.to_vec())?;
    let bt = baseline.map(|b| Tensor::new(&[1, b.len()], b.to_vec())).transpose()?;
    integrated_gradients(
        |tape, v| {
            let b = params.bind(tape);
            Ok(net.forward_var(tape, &b, v, &mut Ctx::eval())?.logits)
        },
        &xt,
        bt.as_ref(),
        steps,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub name: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityShare {
    pub modality: String,
    pub percent: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub feature_names: Vec<String>,
    /// Mean absolute attribution per feature over the explained samples.
    pub scores: Vec<f64>,
    pub top_k: Vec<RankedFeature>,
    /// Largest absolute completeness residual among the explained samples.
    pub completeness_residual: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modality_contribution: Vec<ModalityShare>,
}

impl AttributionReport {
    /// Ranks features by mean |IG| (ties by feature order).
    pub fn from_samples(names: Vec<String>, samples: &[IgResult], top_k: usize) -> Result<Self> {
        let d = names.len();
        if samples.iter().any(|s| s.attributions.len() != d) {
            return Err(Error::shape("attribution report", format!("{d} feature names vs attribution widths")));
        }
        let n = samples.len().max(1) as f64;
        let mut scores = vec![0.0; d];
        for s in samples {
            for (a, v) in scores.iter_mut().zip(s.attributions.data()) {
                *a += v.abs() / n;
            }
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let top = order
            .iter()
            .take(top_k)
            .map(|&i| RankedFeature {
                name: names[i].clone(),
                score: scores[i],
            })
            .collect();
        Ok(AttributionReport {
            feature_names: names,
            scores,
            top_k: top,
            completeness_residual: samples.iter().map(|s| s.residual.abs()).fold(0.0, f64::max),
            modality_contribution: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeAttributionConfig {
    pub top_fraction: f64,
    /// Half box size for nodes without member extents.
    pub fallback_half_size: f64,
    pub steps: usize,
}

impl Default for NodeAttributionConfig {
    fn default() -> Self {
        NodeAttributionConfig {
            top_fraction: 0.1,
            fallback_half_size: 512.0,
            steps: DEFAULT_IG_STEPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeAttribution {
    pub scores: Vec<f64>,
    pub target: usize,
    pub residual: f64,
    pub top_nodes: Vec<usize>,
    /// Merged `[x0, y0, x1, y1]` boxes of the top nodes.
    pub regions: Vec<[f64; 4]>,
}

fn overlaps(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[0] <= b[2] && b[0] <= a[2] && a[1] <= b[3] && b[1] <= a[3]
}

/// Repeatedly replaces overlapping (or touching) boxes by their union hull.
pub fn merge_boxes(boxes: &[[f64; 4]]) -> Vec<[f64; 4]> {
    let mut out: Vec<[f64; 4]> = boxes.to_vec();
    loop {
        let mut merged = false;
        'scan: for i in 0..out.len() {
            for j in i + 1..out.len() {
                if overlaps(&out[i], &out[j]) {
                    let b = out.remove(j);
                    let a = &mut out[i];
                    *a = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
                    merged = true;
                    break 'scan;
                }
            }
        }
        if !merged {
            break;
        }
    }
    out.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    out
}

/// Per-node L2 norm of the node-feature IG; boxes of the top nodes are
/// merged into regions.
pub fn node_attribution(model: &GnnModel, graph: &WsiGraph, cfg: &NodeAttributionConfig) -> Result<NodeAttribution> {
    if graph.nodes.is_empty() {
        return Err(Error::invalid("cannot attribute an empty graph"));
    }
    if !(cfg.top_fraction > 0.0 && cfg.top_fraction <= 1.0) {
        return Err(Error::invalid(format!("top fraction {} outside (0, 1]", cfg.top_fraction)));
    }
    let data: GraphData<f64> = GraphData::from_graph(graph)?;
    let params = model.params.cast::<f64>();
    let (x, batch) = Gnn::batch_for(&vec![data], &[0])?;
    let ig = integrated_gradients(
        |tape, v| {
            let b = params.bind(tape);
            Ok(model.gnn.forward_batch(tape, &b, v, &batch, &mut Ctx::eval())?.logits)
        },
        &x,
        None,
        cfg.steps,
    )?;
    let n = graph.nodes.len();
    let scores: Vec<f64> = (0..n).map(|i| ig.attributions.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let k = ((cfg.top_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order[..k].to_vec();
    top.sort_unstable();
    let h = cfg.fallback_half_size;
    let boxes: Vec<[f64; 4]> = top
        .iter()
        .map(|&i| {
            let nd = &graph.nodes[i];
            nd.bbox.unwrap_or([nd.x - h, nd.y - h, nd.x + h, nd.y + h])
        })
        .collect();
    Ok(NodeAttribution {
        scores,
        target: ig.target,
        residual: ig.residual,
        top_nodes: top,
        regions: merge_boxes(&boxes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpConfig;
    use crate::rng::Rng;

    #[test]
    fn linear_model_gives_w_times_x() {
        let w = [0.5, -2.0, 3.0];
        let x = Tensor::from_f64(&[1, 3], &[1.0, -4.0, 0.5]).unwrap();
        let wt = Tensor::from_f64(&[3, 2], &[w[0], 0.0, w[1], 0.0, w[2], 0.0]).unwrap();
        let r = integrated_gradients(
            |tape, v| {
                let wv = tape.constant(wt.clone());
                tape.matmul(v, wv)
            },
            &x,
            None,
            DEFAULT_IG_STEPS,
        )
        .unwrap();
        for i in 0..3 {
            assert!((r.attributions.data()[i] - w[i] * x.data()[i]).abs() < 1e-12);
        }
        assert!(r.residual.abs() < 1e-12);
    }

    #[test]
    fn input_at_baseline_gives_zero() {
        let mut p = Params::<f64>::new();
        let cfg = MlpConfig { layer_widths: vec![5], dropout_p: 0.0, num_classes: 3 };
        let net = FeedForward::mlp(&cfg, 4, &mut p, &mut Rng::new(1).stream("i")).unwrap();
        let x = [0.2, -0.1, 0.7, 1.0];
        let r = ig_feedforward(&net, &p, &x, Some(&x), 16).unwrap();
        assert!(r.attributions.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn box_merging() {
        let single = merge_boxes(&[[0.0, 0.0, 1.0, 1.0]]);
        assert_eq!(single.len(), 1);
        let far = merge_boxes(&[[0.0, 0.0, 1.0, 1.0], [10.0, 10.0, 11.0, 11.0]]);
        assert_eq!(far.len(), 2);
        let chain = merge_boxes(&[[0.0, 0.0, 2.0, 2.0], [5.0, 0.0, 7.0, 2.0], [1.0, 1.0, 6.0, 3.0]]);
        assert_eq!(chain, vec![[0.0, 0.0, 7.0, 3.0]]);
    }
}
