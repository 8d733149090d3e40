//! Graph classifier: input block, PNA convolutions and cumulative
//! per-stage classification heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Extreme, Float, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::WsiGraph;
use crate::nn::layers::{dropout, BatchNorm, Ctx, Init, Linear};
use crate::nn::model::{Classifier, Output};
use crate::nn::params::{Bound, Params};
use crate::nn::train::{train_classifier, TrainConfig, TrainReport};
use crate::nn::{Checkpoint, RunMetadata};
use crate::rng::Rng;

/// Small constant inside the std aggregator's square root.
pub const STD_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphPooling {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    /// Stage widths; the layer count L is `dims.len()`.
    pub dims: Vec<usize>,
    pub dropout_p: f64,
    pub lr: f64,
    pub num_classes: usize,
    pub pooling: GraphPooling,
    /// Mean `log(d + 1)` over training nodes; set by [`GnnModel::fit`].
    pub delta: Option<f64>,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig { dims: vec![32, 16, 8], dropout_p: 0.2, lr: 1e-4, num_classes: 4, pooling: GraphPooling::Mean, delta: None }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("GNN needs at least 2 positive stage widths, got {:?}", self.dims)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout probability {} outside [0, 1)", self.dropout_p)));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if let Some(d) = self.delta {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::invalid(format!("delta {d} must be positive")));
            }
        }
        Ok(())
    }
}

/// One graph's node features and undirected edges.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphData<T: Float> {
    pub x: Tensor<T>,
    pub edges: Vec<[usize; 2]>,
}

impl<T: Float> GraphData<T> {
    pub fn from_graph(g: &WsiGraph) -> Result<Self> {
        let w = g.feature_width();
        let data: Vec<f64> = g.nodes.iter().flat_map(|n| n.features.iter().copied()).collect();
        Ok(GraphData { x: Tensor::from_f64(&[g.nodes.len(), w], &data)?, edges: g.edges.clone() })
    }

    pub fn num_nodes(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn cast<U: Float>(&self) -> GraphData<U> {
        GraphData { x: self.x.cast(), edges: self.edges.clone() }
    }
}

pub type GraphSet<T> = Vec<GraphData<T>>;

/// Message-passing structure of a batch of graphs laid out back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub num_nodes: usize,
    /// Directed messages `src → dst` (both directions of every edge).
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub degree: Vec<usize>,
    pub graph_of_node: Vec<usize>,
    pub ranges: Vec<(usize, usize)>,
}

impl GraphBatch {
    pub fn new(sizes: &[usize], edges: &[&[[usize; 2]]]) -> Result<Self> {
        let mut ranges = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &s in sizes {
            if s == 0 {
                return Err(Error::invalid("graph without nodes"));
            }
            ranges.push((off, off + s));
            off += s;
        }
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (g, es) in edges.iter().enumerate() {
            let (start, end) = ranges[g];
            for e in es.iter() {
                let (a, b) = (e[0] + start, e[1] + start);
                if a >= end || b >= end {
                    return Err(Error::invalid(format!("edge {e:?} out of range for graph {g} with {} nodes", end - start)));
                }
                if a == b {
                    continue;
                }
                src.extend([a, b]);
                dst.extend([b, a]);
            }
        }
        let mut degree = vec![0; off];
        for &d in &dst {
            degree[d] += 1;
        }
        let graph_of_node = ranges.iter().enumerate().flat_map(|(g, &(s, e))| std::iter::repeat_n(g, e - s)).collect();
        Ok(GraphBatch { num_nodes: off, src, dst, degree, graph_of_node, ranges })
    }
}

/// Mean `log(d + 1)` over every node of `graphs`; 1 when no node has edges.
pub fn mean_log_degree<T: Float>(graphs: &[&GraphData<T>]) -> Result<f64> {
    let sizes: Vec<usize> = graphs.iter().map(|g| g.num_nodes()).collect();
    let edges: Vec<&[[usize; 2]]> = graphs.iter().map(|g| g.edges.as_slice()).collect();
    let b = GraphBatch::new(&sizes, &edges)?;
    let total: f64 = b.degree.iter().map(|&d| (d as f64 + 1.0).ln()).sum();
    let delta = total / b.num_nodes.max(1) as f64;
    Ok(if delta > 0.0 { delta } else { 1.0 })
}

/// Degree scalers `(identity, amplification, attenuation)` for degree `d`;
/// all zero for isolated nodes.
pub fn scalers(d: usize, delta: f64) -> [f64; 3] {
    if d == 0 {
        return [0.0; 3];
    }
    let l = (d as f64 + 1.0).ln();
    [1.0, l / delta, delta / l]
}

/// Mean, min, max and std of incoming messages, each under three degree
/// scalers, concatenated (`[scaler][aggregator]` order) and mapped by `lin`.
pub fn pna_conv<T: Float>(
    tape: &mut Tape<T>,
    p: &Bound,
    x: Var,
    batch: &GraphBatch,
    delta: f64,
    lin: &Linear,
) -> Result<Var> {
    let n = batch.num_nodes;
    let d = tape.shape(x)[1];
    if lin.in_dim != 12 * d {
        return Err(Error::shape("pna_conv", format!("linear expects {} inputs, features give {}", lin.in_dim, 12 * d)));
    }
    let inv_deg: Vec<T> = batch.degree.iter().map(|&k| if k == 0 { T::zero() } else { T::of(1.0 / k as f64) }).collect();
    let inv_deg = tape.constant(Tensor::new(&[n, 1], inv_deg)?);

    let msgs = tape.gather(x, &batch.src)?;
    let sum = tape.segment_sum(msgs, &batch.dst, n)?;
    let mean = tape.mul(sum, inv_deg)?;
    let min = tape.segment_extreme(msgs, &batch.dst, n, Extreme::Min)?;
    let max = tape.segment_extreme(msgs, &batch.dst, n, Extreme::Max)?;
    let mean_at_edge = tape.gather(mean, &batch.dst)?;
    let centred = tape.sub(msgs, mean_at_edge)?;
    let sq = tape.mul(centred, centred)?;
    let sq_sum = tape.segment_sum(sq, &batch.dst, n)?;
    let var = tape.mul(sq_sum, inv_deg)?;
    let var = tape.add_scalar(var, STD_EPS);
    let std = tape.sqrt(var)?;
    let std = tape.add_scalar(std, -STD_EPS.sqrt());
    let aggs = tape.concat(&[mean, min, max, std], 1)?;

    let mut parts = Vec::with_capacity(3);
    for k in 0..3 {
        let col: Vec<T> = batch.degree.iter().map(|&deg| T::of(scalers(deg, delta)[k])).collect();
        let s = tape.constant(Tensor::new(&[n, 1], col)?);
        parts.push(tape.mul(aggs, s)?);
    }
    let h = tape.concat(&parts, 1)?;
    lin.forward(tape, p, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gnn {
    pub cfg: GnnConfig,
    pub delta: f64,
    pub input_dim: usize,
    pub input: Linear,
    pub input_bn: BatchNorm,
    pub stage1: Linear,
    pub convs: Vec<Linear>,
    /// Head `l - 1` reads stage `l`.
    pub heads: Vec<Linear>,
}

impl Gnn {
    pub fn new<T: Float>(cfg: &GnnConfig, input_dim: usize, delta: f64, params: &mut Params<T>, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::invalid(format!("delta {delta} must be positive")));
        }
        let mut s = rng.stream("gnn.init");
        let dims = &cfg.dims;
        let c = cfg.num_classes;
        let input = Linear::new(params, "gnn.input", input_dim, dims[0], Init::UniformFanIn, &mut s);
        let input_bn = BatchNorm::new(params, "gnn.input_bn", dims[0]);
        let stage1 = Linear::new(params, "gnn.stage1", dims[0], dims[0], Init::UniformFanIn, &mut s);
        let mut convs = Vec::new();
        let mut heads = vec![Linear::new(params, "gnn.head1", dims[0], c, Init::UniformFanIn, &mut s)];
        for l in 2..=dims.len() {
            let (i, o) = (dims[l - 2], dims[l - 1]);
            convs.push(Linear::new(params, &format!("gnn.conv{l}"), 12 * i, o, Init::UniformFanIn, &mut s));
            heads.push(Linear::new(params, &format!("gnn.head{l}"), o, c, Init::UniformFanIn, &mut s));
        }
        let mut cfg = cfg.clone();
        cfg.delta = Some(delta);
        Ok(Gnn { cfg, delta, input_dim, input, input_bn, stage1, convs, heads })
    }

    fn pool<T: Float>(&self, tape: &mut Tape<T>, h: Var, batch: &GraphBatch) -> Result<Var> {
        let g = batch.ranges.len();
        match self.cfg.pooling {
            GraphPooling::Mean => {
                let s = tape.segment_sum(h, &batch.graph_of_node, g)?;
                let inv: Vec<T> = batch.ranges.iter().map(|&(a, b)| T::of(1.0 / (b - a) as f64)).collect();
                let inv = tape.constant(Tensor::new(&[g, 1], inv)?);
                tape.mul(s, inv)
            }
            GraphPooling::Max => tape.segment_extreme(h, &batch.graph_of_node, g, Extreme::Max),
        }
    }

    /// Forward from a recorded node-feature matrix (used by attribution).
    pub fn forward_batch<T: Float>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        batch: &GraphBatch,
        ctx: &mut Ctx<T>,
    ) -> Result<Output> {
        let w = tape.shape(x).get(1).copied().unwrap_or(0);
        if w != self.input_dim {
            return Err(Error::shape("gnn", format!("node features have width {w}, model expects {}", self.input_dim)));
        }
        let h = self.input.forward(tape, p, x)?;
        let h = self.input_bn.forward(tape, p, h, ctx)?;
        let h = tape.relu(h);
        let mut h = self.stage1.forward(tape, p, h)?;
        let node_logits = self.heads[0].forward(tape, p, h)?;
        let mut logits = self.pool(tape, node_logits, batch)?;
        let mut last = h;
        for (conv, head) in self.convs.iter().zip(&self.heads[1..]) {
            let z = pna_conv(tape, p, h, batch, self.delta, conv)?;
            let a = tape.relu(z);
            last = a;
            h = dropout(tape, a, self.cfg.dropout_p, ctx)?;
            let nl = head.forward(tape, p, h)?;
            let pooled = self.pool(tape, nl, batch)?;
            logits = tape.add(logits, pooled)?;
        }
        let intermediate = self.pool(tape, last, batch)?;
        Ok(Output { logits, intermediate })
    }

    pub fn batch_for<T: Float>(graphs: &GraphSet<T>, rows: &[usize]) -> Result<(Tensor<T>, GraphBatch)> {
        let sel: Vec<&GraphData<T>> = rows.iter().map(|&r| &graphs[r]).collect();
        let sizes: Vec<usize> = sel.iter().map(|g| g.num_nodes()).collect();
        let edges: Vec<&[[usize; 2]]> = sel.iter().map(|g| g.edges.as_slice()).collect();
        let batch = GraphBatch::new(&sizes, &edges)?;
        let w = sel.first().map_or(0, |g| g.x.cols());
        let mut data = Vec::with_capacity(batch.num_nodes * w);
        for g in &sel {
            if g.x.cols() != w {
                return Err(Error::shape("gnn", "graphs in a batch differ in feature width"));
            }
            data.extend_from_slice(g.x.data());
        }
        Ok((Tensor::new(&[batch.num_nodes, w], data)?, batch))
    }
}

impl Classifier for Gnn {
    type Input<T: Float> = GraphSet<T>;

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: &GraphSet<T>,
        rows: &[usize],
        ctx: &mut Ctx<T>,
    ) -> Result<Output> {
        let (x, batch) = Self::batch_for(input, rows)?;
        let x = tape.constant(x);
        self.forward_batch(tape, p, x, &batch, ctx)
    }
}

/// A trained graph classifier with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnModel {
    pub gnn: Gnn,
    pub params: Params<f32>,
}

impl GnnModel {
    /// Computes δ from the training graphs, initialises from `train.seed` and
    /// trains all stages jointly.
    pub fn fit(
        graphs: &GraphSet<f32>,
        labels: &[usize],
        train_rows: &[usize],
        val_rows: &[usize],
        cfg: &GnnConfig,
        train: &TrainConfig,
    ) -> Result<(Self, TrainReport)> {
        let present: std::collections::BTreeSet<usize> = train_rows.iter().map(|&r| labels[r]).collect();
        if present.len() < 2 {
            return Err(Error::invalid("GNN training needs at least two classes"));
        }
        let sel: Vec<&GraphData<f32>> = train_rows.iter().map(|&r| &graphs[r]).collect();
        let delta = mean_log_degree(&sel)?;
        let input_dim = sel.first().map_or(0, |g| g.x.cols());
        let mut params = Params::new();
        let gnn = Gnn::new(cfg, input_dim, delta, &mut params, &Rng::new(train.seed))?;
        let report = train_classifier(&gnn, &mut params, graphs, labels, train_rows, val_rows, train)?;
        Ok((GnnModel { gnn, params }, report))
    }

    pub fn checkpoint(&self, metadata: RunMetadata) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "gnn".into(),
            config: serde_json::json!({ "gnn": self.gnn.cfg, "input_dim": self.gnn.input_dim }),
            metadata,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "gnn" {
            return Err(Error::invalid(format!("checkpoint holds a '{}' model, expected gnn", ck.kind)));
        }
        let cfg: GnnConfig = serde_json::from_value(ck.config["gnn"].clone())?;
        let input_dim = ck.config["input_dim"].as_u64().ok_or_else(|| Error::invalid("checkpoint lacks input_dim"))? as usize;
        let delta = cfg.delta.ok_or_else(|| Error::invalid("GNN checkpoint lacks delta"))?;
        let mut params = Params::new();
        let gnn = Gnn::new(&cfg, input_dim, delta, &mut params, &Rng::new(0))?;
        ck.restore_into(&mut params)?;
        Ok(GnnModel { gnn, params })
    }
}
