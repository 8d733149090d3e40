//! Fusion strategies: weighted logits (with and without bias), simple
//! ensemble, annealed weighted ensemble, max-model predictor, meta-learner,
//! intermediate fusion and the token transformer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{
    predict, AdamConfig, Bound, Checkpoint, Classifier, Ctx, FeedForward, MlpConfig, Output, ParamId, Params,
    RunMetadata, TrainConfig, TrainReport, Transformer, TransformerConfig, train_classifier,
};
use crate::rng::Rng;

use super::{softmax, FusionData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Wl,
    Wlb,
    Se,
    We,
    Mp,
    Ml,
    If,
    Tf,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Wl,
        Strategy::Wlb,
        Strategy::Se,
        Strategy::We,
        Strategy::Mp,
        Strategy::Ml,
        Strategy::If,
        Strategy::Tf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Wl => "wl",
            Strategy::Wlb => "wlb",
            Strategy::Se => "se",
            Strategy::We => "we",
            Strategy::Mp => "mp",
            Strategy::Ml => "ml",
            Strategy::If => "if",
            Strategy::Tf => "tf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion strategy '{s}' (wl, wlb, se, we, mp, ml, if, tf)")))
    }

    /// Whether fitting uses labels.
    pub fn is_trained(self) -> bool {
        !matches!(self, Strategy::Se | Strategy::Mp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealConfig {
    pub t0: f64,
    pub cooling: f64,
    pub iterations: usize,
    /// Proposals are drawn from `Dirichlet(concentration·λ + floor)`.
    pub concentration: f64,
    pub floor: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            t0: 1.0,
            cooling: 0.95,
            iterations: 2000,
            concentration: 100.0,
            floor: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FuseConfig {
    pub train: TrainConfig,
    pub anneal: AnnealConfig,
    pub meta_hidden: Vec<usize>,
    pub intermediate_hidden: Vec<usize>,
    /// `token_widths` and `num_classes` are filled in from the data.
    pub transformer: TransformerConfig,
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            train: TrainConfig {
                adam: AdamConfig {
                    lr: 1e-2,
                    ..AdamConfig::default()
                },
                epochs: 100,
                batch_size: 32,
                patience: None,
                ..TrainConfig::default()
            },
            anneal: AnnealConfig::default(),
            meta_hidden: vec![32],
            intermediate_hidden: vec![64],
            transformer: TransformerConfig::default(),
        }
    }
}

/// Per-class weighted sum of modality logits, `o_j = Σ_i w_ij o_ij + b_j`.
/// The bias is a frozen buffer in the no-bias variant.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedLogits {
    pub modalities: usize,
    pub classes: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl WeightedLogits {
    pub fn new<T: Float>(modalities: usize, classes: usize, with_bias: bool, params: &mut Params<T>) -> Self {
        let weight = params.add("wl.weight", Tensor::full(&[modalities, classes], T::of(1.0 / modalities as f64)));
        let bias = if with_bias {
            params.add("wl.bias", Tensor::zeros(&[classes]))
        } else {
            params.add_buffer("wl.bias", Tensor::zeros(&[classes]))
        };
        WeightedLogits {
            modalities,
            classes,
            weight,
            bias,
        }
    }
}

impl Classifier for WeightedLogits {
    /// `[N, M·C]` stacked modality logits.
    type Input<T: Float> = Tensor<T>;

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: &Tensor<T>,
        rows: &[usize],
        _ctx: &mut Ctx<T>,
    ) -> Result<Output> {
        let (m, c) = (self.modalities, self.classes);
        if input.rank() != 2 || input.cols() != m * c {
            return Err(Error::shape("weighted_logits", format!("input {:?}, expected [N, {}]", input.shape(), m * c)));
        }
        let x = tape.constant(input.select_rows(rows).reshape(&[rows.len(), m, c])?);
        let weighted = tape.mul(x, p.var(self.weight))?;
        let summed = tape.sum(weighted, Some(1))?;
        let summed = tape.reshape(summed, &[rows.len(), c])?;
        let logits = tape.add(summed, p.var(self.bias))?;
        Ok(Output {
            logits,
            intermediate: logits,
        })
    }
}

/// Fused outputs for each patient row.
#[derive(Clone, Debug, PartialEq)]
pub struct Fused {
    pub logits: Option<Vec<Vec<f64>>>,
    pub probs: Vec<Vec<f64>>,
}

impl Fused {
    fn from_logits(logits: Vec<Vec<f64>>) -> Self {
        let probs = logits.iter().map(|l| softmax(l)).collect();
        Fused {
            logits: Some(logits),
            probs,
        }
    }

    /// Arg-max class per row, lowest index on ties.
    pub fn classes(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|p| {
                let mut k = 0;
                for j in 1..p.len() {
                    if p[j] > p[k] {
                        k = j;
                    }
                }
                k
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusionState {
    /// Row-major `M×C` weights and a length-`C` bias.
    Weighted { weights: Vec<f64>, bias: Vec<f64> },
    Fixed,
    Ensemble { lambda: Vec<f64>, loss: f64 },
    Mlp { net: FeedForward, cfg: MlpConfig, input_dim: usize, params: Params<f32> },
    Transformer { net: Transformer, params: Params<f32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub strategy: Strategy,
    pub modalities: Vec<String>,
    pub num_classes: usize,
    pub state: FusionState,
    pub metadata: RunMetadata,
}

fn rows_f64(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| f64::from(v)).collect()).collect()
}

/// Arithmetic mean of the modality probability vectors.
pub fn fuse_simple_ensemble(data: &FusionData) -> Vec<Vec<f64>> {
    let (m, c) = (data.num_modalities(), data.num_classes);
    (0..data.len())
        .map(|i| {
            let mut p = vec![0.0; c];
            for k in 0..m {
                for (a, b) in p.iter_mut().zip(data.modality_probs(i, k)) {
                    *a += b;
                }
            }
            p.iter_mut().for_each(|v| *v /= m as f64);
            p
        })
        .collect()
}

/// Probability vector of the most confident modality; ties go to the
/// earlier modality.
pub fn fuse_max_predictor(data: &FusionData) -> Vec<Vec<f64>> {
    let peak = |p: &[f64]| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..data.len())
        .map(|i| {
            let mut best = 0;
            for k in 1..data.num_modalities() {
                if peak(data.modality_probs(i, k)) > peak(data.modality_probs(i, best)) {
                    best = k;
                }
            }
            data.modality_probs(i, best).to_vec()
        })
        .collect()
}

/// Logit mean, computed as the weighted sum with every weight `1/M`.
pub fn simple_logit_ensemble(data: &FusionData) -> Vec<Vec<f64>> {
    let m = data.num_modalities();
    let weights = vec![1.0 / m as f64; m * data.num_classes];
    weighted_logits_f64(data, &weights, &vec![0.0; data.num_classes])
}

fn weighted_logits_f64(data: &FusionData, weights: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    let (m, c) = (data.num_modalities(), data.num_classes);
    (0..data.len())
        .map(|i| {
            (0..c)
                .map(|j| {
                    let mut o = 0.0;
                    for k in 0..m {
                        o += weights[k * c + j] * data.modality_logits(i, k)[j];
                    }
                    o + bias[j]
                })
                .collect()
        })
        .collect()
}

fn ensemble_loss(data: &FusionData, labels: &[usize], rows: &[usize], lambda: &[f64]) -> f64 {
    let total: f64 = rows
        .iter()
        .map(|&i| {
            let y = labels[i];
            let p: f64 = lambda.iter().enumerate().map(|(k, l)| l * data.modality_probs(i, k)[y]).sum();
            -p.max(1e-12).ln()
        })
        .sum();
    total / rows.len() as f64
}

/// Simplex weights for `Σ λ_i p_i` by simulated annealing on the
/// cross-entropy over `rows`. Starts from uniform weights and returns the
/// best weights seen with their loss.
pub fn fuse_weighted_ensemble(
    data: &FusionData,
    labels: &[usize],
    rows: &[usize],
    cfg: &AnnealConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let m = data.num_modalities();
    if rows.is_empty() {
        return Err(Error::invalid("no rows to optimise ensemble weights on"));
    }
    if !(cfg.t0 > 0.0 && cfg.cooling > 0.0 && cfg.cooling < 1.0 && cfg.concentration > 0.0 && cfg.floor > 0.0) {
        return Err(Error::invalid(format!("invalid annealing schedule {cfg:?}")));
    }
    if m == 1 {
        let l = ensemble_loss(data, labels, rows, &[1.0]);
        return Ok((vec![1.0], l));
    }
    let mut s = Rng::new(seed).stream("anneal");
    let mut cur = vec![1.0 / m as f64; m];
    let mut cur_loss = ensemble_loss(data, labels, rows, &cur);
    let (mut best, mut best_loss) = (cur.clone(), cur_loss);
    let mut t = cfg.t0;
    for _ in 0..cfg.iterations {
        let alpha: Vec<f64> = cur.iter().map(|l| cfg.concentration * l + cfg.floor).collect();
        let cand = s.dirichlet(&alpha);
        let loss = ensemble_loss(data, labels, rows, &cand);
        let delta = loss - cur_loss;
        let u = s.uniform();
        if delta <= 0.0 || u < (-delta / t).exp() {
            cur = cand;
            cur_loss = loss;
            if cur_loss < best_loss {
                best = cur.clone();
                best_loss = cur_loss;
            }
        }
        t *= cfg.cooling;
    }
    Ok((best, best_loss))
}

/// Share of absolute weight mass per modality, in percent.
pub fn modality_contribution(model: &FusionModel) -> Result<Vec<f64>> {
    let FusionState::Weighted { weights, .. } = &model.state else {
        return Err(Error::invalid(format!(
            "modality contribution needs a weighted-logits model, got {}",
            model.strategy.name()
        )));
    };
    let c = model.num_classes;
    let per: Vec<f64> = weights.chunks(c).map(|r| r.iter().map(|w| w.abs()).sum()).collect();
    let total: f64 = per.iter().sum();
    if !(total > 0.0) {
        return Err(Error::domain("modality_contribution", "all fusion weights are zero"));
    }
    Ok(per.iter().map(|v| v / total * 100.0).collect())
}

fn metadata(seed: u64, report: &TrainReport) -> RunMetadata {
    RunMetadata {
        seed,
        epochs_run: report.epochs_run,
        final_loss: Some(report.final_loss).filter(|v| v.is_finite()),
    }
}

fn cast_rows(t: &Tensor<f64>) -> Tensor<f32> {
    t.cast()
}

impl FusionModel {
    /// Weighted-logits model at its initial point (`w = 1/M`, `b = 0`).
    pub fn weighted_logits_init(modalities: Vec<String>, num_classes: usize, with_bias: bool) -> Result<Self> {
        let m = modalities.len();
        if m == 0 || num_classes == 0 {
            return Err(Error::invalid("weighted logits need modalities and classes"));
        }
        Ok(FusionModel {
            strategy: if with_bias { Strategy::Wlb } else { Strategy::Wl },
            modalities,
            num_classes,
            state: FusionState::Weighted {
                weights: vec![1.0 / m as f64; m * num_classes],
                bias: vec![0.0; num_classes],
            },
            metadata: RunMetadata::default(),
        })
    }

    /// Fits `strategy` on the labelled patients at `rows`.
    pub fn fit(strategy: Strategy, data: &FusionData, rows: &[usize], cfg: &FuseConfig) -> Result<(Self, Option<TrainReport>)> {
        let (m, c) = (data.num_modalities(), data.num_classes);
        let base = |state| FusionModel {
            strategy,
            modalities: data.modalities.clone(),
            num_classes: c,
            state,
            metadata: RunMetadata {
                seed: cfg.train.seed,
                ..RunMetadata::default()
            },
        };
        if !strategy.is_trained() {
            return Ok((base(FusionState::Fixed), None));
        }
        if let Some(&r) = rows.iter().find(|&&r| data.labels[r].is_none()) {
            return Err(Error::invalid(format!("patient {} has no label", data.patients[r])));
        }
        // unlabeled rows outside `rows` are never read
        let labels: Vec<usize> = data.labels.iter().map(|l| l.unwrap_or(0)).collect();
        let seed = cfg.train.seed;
        let init = Rng::new(seed);
        match strategy {
            Strategy::Wl | Strategy::Wlb => {
                let mut params = Params::<f32>::new();
                let net = WeightedLogits::new(m, c, strategy == Strategy::Wlb, &mut params);
                let report = train_classifier(&net, &mut params, &cast_rows(&data.logits), &labels, rows, &[], &cfg.train)?;
                let weights = params.get(net.weight).to_f64_vec();
                let bias = params.get(net.bias).to_f64_vec();
                let mut model = base(FusionState::Weighted { weights, bias });
                model.metadata = metadata(seed, &report);
                Ok((model, Some(report)))
            }
            Strategy::We => {
                let (lambda, loss) = fuse_weighted_ensemble(data, &labels, rows, &cfg.anneal, seed)?;
                let mut model = base(FusionState::Ensemble { lambda, loss });
                model.metadata.final_loss = Some(loss);
                model.metadata.epochs_run = cfg.anneal.iterations;
                Ok((model, None))
            }
            Strategy::Ml | Strategy::If => {
                let (x, hidden) = if strategy == Strategy::Ml {
                    (cast_rows(&data.probs), &cfg.meta_hidden)
                } else {
                    (cast_rows(&data.concat_intermediates()?), &cfg.intermediate_hidden)
                };
                let mlp = MlpConfig {
                    layer_widths: hidden.clone(),
                    dropout_p: 0.0,
                    num_classes: c,
                };
                let mut params = Params::<f32>::new();
                let net = FeedForward::mlp(&mlp, x.cols(), &mut params, &mut init.stream("fusion-init"))?;
                let report = train_classifier(&net, &mut params, &x, &labels, rows, &[], &cfg.train)?;
                let mut model = base(FusionState::Mlp {
                    net,
                    cfg: mlp,
                    input_dim: x.cols(),
                    params,
                });
                model.metadata = metadata(seed, &report);
                Ok((model, Some(report)))
            }
            Strategy::Tf => {
                if let Some(k) = data.intermediates.iter().position(|t| t.cols() == 0) {
                    return Err(Error::invalid(format!("modality {} has no intermediate vectors", data.modalities[k])));
                }
                let tcfg = TransformerConfig {
                    token_widths: data.intermediates.iter().map(|t| t.cols()).collect(),
                    num_classes: c,
                    ..cfg.transformer.clone()
                };
                let mut params = Params::<f32>::new();
                let net = Transformer::new(&tcfg, &mut params, &mut init.stream("fusion-init"))?;
                let tokens: Vec<Tensor<f32>> = data.intermediates.iter().map(cast_rows).collect();
                let report = train_classifier(&net, &mut params, &tokens, &labels, rows, &[], &cfg.train)?;
                let mut model = base(FusionState::Transformer { net, params });
                model.metadata = metadata(seed, &report);
                Ok((model, Some(report)))
            }
            Strategy::Se | Strategy::Mp => unreachable!("untrained strategies return early"),
        }
    }

    /// Fused outputs for every patient of `data`.
    pub fn predict(&self, data: &FusionData) -> Result<Fused> {
        if data.modalities != self.modalities {
            return Err(Error::invalid(format!(
                "fusion model expects modalities {:?}, data has {:?}",
                self.modalities, data.modalities
            )));
        }
        if data.num_classes != self.num_classes {
            return Err(Error::shape("fusion", format!("{} classes vs model {}", data.num_classes, self.num_classes)));
        }
        let all: Vec<usize> = (0..data.len()).collect();
        Ok(match &self.state {
            FusionState::Weighted { weights, bias } => Fused::from_logits(weighted_logits_f64(data, weights, bias)),
            FusionState::Fixed => {
                let probs = match self.strategy {
                    Strategy::Mp => fuse_max_predictor(data),
                    _ => fuse_simple_ensemble(data),
                };
                Fused { logits: None, probs }
            }
            FusionState::Ensemble { lambda, .. } => {
                let c = self.num_classes;
                let probs = (0..data.len())
                    .map(|i| {
                        (0..c)
                            .map(|j| lambda.iter().enumerate().map(|(k, l)| l * data.modality_probs(i, k)[j]).sum())
                            .collect()
                    })
                    .collect();
                Fused { logits: None, probs }
            }
            FusionState::Mlp { net, params, .. } => {
                let x = if self.strategy == Strategy::Ml {
                    cast_rows(&data.probs)
                } else {
                    cast_rows(&data.concat_intermediates()?)
                };
                let (logits, _) = predict(net, params, &x, &all)?;
                Fused::from_logits(rows_f64(&logits))
            }
            FusionState::Transformer { net, params } => {
                let tokens: Vec<Tensor<f32>> = data.intermediates.iter().map(cast_rows).collect();
                let (logits, _) = predict(net, params, &tokens, &all)?;
                Fused::from_logits(rows_f64(&logits))
            }
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut config = serde_json::json!({
            "strategy": self.strategy,
            "modalities": self.modalities,
            "num_classes": self.num_classes,
        });
        let params = match &self.state {
            FusionState::Weighted { weights, bias } => {
                config["weights"] = serde_json::json!(weights);
                config["bias"] = serde_json::json!(bias);
                Params::new()
            }
            FusionState::Fixed => Params::new(),
            FusionState::Ensemble { lambda, loss } => {
                config["lambda"] = serde_json::json!(lambda);
                config["anneal_loss"] = serde_json::json!(loss);
                Params::new()
            }
            FusionState::Mlp {
                cfg, input_dim, params, ..
            } => {
                config["mlp"] = serde_json::json!(cfg);
                config["input_dim"] = serde_json::json!(input_dim);
                params.clone()
            }
            FusionState::Transformer { net, params } => {
                config["transformer"] = serde_json::json!(net.cfg);
                params.clone()
            }
        };
        Checkpoint {
            kind: "fusion".into(),
            config,
            metadata: self.metadata.clone(),
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "fusion" {
            return Err(Error::invalid(format!("checkpoint holds a '{}' model, expected fusion", ck.kind)));
        }
        let field = |name: &str| -> Result<serde_json::Value> {
            ck.config
                .get(name)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("fusion checkpoint lacks '{name}'")))
        };
        let strategy: Strategy = serde_json::from_value(field("strategy")?)?;
        let modalities: Vec<String> = serde_json::from_value(field("modalities")?)?;
        let num_classes: usize = serde_json::from_value(field("num_classes")?)?;
        let state = match strategy {
            Strategy::Wl | Strategy::Wlb => {
                let weights: Vec<f64> = serde_json::from_value(field("weights")?)?;
                let bias: Vec<f64> = serde_json::from_value(field("bias")?)?;
                if weights.len() != modalities.len() * num_classes || bias.len() != num_classes {
                    return Err(Error::shape("fusion checkpoint", "weight or bias length"));
                }
                if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("fusion checkpoint weights".into()));
                }
                FusionState::Weighted { weights, bias }
            }
            Strategy::Se | Strategy::Mp => FusionState::Fixed,
            Strategy::We => FusionState::Ensemble {
                lambda: serde_json::from_value(field("lambda")?)?,
                loss: serde_json::from_value(field("anneal_loss")?)?,
            },
            Strategy::Ml | Strategy::If => {
                let cfg: MlpConfig = serde_json::from_value(field("mlp")?)?;
                let input_dim: usize = serde_json::from_value(field("input_dim")?)?;
                let mut params = Params::new();
                let net = FeedForward::mlp(&cfg, input_dim, &mut params, &mut Rng::new(0).stream("fusion-init"))?;
                ck.restore_into(&mut params)?;
                FusionState::Mlp {
                    net,
                    cfg,
                    input_dim,
                    params,
                }
            }
            Strategy::Tf => {
                let cfg: TransformerConfig = serde_json::from_value(field("transformer")?)?;
                let mut params = Params::new();
                let net = Transformer::new(&cfg, &mut params, &mut Rng::new(0).stream("fusion-init"))?;
                ck.restore_into(&mut params)?;
                FusionState::Transformer { net, params }
            }
        };
        Ok(FusionModel {
            strategy,
            modalities,
            num_classes,
            state,
            metadata: ck.metadata.clone(),
        })
    }
}
