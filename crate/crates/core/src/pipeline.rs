//! Cross-validated training of single-modality models and fusion strategies
//! on shared folds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::eval::CvSplit;
use crate::fusion::{FuseConfig, FusionData, FusionModel, LogitSet, ModalityOutput, PatientRecord, Strategy};
use crate::gnn::{GnnConfig, GnnModel, GraphSet};
use crate::nn::{
    predict, Checkpoint, FeedForward, MlpConfig, Params, RunMetadata, SnnConfig, TrainConfig, TrainReport,
    train_classifier,
};
use crate::rng::Rng;
use crate::tabular::{Encoder, TabularMatrix};

/// Model-ready data of one modality, rows in patient order.
#[derive(Clone, Debug)]
pub enum ModalityInput {
    Dense { x: Tensor<f32>, names: Vec<String> },
    /// Complete (imputed) table; the encoder is fitted per training fold.
    Tabular(TabularMatrix),
    Graphs(GraphSet<f32>),
}

impl ModalityInput {
    pub fn len(&self) -> usize {
        match self {
            ModalityInput::Dense { x, .. } => x.rows(),
            ModalityInput::Tabular(m) => m.rows(),
            ModalityInput::Graphs(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Mlp(MlpConfig),
    Snn(SnnConfig),
    Gnn(GnnConfig),
}

impl ModelSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Mlp(c) => c.num_classes,
            ModelSpec::Snn(c) => c.num_classes,
            ModelSpec::Gnn(c) => c.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModalityModel {
    Dense {
        net: FeedForward,
        params: Params<f32>,
        spec: ModelSpec,
        encoder: Option<Encoder>,
    },
    Graph(GnnModel),
}

fn dense_features(input: &ModalityInput, encoder: Option<&Encoder>) -> Result<Tensor<f32>> {
    match (input, encoder) {
        (ModalityInput::Dense { x, .. }, None) => Ok(x.clone()),
        (ModalityInput::Tabular(m), Some(e)) => e.transform(m),
        _ => Err(Error::invalid("model and input kinds differ")),
    }
}

impl ModalityModel {
    pub fn fit(
        spec: &ModelSpec,
        input: &ModalityInput,
        labels: &[usize],
        train_rows: &[usize],
        train: &TrainConfig,
    ) -> Result<(Self, TrainReport)> {
        let init = Rng::new(train.seed);
        match (spec, input) {
            (ModelSpec::Gnn(cfg), ModalityInput::Graphs(g)) => {
                let mut t = train.clone();
                t.adam.lr = cfg.lr;
                let (m, r) = GnnModel::fit(g, labels, train_rows, &[], cfg, &t)?;
                Ok((ModalityModel::Graph(m), r))
            }
            (ModelSpec::Gnn(_), _) => Err(Error::invalid("GNN models need graph input")),
            (_, ModalityInput::Graphs(_)) => Err(Error::invalid("graph input needs a GNN model")),
            (ModelSpec::Mlp(_) | ModelSpec::Snn(_), _) => {
                let encoder = match input {
                    ModalityInput::Tabular(m) => Some(Encoder::fit(m, train_rows)?),
                    _ => None,
                };
                let x = dense_features(input, encoder.as_ref())?;
                let mut params = Params::new();
                let mut s = init.stream("init");
                let net = match spec {
                    ModelSpec::Mlp(c) => FeedForward::mlp(c, x.cols(), &mut params, &mut s)?,
                    ModelSpec::Snn(c) => FeedForward::snn(c, x.cols(), &mut params, &mut s)?,
                    ModelSpec::Gnn(_) => unreachable!(),
                };
                let report = train_classifier(&net, &mut params, &x, labels, train_rows, &[], train)?;
                Ok((
                    ModalityModel::Dense {
                        net,
                        params,
                        spec: spec.clone(),
                        encoder,
                    },
                    report,
                ))
            }
        }
    }

    /// Evaluation-mode `(logits, intermediate)` for `rows`.
    pub fn predict(&self, input: &ModalityInput, rows: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        match (self, input) {
            (ModalityModel::Graph(m), ModalityInput::Graphs(g)) => predict(&m.gnn, &m.params, g, rows),
            (ModalityModel::Graph(_), _) => Err(Error::invalid("GNN models need graph input")),
            (ModalityModel::Dense { net, params, encoder, .. }, _) => {
                let x = dense_features(input, encoder.as_ref())?;
                predict(net, params, &x, rows)
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModalityModel::Graph(m) => m.gnn.cfg.num_classes,
            ModalityModel::Dense { net, .. } => net.num_classes,
        }
    }

    pub fn checkpoint(&self, metadata: RunMetadata) -> Result<Checkpoint> {
        match self {
            ModalityModel::Graph(m) => m.checkpoint(metadata),
            ModalityModel::Dense {
                net,
                params,
                spec,
                encoder,
            } => Ok(Checkpoint {
                kind: "dense".into(),
                config: serde_json::json!({ "model": spec, "input_dim": net.input_dim, "encoder": encoder }),
                metadata,
                params: params.clone(),
            }),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.kind.as_str() {
            "gnn" => Ok(ModalityModel::Graph(GnnModel::from_checkpoint(ck)?)),
            "dense" => {
                let spec: ModelSpec = serde_json::from_value(ck.config["model"].clone())?;
                let input_dim: usize = serde_json::from_value(ck.config["input_dim"].clone())?;
                let encoder: Option<Encoder> = serde_json::from_value(ck.config["encoder"].clone())?;
                let mut params = Params::new();
                let mut s = Rng::new(0).stream("init");
                let net = match &spec {
                    ModelSpec::Mlp(c) => FeedForward::mlp(c, input_dim, &mut params, &mut s)?,
                    ModelSpec::Snn(c) => FeedForward::snn(c, input_dim, &mut params, &mut s)?,
                    ModelSpec::Gnn(_) => return Err(Error::invalid("dense checkpoint with a GNN spec")),
                };
                ck.restore_into(&mut params)?;
                Ok(ModalityModel::Dense {
                    net,
                    params,
                    spec,
                    encoder,
                })
            }
            other => Err(Error::invalid(format!("checkpoint holds a '{other}' model, expected a modality model"))),
        }
    }
}

/// Seed for one named unit of work (a fold, a modality) under `seed`.
pub fn unit_seed(seed: u64, name: &str) -> u64 {
    Rng::new(seed).derive(name).seed()
}

/// Test fold of every row.
pub fn fold_of(split: &CvSplit, n: usize) -> Vec<usize> {
    let mut out = vec![usize::MAX; n];
    for (k, f) in split.folds.iter().enumerate() {
        for &i in &f.test {
            out[i] = k;
        }
    }
    out
}

pub struct ModalityCv {
    /// Out-of-fold outputs, one record per patient.
    pub oof: LogitSet,
    pub fold_models: Vec<(ModalityModel, TrainReport)>,
}

/// Trains one model per fold (folds in parallel) and collects out-of-fold
/// logits and intermediates.
pub fn cross_validate_modality(
    modality: &str,
    patients: &[String],
    labels: &[usize],
    input: &ModalityInput,
    spec: &ModelSpec,
    train: &TrainConfig,
    split: &CvSplit,
) -> Result<ModalityCv> {
    let n = patients.len();
    if input.len() != n || labels.len() != n {
        return Err(Error::shape(
            "cross_validate",
            format!("{n} patients, {} labels, {} inputs", labels.len(), input.len()),
        ));
    }
    let fits: Vec<Result<(ModalityModel, TrainReport, Tensor<f32>, Tensor<f32>)>> = split
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            let mut t = train.clone();
            t.seed = unit_seed(train.seed, &format!("{modality}/fold{k}"));
            let (model, report) = ModalityModel::fit(spec, input, labels, &fold.train, &t)?;
            let (logits, inter) = model.predict(input, &fold.test)?;
            Ok((model, report, logits, inter))
        })
        .collect();
    let mut outputs: Vec<Option<ModalityOutput>> = vec![None; n];
    let mut fold_models = Vec::with_capacity(fits.len());
    for (fold, fit) in split.folds.iter().zip(fits) {
        let (model, report, logits, inter) = fit?;
        for (r, &i) in fold.test.iter().enumerate() {
            let l: Vec<f64> = logits.row(r).iter().map(|&v| f64::from(v)).collect();
            let h: Vec<f64> = inter.row(r).iter().map(|&v| f64::from(v)).collect();
            outputs[i] = Some(ModalityOutput::from_logits(l, h));
        }
        fold_models.push((model, report));
    }
    let records = outputs
        .into_iter()
        .enumerate()
        .map(|(i, o)| {
            let o = o.ok_or_else(|| Error::invalid(format!("patient {} is in no test fold", patients[i])))?;
            Ok(PatientRecord {
                patient: patients[i].clone(),
                label: Some(labels[i]),
                modalities: [(modality.to_string(), o)].into(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ModalityCv {
        oof: LogitSet { records },
        fold_models,
    })
}

pub struct FusionCv {
    pub probs: Vec<Vec<f64>>,
    pub logits: Option<Vec<Vec<f64>>>,
    pub fold_models: Vec<FusionModel>,
}

/// Fits the strategy on each fold's training rows and predicts its test rows.
pub fn cross_validate_fusion(strategy: Strategy, data: &FusionData, split: &CvSplit, cfg: &FuseConfig) -> Result<FusionCv> {
    let n = data.len();
    let fits: Vec<Result<(FusionModel, crate::fusion::Fused)>> = split
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            let mut c = cfg.clone();
            c.train.seed = unit_seed(cfg.train.seed, &format!("fusion/{}/fold{k}", strategy.name()));
            let (model, _) = FusionModel::fit(strategy, data, &fold.train, &c)?;
            let fused = model.predict(data)?;
            Ok((model, fused))
        })
        .collect();
    let mut probs = vec![Vec::new(); n];
    let mut logits: Option<Vec<Vec<f64>>> = None;
    let mut fold_models = Vec::with_capacity(fits.len());
    for (fold, fit) in split.folds.iter().zip(fits) {
        let (model, fused) = fit?;
        for &i in &fold.test {
            probs[i] = fused.probs[i].clone();
            if let Some(l) = &fused.logits {
                logits.get_or_insert_with(|| vec![Vec::new(); n])[i] = l[i].clone();
            }
        }
        fold_models.push(model);
    }
    Ok(FusionCv {
        probs,
        logits,
        fold_models,
    })
}
