use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tabular::imbalance::{self, class_counts, ImbalanceStrategy};

use super::layers::Ctx;
use super::loss::softmax_cross_entropy;
use super::model::Classifier;
use super::optim::{Adam, AdamConfig};
use super::params::Params;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Explicit per-class loss multipliers; overrides the imbalance strategy's
    /// derived weights.
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub imbalance: ImbalanceStrategy,
    /// Early-stopping patience on validation loss (only with validation rows).
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            epochs: 100,
            batch_size: 32,
            class_weights: None,
            seed: 0,
            imbalance: ImbalanceStrategy::None,
            patience: Some(20),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let lr = self.adam.lr;
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate {lr} must be finite and non-negative")));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != num_classes || w.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid(format!(
                    "class_weights must hold {num_classes} positive values, got {w:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_loss: f64,
}

/// Adam training of `params` on the samples at `train_rows`.
///
/// Deterministic given `cfg.seed`: batch order and dropout masks come from
/// named streams of that seed. With non-empty `val_rows` and a patience, the
/// parameters with the lowest validation loss are restored at the end.
pub fn train_classifier<M: Classifier>(
    model: &M,
    params: &mut Params<f32>,
    input: &M::Input<f32>,
    labels: &[usize],
    train_rows: &[usize],
    val_rows: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let c = model.num_classes();
    cfg.validate(c)?;
    if train_rows.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let train_labels: Vec<usize> = train_rows.iter().map(|&r| labels[r]).collect();
    let counts = class_counts(&train_labels, c)?;
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {missing} has no training samples")));
    }
    let weights = match (&cfg.class_weights, cfg.imbalance) {
        (Some(w), _) => Some(w.clone()),
        (None, ImbalanceStrategy::ClassWeights) => Some(imbalance::class_weights(&train_labels, c)?),
        _ => None,
    };
    let oversampled = match cfg.imbalance {
        ImbalanceStrategy::Oversample => Some(imbalance::oversample(&train_labels, c)?),
        _ => None,
    };

    let rng = Rng::new(cfg.seed);
    let mut order_stream = rng.stream("batches");
    let mut noise = Some(rng.stream("dropout"));
    let mut opt = Adam::new(cfg.adam, params);

    let mut report = TrainReport {
        loss_curve: Vec::with_capacity(cfg.epochs),
        val_curve: Vec::new(),
        epochs_run: 0,
        best_epoch: 0,
        final_loss: f64::NAN,
    };
    let early_stop = cfg.patience.filter(|_| !val_rows.is_empty());
    let mut best: Option<(f64, Params<f32>)> = None;

    for epoch in 0..cfg.epochs {
        let batches: Vec<Vec<usize>> = match cfg.imbalance {
            ImbalanceStrategy::StratifiedBatches => {
                imbalance::stratified_batches(&train_labels, c, cfg.batch_size, &mut order_stream)?
                    .into_iter()
                    .map(|b| b.into_iter().map(|i| train_rows[i]).collect())
                    .collect()
            }
            _ => {
                let mut order: Vec<usize> = match &oversampled {
                    Some(plan) => plan.iter().map(|&i| train_rows[i]).collect(),
                    None => train_rows.to_vec(),
                };
                order_stream.shuffle(&mut order);
                order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
            }
        };

        let (mut total, mut seen) = (0.0, 0usize);
        for (bi, rows) in batches.iter().enumerate() {
            let batch_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let mut ctx = Ctx::train(noise.take().expect("noise stream"));
            let out = model.forward(&mut tape, &bound, input, rows, &mut ctx)?;
            let loss = softmax_cross_entropy(&mut tape, out.logits, &batch_labels, weights.as_deref())?;
            let value = f64::from(tape.value(loss).item());
            if !value.is_finite() {
                let norms = params
                    .norms()
                    .into_iter()
                    .map(|(n, v)| format!("{n}={v:.4e}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::Diverged(format!(
                    "loss {value} at epoch {epoch}, batch {bi}; parameter norms: {norms}"
                )));
            }
            let grads = tape.backward(loss)?;
            opt.step(params, &bound, &grads);
            let updates = std::mem::take(&mut ctx.updates);
            for (id, t) in updates {
                params.set(id, t);
            }
            noise = ctx.into_noise();
            total += value * rows.len() as f64;
            seen += rows.len();
        }
        let epoch_loss = total / seen as f64;
        report.loss_curve.push(epoch_loss);
        report.final_loss = epoch_loss;
        report.epochs_run = epoch + 1;

        if let Some(patience) = early_stop {
            let v = evaluate_loss(model, params, input, labels, val_rows, weights.as_deref())?;
            report.val_curve.push(v);
            let improved = best.as_ref().is_none_or(|(b, _)| v < *b);
            if improved {
                best = Some((v, params.clone()));
                report.best_epoch = epoch;
            } else if epoch - report.best_epoch >= patience {
                break;
            }
        } else {
            report.best_epoch = epoch;
        }
    }
    if let Some((_, p)) = best {
        *params = p;
    }
    Ok(report)
}

/// Evaluation-mode weighted cross-entropy over `rows`.
pub fn evaluate_loss<M: Classifier>(
    model: &M,
    params: &Params<f32>,
    input: &M::Input<f32>,
    labels: &[usize],
    rows: &[usize],
    weights: Option<&[f64]>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, input, rows, &mut Ctx::eval())?;
    let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    let loss = softmax_cross_entropy(&mut tape, out.logits, &y, weights)?;
    Ok(f64::from(tape.value(loss).item()))
}
