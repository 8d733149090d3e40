//! Patient-level pooling and multimodal fusion.

pub mod logitset;
pub mod pooling;
pub mod strategies;

pub use logitset::{softmax, LogitSet, ModalityOutput, PatientRecord};
pub use pooling::{pool_intermediate, pool_outputs, IntermediatePooling, OutputPooling, PooledPrediction};
pub use strategies::{
    fuse_max_predictor, fuse_simple_ensemble, fuse_weighted_ensemble, modality_contribution, simple_logit_ensemble,
    AnnealConfig, FuseConfig, Fused, FusionModel, FusionState, Strategy, WeightedLogits,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Complete, aligned modality outputs for a list of patients. Modality
/// columns follow the canonical order given at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionData {
    pub patients: Vec<String>,
    pub labels: Vec<Option<usize>>,
    pub modalities: Vec<String>,
    pub num_classes: usize,
    /// `[N, M·C]`, modality-major within a row.
    pub logits: Tensor<f64>,
    pub probs: Tensor<f64>,
    /// One `[N, d_m]` matrix per modality; `d_m = 0` when absent.
    pub intermediates: Vec<Tensor<f64>>,
}

impl FusionData {
    /// Fails on the first patient (file order) lacking one of `modalities`.
    pub fn from_logit_set(set: &LogitSet, modalities: &[String]) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::invalid("fusion needs at least one modality"));
        }
        set.validate()?;
        let c = set.num_classes().ok_or_else(|| Error::invalid("empty logit set"))?;
        let n = set.records.len();
        let m = modalities.len();
        let mut widths = vec![None::<usize>; m];
        let mut logits = Vec::with_capacity(n * m * c);
        let mut probs = Vec::with_capacity(n * m * c);
        let mut inter: Vec<Vec<f64>> = vec![Vec::new(); m];
        for r in &set.records {
            for (k, name) in modalities.iter().enumerate() {
                let o = r.modalities.get(name).ok_or_else(|| Error::MissingModality {
                    patient: r.patient.clone(),
                    modality: name.clone(),
                })?;
                logits.extend_from_slice(&o.logits);
                probs.extend_from_slice(&o.probs);
                let w = *widths[k].get_or_insert(o.intermediate.len());
                if w != o.intermediate.len() {
                    return Err(Error::shape(
                        "fusion data",
                        format!("patient {} modality {name}: intermediate width {} vs {w}", r.patient, o.intermediate.len()),
                    ));
                }
                inter[k].extend_from_slice(&o.intermediate);
            }
        }
        let intermediates = inter
            .into_iter()
            .zip(&widths)
            .map(|(v, w)| Tensor::new(&[n, w.unwrap_or(0)], v))
            .collect::<Result<_>>()?;
        Ok(FusionData {
            patients: set.records.iter().map(|r| r.patient.clone()).collect(),
            labels: set.records.iter().map(|r| r.label).collect(),
            modalities: modalities.to_vec(),
            num_classes: c,
            logits: Tensor::new(&[n, m * c], logits)?,
            probs: Tensor::new(&[n, m * c], probs)?,
            intermediates,
        })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Probability vector of modality `k` for patient row `i`.
    pub fn modality_probs(&self, i: usize, k: usize) -> &[f64] {
        let c = self.num_classes;
        &self.probs.row(i)[k * c..(k + 1) * c]
    }

    pub fn modality_logits(&self, i: usize, k: usize) -> &[f64] {
        let c = self.num_classes;
        &self.logits.row(i)[k * c..(k + 1) * c]
    }

    /// Labels of all patients, failing on the first unlabeled one.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .zip(&self.patients)
            .map(|(l, p)| l.ok_or_else(|| Error::invalid(format!("patient {p} has no label"))))
            .collect()
    }

    /// Concatenated intermediates `[N, Σ d_m]`.
    pub fn concat_intermediates(&self) -> Result<Tensor<f64>> {
        if let Some(k) = self.intermediates.iter().position(|t| t.cols() == 0) {
            return Err(Error::invalid(format!("modality {} has no intermediate vectors", self.modalities[k])));
        }
        let n = self.len();
        let width: usize = self.intermediates.iter().map(|t| t.cols()).sum();
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            for t in &self.intermediates {
                out.extend_from_slice(t.row(i));
            }
        }
        Tensor::new(&[n, width], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_modality_names_patient_and_modality() {
        let mut set = LogitSet::default();
        for (p, mods) in [("a", vec!["cnv", "ehr"]), ("b", vec!["cnv"])] {
            set.records.push(PatientRecord {
                patient: p.into(),
                label: Some(0),
                modalities: mods
                    .into_iter()
                    .map(|m| (m.to_string(), ModalityOutput::from_logits(vec![0.0, 1.0], vec![])))
                    .collect(),
            });
        }
        let err = FusionData::from_logit_set(&set, &["cnv".into(), "ehr".into()]).unwrap_err();
        match err {
            Error::MissingModality { patient, modality } => assert_eq!((patient.as_str(), modality.as_str()), ("b", "ehr")),
            e => panic!("{e}"),
        }
    }
}
