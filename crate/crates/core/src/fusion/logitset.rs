//! Per-patient modality outputs exchanged between training and fusion, stored
//! as JSON lines.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    #[serde(default)]
    pub intermediate: Vec<f64>,
}

impl ModalityOutput {
    pub fn from_logits(logits: Vec<f64>, intermediate: Vec<f64>) -> Self {
        let probs = softmax(&logits);
        ModalityOutput {
            logits,
            probs,
            intermediate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub modalities: BTreeMap<String, ModalityOutput>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogitSet {
    pub records: Vec<PatientRecord>,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl LogitSet {
    /// Checks the class count is shared and probabilities match the logits.
    pub fn validate(&self) -> Result<()> {
        let mut classes: Option<usize> = None;
        for r in &self.records {
            for (name, o) in &r.modalities {
                let c = *classes.get_or_insert(o.logits.len());
                if o.logits.len() != c || o.probs.len() != c || c == 0 {
                    return Err(Error::shape(
                        "logit set",
                        format!("patient {} modality {name}: {} logits, {} probs, expected {c}", r.patient, o.logits.len(), o.probs.len()),
                    ));
                }
                if o.logits.iter().chain(&o.probs).chain(&o.intermediate).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("logit set patient {} modality {name}", r.patient)));
                }
                let want = softmax(&o.logits);
                if want.iter().zip(&o.probs).any(|(a, b)| (a - b).abs() > 1e-6) {
                    return Err(Error::invalid(format!(
                        "patient {} modality {name}: probabilities differ from softmax(logits)",
                        r.patient
                    )));
                }
                if let Some(l) = r.label {
                    if l >= c {
                        return Err(Error::invalid(format!("patient {}: label {l} outside {c} classes", r.patient)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.records.iter().flat_map(|r| r.modalities.values()).map(|o| o.logits.len()).next()
    }

    /// Sorted union of modality names.
    pub fn modality_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.records.iter().flat_map(|r| r.modalities.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }

    /// Adds `other`'s modalities patient by patient. Patients are kept in
    /// first-seen order; a modality present in both sets is an error.
    pub fn merge(&mut self, other: LogitSet) -> Result<()> {
        let mut index: BTreeMap<String, usize> =
            self.records.iter().enumerate().map(|(i, r)| (r.patient.clone(), i)).collect();
        for rec in other.records {
            match index.get(&rec.patient) {
                Some(&i) => {
                    let mine = &mut self.records[i];
                    match (mine.label, rec.label) {
                        (Some(a), Some(b)) if a != b => {
                            return Err(Error::invalid(format!("patient {}: conflicting labels {a} and {b}", rec.patient)))
                        }
                        (None, l) => mine.label = l,
                        _ => {}
                    }
                    for (name, o) in rec.modalities {
                        if mine.modalities.insert(name.clone(), o).is_some() {
                            return Err(Error::invalid(format!("patient {}: modality {name} given twice", rec.patient)));
                        }
                    }
                }
                None => {
                    index.insert(rec.patient.clone(), self.records.len());
                    self.records.push(rec);
                }
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("<logit set>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0u64;
        for line in r.split(b'\n') {
            let line = line.map_err(|e| Error::io("<logit set>", e))?;
            let len = line.len() as u64 + 1;
            if !line.iter().all(|b| b.is_ascii_whitespace()) {
                let rec: PatientRecord = serde_json::from_slice(&line).map_err(|e| Error::Parse {
                    offset: offset + e.column().saturating_sub(1) as u64,
                    msg: e.to_string(),
                })?;
                records.push(rec);
            }
            offset += len;
        }
        let set = LogitSet { records };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(f))
    }
}
