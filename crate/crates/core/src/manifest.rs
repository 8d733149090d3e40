//! Dataset manifests: patient roster, labels and per-modality resources.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModalitySource {
    /// Patient x gene copy-number CSV.
    Cnv { path: PathBuf },
    /// Clinical CSV with a column-kind schema.
    Ehr { path: PathBuf, schema: PathBuf },
    /// Numeric patient x feature CSV.
    Features { path: PathBuf },
    /// Directory of `<patient>.json` graphs.
    Graphs { dir: PathBuf },
    /// Precomputed outputs in logit-set form.
    Logits { path: PathBuf },
}

impl ModalitySource {
    pub fn paths(&self) -> Vec<&Path> {
        match self {
            ModalitySource::Cnv { path } | ModalitySource::Features { path } | ModalitySource::Logits { path } => {
                vec![path]
            }
            ModalitySource::Ehr { path, schema } => vec![path, schema],
            ModalitySource::Graphs { dir } => vec![dir],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub patients: Vec<String>,
    /// Patient id to class name.
    pub labels: BTreeMap<String, String>,
    pub modality_order: Vec<String>,
    pub modalities: BTreeMap<String, ModalitySource>,
    #[serde(default)]
    pub exclude: Vec<String>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Parses and validates, including that every referenced path exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: byte_offset(&text, e.line(), e.column()),
            msg: format!("{}: {e}", path.display()),
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate_structure()?;
        m.validate_paths()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn validate_structure(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::invalid("manifest lists no classes"));
        }
        let mut seen = BTreeSet::new();
        for p in &self.patients {
            if !seen.insert(p) {
                return Err(Error::invalid(format!("patient {p} listed twice")));
            }
            let l = self.labels.get(p).ok_or_else(|| Error::invalid(format!("patient {p} has no label")))?;
            if !self.class_names.contains(l) {
                return Err(Error::invalid(format!("patient {p} has unknown class '{l}'")));
            }
        }
        let order: BTreeSet<&String> = self.modality_order.iter().collect();
        let keys: BTreeSet<&String> = self.modalities.keys().collect();
        if order.len() != self.modality_order.len() || order != keys {
            return Err(Error::invalid(format!(
                "modality_order {:?} must list each declared modality {:?} exactly once",
                self.modality_order, keys
            )));
        }
        Ok(())
    }

    pub fn validate_paths(&self) -> Result<()> {
        for (name, src) in &self.modalities {
            for p in src.paths() {
                let full = self.resolve(p);
                if !full.exists() {
                    return Err(Error::invalid(format!("modality {name} references missing path {}", full.display())));
                }
            }
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::invalid(format!("unknown class '{name}'")))
    }

    /// Included patients and their class indices, in roster order.
    pub fn roster(&self) -> Result<(Vec<String>, Vec<usize>)> {
        let excluded: BTreeSet<&String> = self.exclude.iter().collect();
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for p in self.patients.iter().filter(|p| !excluded.contains(p)) {
            ids.push(p.clone());
            labels.push(self.class_index(&self.labels[p])?);
        }
        Ok((ids, labels))
    }

    pub fn source(&self, modality: &str) -> Result<&ModalitySource> {
        self.modalities
            .get(modality)
            .ok_or_else(|| Error::invalid(format!("manifest has no modality '{modality}'")))
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dir: &Path) -> DatasetManifest {
        std::fs::write(dir.join("cnv.csv"), "patient,g1\na,0\n").unwrap();
        DatasetManifest {
            class_names: vec!["LumA".into(), "Basal".into()],
            patients: vec!["a".into(), "b".into()],
            labels: [("a".to_string(), "LumA".to_string()), ("b".to_string(), "Basal".to_string())].into(),
            modality_order: vec!["cnv".into()],
            modalities: [("cnv".to_string(), ModalitySource::Cnv { path: "cnv.csv".into() })].into(),
            exclude: vec!["b".into()],
            root: PathBuf::new(),
        }
    }

    #[test]
    fn round_trip_and_roster() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample(dir.path());
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.roster().unwrap(), (vec!["a".to_string()], vec![0]));
        assert_eq!(back.modalities, m.modalities);
    }

    #[test]
    fn dangling_path_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample(dir.path());
        m.modalities.insert("ehr".into(), ModalitySource::Features { path: "nope.csv".into() });
        m.modality_order.push("ehr".into());
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let err = DatasetManifest::load(&path).unwrap_err().to_string();
        assert!(err.contains("nope.csv"), "{err}");
    }

    #[test]
    fn truncated_manifest_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, "{\"class_names\": [\"a\"],\n \"patients\": [").unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Parse { .. })));
    }
}
