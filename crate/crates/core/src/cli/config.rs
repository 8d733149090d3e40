//! Run configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::NodeAttributionConfig;
use crate::fusion::{FuseConfig, OutputPooling, Strategy};
use crate::gnn::GnnConfig;
use crate::graph::GraphBuildConfig;
use crate::imaging::{RefineConfig, TilingConfig};
use crate::manifest::ModalitySource;
use crate::nn::{MlpConfig, SnnConfig, TrainConfig};
use crate::pipeline::ModelSpec;
use crate::tabular::ImbalanceStrategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EhrPrep {
    /// Columns missing in more than this fraction of patients are dropped.
    pub sparse_threshold: f64,
    pub knn_k: usize,
}

impl Default for EhrPrep {
    fn default() -> Self {
        EhrPrep { sparse_threshold: 0.5, knn_k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub folds: usize,
    /// Applied to every modality and fusion training run.
    pub imbalance: ImbalanceStrategy,
    /// Modality training loop; its seed and imbalance fields are overridden.
    pub train: TrainConfig,
    /// Model per modality name; unnamed modalities use the default for
    /// their source kind.
    pub models: BTreeMap<String, ModelSpec>,
    pub ehr: EhrPrep,
    pub strategy: Strategy,
    pub fusion: FuseConfig,
    pub tiling: TilingConfig,
    pub refine: RefineConfig,
    pub top_patches: usize,
    pub graph: GraphBuildConfig,
    pub pooling: OutputPooling,
    pub attribution: NodeAttributionConfig,
    pub top_k_features: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            folds: 10,
            imbalance: ImbalanceStrategy::None,
            train: TrainConfig::default(),
            models: BTreeMap::new(),
            ehr: EhrPrep::default(),
            strategy: Strategy::Wlb,
            fusion: FuseConfig::default(),
            tiling: TilingConfig::default(),
            refine: RefineConfig::default(),
            top_patches: 50,
            graph: GraphBuildConfig::default(),
            pooling: OutputPooling::MeanLogits,
            attribution: NodeAttributionConfig::default(),
            top_k_features: 10,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads and validates `path`; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: run config does not match the schema: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::invalid(format!("folds must be at least 2, got {}", self.folds)));
        }
        self.tiling.validate()?;
        self.graph.validate()?;
        if !(self.ehr.sparse_threshold > 0.0 && self.ehr.sparse_threshold <= 1.0) || self.ehr.knn_k == 0 {
            return Err(Error::invalid("ehr.sparse_threshold must lie in (0, 1] and ehr.knn_k be positive"));
        }
        if self.top_patches == 0 || self.top_k_features == 0 {
            return Err(Error::invalid("top_patches and top_k_features must be positive"));
        }
        if let Some(ModelSpec::Gnn(g)) = self.models.values().find(|m| matches!(m, ModelSpec::Gnn(_))) {
            g.validate()?;
        }
        Ok(())
    }

    /// The model for `modality`, checked against the class count.
    pub fn model_for(&self, modality: &str, source: &ModalitySource, classes: usize) -> Result<ModelSpec> {
        let spec = match self.models.get(modality) {
            Some(s) => s.clone(),
            None => match source {
                ModalitySource::Cnv { .. } => ModelSpec::Snn(SnnConfig { num_classes: classes, ..SnnConfig::default() }),
                ModalitySource::Ehr { .. } | ModalitySource::Features { .. } => {
                    ModelSpec::Mlp(MlpConfig { num_classes: classes, ..MlpConfig::default() })
                }
                ModalitySource::Graphs { .. } => ModelSpec::Gnn(GnnConfig { num_classes: classes, ..GnnConfig::default() }),
                ModalitySource::Logits { .. } => {
                    return Err(Error::invalid(format!("modality {modality} holds precomputed logits and cannot be trained")));
                }
            },
        };
        if spec.num_classes() != classes {
            return Err(Error::invalid(format!(
                "model for {modality} predicts {} classes, manifest has {classes}",
                spec.num_classes()
            )));
        }
        Ok(spec)
    }

    /// Modality training settings for this run.
    pub fn modality_train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, imbalance: self.imbalance, ..self.train.clone() }
    }

    /// Fusion settings for this run.
    pub fn fusion_config(&self) -> FuseConfig {
        let mut f = self.fusion.clone();
        f.train.seed = self.seed;
        f.train.imbalance = self.imbalance;
        f
    }
}
