//! Command-line surface composing the pipeline stages.
//!
//! Every subcommand declares its inputs and output directory, honours
//! `--seed`, `--config`, `--jobs` and `--dry-run`, and skips work whose
//! content-hash stamp is current. Failures print one line
//! `error: kind=<kind> msg=<message>` and exit with 2 for input errors, 1
//! otherwise.

pub mod config;
pub mod load;
pub mod stage;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    ig_feedforward, node_attribution, pca_project, render_report, stratified_kfold, AttributionReport, CvSplit,
    MetricsReport, ModalityShare, ReportInput, DEFAULT_IG_STEPS,
};
use crate::fusion::{
    modality_contribution, pool_intermediate, pool_outputs, FusionData, FusionModel, IntermediatePooling,
    LogitSet, ModalityOutput, OutputPooling, PatientRecord, Strategy,
};
use crate::graph::{build_graph, read_patch_table, WsiGraph};
use crate::imaging::{rank_patches, refine_mask, scan_slide, tissue_mask_hsv, RasterImage, WsiSource};
use crate::manifest::{DatasetManifest, ModalitySource};
use crate::nn::{Checkpoint, RunMetadata};
use crate::pipeline::{cross_validate_fusion, cross_validate_modality, fold_of, ModalityInput, ModalityModel};
use crate::synth::{generate, SynthSpec};

pub use config::{EhrPrep, RunConfig};
pub use load::{load_modality, LoadedModality};
pub use stage::Stage;

#[derive(Debug, Parser)]
#[command(name = "pathfuse", version, about = "Multimodal late-fusion pipeline for breast-cancer subtyping")]
pub struct Cli {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; PATHFUSE_JOBS takes precedence.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// RunConfig JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Validate inputs and print the plan without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile a slide, score tissue per patch and select the top patches.
    Tile {
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Whole-slide tissue mask with refinement.
    Mask {
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build one graph per patch table (`<patient>.csv`) in a directory.
    GraphBuild {
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate one modality model and fit it on every patient.
    TrainModality {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        modality: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Pool per-patch logits (`patient,<class columns>[,h*]`) into a logit set.
    Pool {
        #[arg(long)]
        patch_logits: PathBuf,
        #[arg(long)]
        modality: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        /// Attach labels from this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Cross-validate a fusion strategy over out-of-fold logit sets.
    Fuse {
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, num_args = 1.., required = true)]
        logits: Vec<PathBuf>,
        /// Modality order; defaults to the sorted names in the logit sets.
        #[arg(long, value_delimiter = ',')]
        modalities: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Metrics from saved predictions, a single modality's out-of-fold
    /// logits, or a fusion strategy run on the spot.
    Evaluate {
        #[arg(long, conflicts_with_all = ["strategy", "logits"])]
        predictions: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, num_args = 1..)]
        logits: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        modalities: Vec<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attributions of a trained checkpoint.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        modality: Option<String>,
        /// Number of patients to explain (roster order).
        #[arg(long, default_value_t = 32)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// SVG and JSON report from evaluation outputs.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        attributions: Option<PathBuf>,
        #[arg(long)]
        regions: Option<PathBuf>,
        /// Supplies class names.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic cohort.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        patients: usize,
        /// `complementary` or `zero-noise`.
        #[arg(long, default_value = "complementary")]
        preset: String,
        /// Full SynthSpec JSON; overrides preset and patients.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

/// One fused or single-modality prediction, as stored in `predictions.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub patient: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub fold: usize,
    pub class: usize,
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                offset: offset + e.column().saturating_sub(1) as u64,
                msg: format!("{}: {e}", path.display()),
            })?);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { offset: 0, msg: format!("{}: {e}", path.display()) })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={first}");
            return 2;
        }
    };
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli)));
    match outcome {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            if e.is_input_error() {
                2
            } else {
                1
            }
        }
        Err(_) => {
            eprintln!("error: kind=internal msg=unexpected panic");
            1
        }
    }
}

fn jobs(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("PATHFUSE_JOBS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::invalid(format!("PATHFUSE_JOBS='{v}' is not a positive integer"))),
        Err(_) => match flag {
            Some(0) => Err(Error::invalid("--jobs must be positive")),
            other => Ok(other),
        },
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ctx = Ctx { cfg, dry_run: cli.dry_run };
    let pool = match jobs(cli.jobs)? {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?,
        ),
        None => None,
    };
    match pool {
        Some(p) => p.install(|| ctx.dispatch(cli.command)),
        None => ctx.dispatch(cli.command),
    }
}

struct Ctx {
    cfg: RunConfig,
    dry_run: bool,
}

fn parse_strategy(s: Option<&str>, default: Strategy) -> Result<Strategy> {
    s.map_or(Ok(default), Strategy::parse)
}

impl Ctx {
    fn dispatch(&self, command: Command) -> Result<()> {
        match command {
            Command::Tile { slide, out } => self.tile(&slide, &out),
            Command::Mask { slide, out } => self.mask(&slide, &out),
            Command::GraphBuild { patches, out } => self.graph_build(&patches, &out),
            Command::TrainModality { manifest, modality, out, folds } => {
                self.train_modality(&manifest, &modality, &out, folds.unwrap_or(self.cfg.folds))
            }
            Command::Pool { patch_logits, modality, out, variant, manifest } => {
                let variant = variant.as_deref().map_or(Ok(self.cfg.pooling), OutputPooling::parse)?;
                self.pool(&patch_logits, &modality, &out, variant, manifest.as_deref())
            }
            Command::Fuse { strategy, logits, modalities, out, folds } => {
                let s = parse_strategy(strategy.as_deref(), self.cfg.strategy)?;
                self.fuse(s, &logits, &modalities, &out, folds.unwrap_or(self.cfg.folds))
            }
            Command::Evaluate { predictions, strategy, logits, modalities, folds, out } => {
                let k = folds.unwrap_or(self.cfg.folds);
                match (predictions, logits.is_empty()) {
                    (Some(p), _) => self.evaluate_predictions(&p, &out),
                    (None, false) => {
                        let s = strategy.as_deref().map(Strategy::parse).transpose()?;
                        self.evaluate_logits(s, &logits, &modalities, &out, k)
                    }
                    (None, true) => Err(Error::invalid("evaluate needs --predictions or --logits")),
                }
            }
            Command::Explain { checkpoint, manifest, modality, limit, out } => {
                self.explain(&checkpoint, manifest.as_deref(), modality.as_deref(), limit, &out)
            }
            Command::Report { metrics, predictions, attributions, regions, manifest, out } => self.report(
                &metrics,
                predictions.as_deref(),
                attributions.as_deref(),
                regions.as_deref(),
                manifest.as_deref(),
                &out,
            ),
            Command::SynthData { out, patients, preset, spec } => self.synth_data(&out, patients, &preset, spec.as_deref()),
        }
    }

    fn stage(&self, command: &str, inputs: Vec<PathBuf>, out: &Path, outputs: &[&str], params: serde_json::Value) -> Stage {
        Stage {
            command: command.into(),
            inputs,
            out_dir: out.to_path_buf(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            params: serde_json::json!({ "config": self.cfg, "args": params }),
        }
    }

    fn tile(&self, slide: &Path, out: &Path) -> Result<()> {
        let st = self.stage("tile", vec![slide.into()], out, &["tiles.json"], serde_json::json!({}));
        st.run(self.dry_run, || {
            let patches = scan_slide(&WsiSource::open(slide)?, &self.cfg.tiling)?;
            let accepted: Vec<_> = patches.iter().filter(|p| p.accepted(&self.cfg.tiling)).cloned().collect();
            let selected = rank_patches(&accepted, self.cfg.top_patches);
            write_json(
                &out.join("tiles.json"),
                &serde_json::json!({ "patches": patches, "accepted": accepted, "selected": selected }),
            )
        })
    }

    fn mask(&self, slide: &Path, out: &Path) -> Result<()> {
        let st = self.stage("mask", vec![slide.into()], out, &["mask.png", "mask.json"], serde_json::json!({}));
        st.run(self.dry_run, || {
            let img = RasterImage::load_png(slide)?;
            let (raw, raw_fraction) = tissue_mask_hsv(&img, &self.cfg.tiling)?;
            let refined = refine_mask(&raw, &self.cfg.refine)?;
            refined.raster.save_png(&out.join("mask.png"))?;
            write_json(
                &out.join("mask.json"),
                &serde_json::json!({
                    "width": img.width,
                    "height": img.height,
                    "raw_fraction": raw_fraction,
                    "refined_fraction": refined.fraction(),
                }),
            )
        })
    }

    fn graph_build(&self, patches: &Path, out: &Path) -> Result<()> {
        let st = self.stage("graph-build", vec![patches.into()], out, &[], serde_json::json!({}));
        st.run(self.dry_run, || {
            let mut files: Vec<PathBuf> = std::fs::read_dir(patches)
                .map_err(|e| Error::io(patches, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::invalid(format!("no patch tables (*.csv) in {}", patches.display())));
            }
            files.par_iter().try_for_each(|f| {
                let file = std::fs::File::open(f).map_err(|e| Error::io(f, e))?;
                let table = read_patch_table(file)?;
                let g = build_graph(&table, &self.cfg.graph)?;
                let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                g.save(&out.join(format!("{stem}.json")))
            })
        })
    }

    fn split(&self, labels: &[usize], k: usize) -> Result<CvSplit> {
        stratified_kfold(labels, k, self.cfg.seed)
    }

    fn train_modality(&self, manifest_path: &Path, modality: &str, out: &Path, k: usize) -> Result<()> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let source = manifest.source(modality)?;
        let spec = self.cfg.model_for(modality, source, manifest.class_names.len())?;
        let mut inputs = vec![manifest_path.to_path_buf()];
        inputs.extend(source.paths().iter().map(|p| manifest.resolve(p)));
        let st = self.stage(
            "train-modality",
            inputs,
            out,
            &["oof.jsonl", "model.ckpt", "cv.json"],
            serde_json::json!({ "modality": modality, "folds": k, "model": spec }),
        );
        st.run(self.dry_run, || {
            let data = load_modality(&manifest, modality, &self.cfg)?;
            let split = self.split(&data.labels, k)?;
            let train = self.cfg.modality_train();
            let cv = cross_validate_modality(modality, &data.patients, &data.labels, &data.input, &spec, &train, &split)?;
            cv.oof.save(&out.join("oof.jsonl"))?;
            create_dir(&out.join("folds"))?;
            let mut fold_info = Vec::new();
            for (i, ((model, report), fold)) in cv.fold_models.iter().zip(&split.folds).enumerate() {
                let meta = RunMetadata { seed: train.seed, epochs_run: report.epochs_run, final_loss: Some(report.final_loss) };
                model.checkpoint(meta)?.save(&out.join(format!("folds/fold{i}.ckpt")))?;
                let correct = fold
                    .test
                    .iter()
                    .filter(|&&r| argmax(&cv.oof.records[r].modalities[modality].probs) == data.labels[r])
                    .count();
                fold_info.push(serde_json::json!({
                    "fold": i,
                    "epochs_run": report.epochs_run,
                    "final_loss": report.final_loss,
                    "accuracy": correct as f64 / fold.test.len() as f64,
                }));
            }
            let all: Vec<usize> = (0..data.patients.len()).collect();
            let (model, report) = ModalityModel::fit(&spec, &data.input, &data.labels, &all, &train)?;
            let meta = RunMetadata { seed: train.seed, epochs_run: report.epochs_run, final_loss: Some(report.final_loss) };
            model.checkpoint(meta)?.save(&out.join("model.ckpt"))?;
            let preds: Vec<usize> = cv.oof.records.iter().map(|r| argmax(&r.modalities[modality].probs)).collect();
            let acc = crate::eval::accuracy(&preds, &data.labels)?;
            write_json(
                &out.join("cv.json"),
                &serde_json::json!({
                    "modality": modality,
                    "patients": data.patients.len(),
                    "folds": fold_info,
                    "oof_accuracy": acc,
                }),
            )
        })
    }

    fn pool(&self, csv_path: &Path, modality: &str, out: &Path, variant: OutputPooling, manifest: Option<&Path>) -> Result<()> {
        let mut inputs = vec![csv_path.to_path_buf()];
        inputs.extend(manifest.map(Path::to_path_buf));
        let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
        let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let st = self.stage("pool", inputs, &dir, &[&name], serde_json::json!({ "modality": modality, "variant": variant }));
        st.run(self.dry_run, || {
            let mut rdr = csv::Reader::from_path(csv_path)?;
            let header = rdr.headers()?.clone();
            let hidden: Vec<bool> = header.iter().skip(1).map(|h| h.starts_with('h')).collect();
            let mut order: Vec<String> = Vec::new();
            let mut rows: BTreeMap<String, (Vec<Vec<f64>>, Vec<Vec<f64>>)> = BTreeMap::new();
            for (line, rec) in rdr.records().enumerate() {
                let rec = rec?;
                let patient = rec.get(0).unwrap_or("").to_string();
                let mut logits = Vec::new();
                let mut inter = Vec::new();
                for (j, cell) in rec.iter().skip(1).enumerate() {
                    let v: f64 = cell
                        .trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("{} row {}: '{cell}' is not a number", csv_path.display(), line + 2)))?;
                    if hidden[j] {
                        inter.push(v);
                    } else {
                        logits.push(v);
                    }
                }
                let entry = rows.entry(patient.clone()).or_insert_with(|| {
                    order.push(patient);
                    (Vec::new(), Vec::new())
                });
                entry.0.push(logits);
                entry.1.push(inter);
            }
            let labels: BTreeMap<String, usize> = match manifest {
                Some(m) => {
                    let m = DatasetManifest::load(m)?;
                    let (ids, ys) = m.roster()?;
                    ids.into_iter().zip(ys).collect()
                }
                None => BTreeMap::new(),
            };
            let mut records = Vec::with_capacity(order.len());
            for p in order {
                let (logits, inter) = &rows[&p];
                let pooled = pool_outputs(&p, logits, variant)?;
                let h = if inter[0].is_empty() { Vec::new() } else { pool_intermediate(inter, IntermediatePooling::Mean)? };
                records.push(PatientRecord {
                    label: labels.get(&p).copied(),
                    patient: p,
                    modalities: [(modality.to_string(), ModalityOutput { logits: pooled.logits, probs: pooled.probs, intermediate: h })]
                        .into(),
                });
            }
            let set = LogitSet { records };
            set.validate()?;
            set.save(out)
        })
    }

    fn load_fusion_data(&self, logits: &[PathBuf], modalities: &[String]) -> Result<FusionData> {
        let mut merged: Option<LogitSet> = None;
        for p in logits {
            let set = LogitSet::load(p)?;
            match &mut merged {
                None => merged = Some(set),
                Some(m) => m.merge(set)?,
            }
        }
        let set = merged.ok_or_else(|| Error::invalid("no logit sets given"))?;
        let names = if modalities.is_empty() { set.modality_names() } else { modalities.to_vec() };
        FusionData::from_logit_set(&set, &names)
    }

    /// Out-of-fold predictions of `strategy` under a stratified split.
    fn fusion_cv(&self, strategy: Strategy, data: &FusionData, k: usize) -> Result<(CvSplit, Vec<Prediction>, Vec<FusionModel>)> {
        let labels = data.require_labels()?;
        let split = self.split(&labels, k)?;
        let cv = cross_validate_fusion(strategy, data, &split, &self.cfg.fusion_config())?;
        let folds = fold_of(&split, data.len());
        let preds = (0..data.len())
            .map(|i| Prediction {
                patient: data.patients[i].clone(),
                label: Some(labels[i]),
                fold: folds[i],
                class: argmax(&cv.probs[i]),
                probs: cv.probs[i].clone(),
                logits: cv.logits.as_ref().map(|l| l[i].clone()),
            })
            .collect();
        Ok((split, preds, cv.fold_models))
    }

    fn fuse(&self, strategy: Strategy, logits: &[PathBuf], modalities: &[String], out: &Path, k: usize) -> Result<()> {
        let st = self.stage(
            "fuse",
            logits.to_vec(),
            out,
            &["predictions.jsonl", "fused.jsonl", "fusion.ckpt", "cv.json"],
            serde_json::json!({ "strategy": strategy, "modalities": modalities, "folds": k }),
        );
        st.run(self.dry_run, || {
            let data = self.load_fusion_data(logits, modalities)?;
            let (_, preds, fold_models) = self.fusion_cv(strategy, &data, k)?;
            write_predictions(&out.join("predictions.jsonl"), &preds)?;
            let fused = LogitSet {
                records: preds
                    .iter()
                    .map(|p| {
                        let logits = p.logits.clone().unwrap_or_else(|| p.probs.iter().map(|v| v.max(1e-300).ln()).collect());
                        PatientRecord {
                            patient: p.patient.clone(),
                            label: p.label,
                            modalities: [("fused".to_string(), ModalityOutput::from_logits(logits, Vec::new()))].into(),
                        }
                    })
                    .collect(),
            };
            fused.save(&out.join("fused.jsonl"))?;
            create_dir(&out.join("folds"))?;
            for (i, m) in fold_models.iter().enumerate() {
                m.to_checkpoint().save(&out.join(format!("folds/fold{i}.ckpt")))?;
            }
            let all: Vec<usize> = (0..data.len()).collect();
            let (model, _) = FusionModel::fit(strategy, &data, &all, &self.cfg.fusion_config())?;
            model.to_checkpoint().save(&out.join("fusion.ckpt"))?;
            let labels = data.require_labels()?;
            let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
            let contribution = modality_contribution(&model).ok();
            write_json(
                &out.join("cv.json"),
                &serde_json::json!({
                    "strategy": strategy,
                    "modalities": data.modalities,
                    "folds": k,
                    "oof_accuracy": crate::eval::accuracy(&classes, &labels)?,
                    "modality_contribution": contribution,
                }),
            )
        })
    }

    fn write_metrics(&self, preds: &[Prediction], out: &Path) -> Result<()> {
        let labels: Vec<usize> = preds
            .iter()
            .map(|p| p.label.ok_or_else(|| Error::invalid(format!("patient {} has no label", p.patient))))
            .collect::<Result<_>>()?;
        let c = preds.first().map_or(0, |p| p.probs.len());
        let k = preds.iter().map(|p| p.fold + 1).max().unwrap_or(0);
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
        let folds: Vec<usize> = preds.iter().map(|p| p.fold).collect();
        let report = MetricsReport::from_oof(&probs, &labels, &folds, k, c)?;
        write_json(&out.join("metrics.json"), &report)
    }

    fn evaluate_predictions(&self, path: &Path, out: &Path) -> Result<()> {
        let st = self.stage("evaluate", vec![path.into()], out, &["metrics.json"], serde_json::json!({}));
        st.run(self.dry_run, || self.write_metrics(&read_predictions(path)?, out))
    }

    fn evaluate_logits(&self, strategy: Option<Strategy>, logits: &[PathBuf], modalities: &[String], out: &Path, k: usize) -> Result<()> {
        let st = self.stage(
            "evaluate",
            logits.to_vec(),
            out,
            &["metrics.json", "predictions.jsonl"],
            serde_json::json!({ "strategy": strategy, "modalities": modalities, "folds": k }),
        );
        st.run(self.dry_run, || {
            let data = self.load_fusion_data(logits, modalities)?;
            let preds = match strategy {
                Some(s) => self.fusion_cv(s, &data, k)?.1,
                None => {
                    if data.num_modalities() != 1 {
                        return Err(Error::invalid("evaluating several modalities needs --strategy"));
                    }
                    let labels = data.require_labels()?;
                    let folds = fold_of(&self.split(&labels, k)?, data.len());
                    (0..data.len())
                        .map(|i| {
                            let probs = data.modality_probs(i, 0).to_vec();
                            Prediction {
                                patient: data.patients[i].clone(),
                                label: Some(labels[i]),
                                fold: folds[i],
                                class: argmax(&probs),
                                logits: Some(data.modality_logits(i, 0).to_vec()),
                                probs,
                            }
                        })
                        .collect()
                }
            };
            write_predictions(&out.join("predictions.jsonl"), &preds)?;
            self.write_metrics(&preds, out)
        })
    }

    fn explain(&self, ckpt_path: &Path, manifest: Option<&Path>, modality: Option<&str>, limit: usize, out: &Path) -> Result<()> {
        let mut inputs = vec![ckpt_path.to_path_buf()];
        inputs.extend(manifest.map(Path::to_path_buf));
        let st = self.stage("explain", inputs, out, &["attributions.json"], serde_json::json!({ "modality": modality, "limit": limit }));
        st.run(self.dry_run, || {
            let ck = Checkpoint::load(ckpt_path)?;
            if ck.kind == "fusion" {
                let model = FusionModel::from_checkpoint(&ck)?;
                let shares = modality_contribution(&model)?;
                let report = AttributionReport {
                    modality_contribution: model
                        .modalities
                        .iter()
                        .zip(shares)
                        .map(|(m, percent)| ModalityShare { modality: m.clone(), percent })
                        .collect(),
                    ..AttributionReport::default()
                };
                write_json(&out.join("attributions.json"), &report)?;
                return write_json(&out.join("regions.json"), &BTreeMap::<String, Vec<[f64; 4]>>::new());
            }
            let (Some(mpath), Some(modality)) = (manifest, modality) else {
                return Err(Error::invalid("explaining a modality model needs --manifest and --modality"));
            };
            let manifest = DatasetManifest::load(mpath)?;
            let data = load_modality(&manifest, modality, &self.cfg)?;
            let n = limit.min(data.patients.len());
            match ModalityModel::from_checkpoint(&ck)? {
                ModalityModel::Dense { net, params, encoder, .. } => {
                    let (x, names) = match (&data.input, &encoder) {
                        (ModalityInput::Tabular(m), Some(e)) => (e.transform(m)?, e.output_names()),
                        (ModalityInput::Dense { x, names }, None) => (x.clone(), names.clone()),
                        _ => return Err(Error::invalid("checkpoint and modality input kinds differ")),
                    };
                    let p64 = params.cast::<f64>();
                    let samples = (0..n)
                        .into_par_iter()
                        .map(|i| {
                            let row: Vec<f64> = x.row(i).iter().map(|&v| f64::from(v)).collect();
                            ig_feedforward(&net, &p64, &row, None, DEFAULT_IG_STEPS)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let report = AttributionReport::from_samples(names, &samples, self.cfg.top_k_features)?;
                    write_json(&out.join("attributions.json"), &report)?;
                    write_json(&out.join("regions.json"), &BTreeMap::<String, Vec<[f64; 4]>>::new())
                }
                ModalityModel::Graph(model) => {
                    let ModalitySource::Graphs { dir } = manifest.source(modality)? else {
                        return Err(Error::invalid(format!("modality {modality} has no graphs")));
                    };
                    let dir = manifest.resolve(dir);
                    let per: Vec<(String, crate::eval::NodeAttribution)> = data.patients[..n]
                        .par_iter()
                        .map(|p| {
                            let g = WsiGraph::load(&dir.join(format!("{p}.json")))?;
                            Ok((p.clone(), node_attribution(&model, &g, &self.cfg.attribution)?))
                        })
                        .collect::<Result<_>>()?;
                    let regions: BTreeMap<String, Vec<[f64; 4]>> = per.iter().map(|(p, a)| (p.clone(), a.regions.clone())).collect();
                    let nodes: BTreeMap<String, &crate::eval::NodeAttribution> = per.iter().map(|(p, a)| (p.clone(), a)).collect();
                    write_json(&out.join("node_attributions.json"), &nodes)?;
                    let report = AttributionReport {
                        completeness_residual: per.iter().map(|(_, a)| a.residual.abs()).fold(0.0, f64::max),
                        ..AttributionReport::default()
                    };
                    write_json(&out.join("attributions.json"), &report)?;
                    write_json(&out.join("regions.json"), &regions)
                }
            }
        })
    }

    fn report(
        &self,
        metrics: &Path,
        predictions: Option<&Path>,
        attributions: Option<&Path>,
        regions: Option<&Path>,
        manifest: Option<&Path>,
        out: &Path,
    ) -> Result<()> {
        let mut inputs = vec![metrics.to_path_buf()];
        inputs.extend([predictions, attributions, regions, manifest].into_iter().flatten().map(Path::to_path_buf));
        let st = self.stage("report", inputs, out, &["metrics.json", "metrics.svg", "pca.svg"], serde_json::json!({}));
        st.run(self.dry_run, || {
            let m: MetricsReport = read_json(metrics)?;
            let class_names = match manifest {
                Some(p) => DatasetManifest::load(p)?.class_names,
                None => (0..m.confusion.len()).map(|k| format!("class{k}")).collect(),
            };
            let (pca, pca_labels) = match predictions {
                Some(p) => {
                    let preds = read_predictions(p)?;
                    let rows: Vec<Vec<f64>> =
                        preds.iter().map(|p| p.logits.clone().unwrap_or_else(|| p.probs.clone())).collect();
                    let labels = preds.iter().map(|p| p.label.unwrap_or(p.class)).collect();
                    (Some(pca_project(&rows, 2)?), labels)
                }
                None => (None, Vec::new()),
            };
            let input = ReportInput {
                metrics: Some(m),
                class_names,
                attributions: attributions.map(read_json).transpose()?,
                pca,
                pca_labels,
                regions: regions.map(read_json).transpose()?.unwrap_or_default(),
            };
            render_report(out, &input).map(|_| ())
        })
    }

    fn synth_data(&self, out: &Path, patients: usize, preset: &str, spec_path: Option<&Path>) -> Result<()> {
        let spec = match spec_path {
            Some(p) => read_json::<SynthSpec>(p)?,
            None => match preset {
                "complementary" => SynthSpec::complementary(patients),
                "zero-noise" => SynthSpec::zero_noise(patients),
                other => return Err(Error::invalid(format!("unknown synth preset '{other}' (complementary, zero-noise)"))),
            },
        };
        spec.validate()?;
        let st = Stage {
            command: "synth-data".into(),
            inputs: spec_path.map(Path::to_path_buf).into_iter().collect(),
            out_dir: out.to_path_buf(),
            outputs: vec!["manifest.json".into(), "synth.json".into()],
            params: serde_json::json!({ "seed": self.cfg.seed, "spec": spec }),
        };
        st.run(self.dry_run, || {
            let data = generate(&spec, self.cfg.seed)?;
            data.write(out)?;
            println!("synth-data: {} patients written to {}", data.patients.len(), out.display());
            Ok(())
        })
    }
}
