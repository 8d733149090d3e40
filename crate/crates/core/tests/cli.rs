use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "seed": 3,
  "folds": 5,
  "train": {"epochs": 30, "batch_size": 32, "adam": {"lr": 0.005}},
  "models": {
    "cnv": {"kind": "snn", "layer_widths": [16], "alpha_dropout_p": 0.0, "num_classes": 4},
    "ehr": {"kind": "mlp", "layer_widths": [16], "dropout_p": 0.0, "num_classes": 4},
    "wsi": {"kind": "gnn", "dims": [16, 8], "dropout_p": 0.0, "lr": 0.01, "num_classes": 4}
  },
  "graph": {"gamma": 0.5},
  "fusion": {"train": {"epochs": 30}}
}
"#;

fn pathfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathfuse")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pathfuse(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(patients: usize, preset: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("run.json");
        std::fs::write(&config, CONFIG).unwrap();
        let n = patients.to_string();
        ok(&["synth-data", "--out", s(&root.join("data")), "--patients", &n, "--preset", preset]);
        Workspace { _tmp: tmp, root, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", s(&self.config)];
        all.extend_from_slice(args);
        pathfuse(&all)
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8_lossy(&out.stdout).into_owned()
    }

    fn train(&self, modality: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(&format!("runs/{modality}"));
        let manifest = self.path("data/manifest.json");
        let mut args = vec!["train-modality", "--manifest", s(&manifest), "--modality", modality, "--out", s(&out)];
        args.extend_from_slice(extra);
        self.ok(&args);
        out
    }

    fn build_graphs(&self) {
        self.ok(&["graph-build", "--patches", s(&self.path("data/patches/wsi")), "--out", s(&self.path("data/graphs/wsi"))]);
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_data_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    for (dir, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        ok(&["--seed", seed, "synth-data", "--out", s(dir.path()), "--patients", "60"]);
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    let rel = |fs: &[PathBuf], root: &Path| fs.iter().map(|f| f.strip_prefix(root).unwrap().to_path_buf()).collect::<Vec<_>>();
    assert_eq!(rel(&fa, a.path()), rel(&fb, b.path()));
    assert!(fa.len() > 60);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
    let cnv = |d: &Path| std::fs::read(d.join("features/cnv.csv")).unwrap();
    assert_ne!(cnv(a.path()), cnv(c.path()));
}

#[test]
fn evaluate_reports_one_entry_per_fold() {
    let w = Workspace::new(200, "complementary");
    let cnv = w.train("cnv", &["--folds", "10"]);
    let ehr = w.train("ehr", &["--folds", "10"]);
    let oof = cnv.join("oof.jsonl");
    w.ok(&["evaluate", "--logits", s(&oof), "--folds", "10", "--out", s(&w.path("eval_single"))]);
    let m = json(&w.path("eval_single/metrics.json"));
    assert_eq!(m["folds"].as_array().unwrap().len(), 10);

    let eoof = ehr.join("oof.jsonl");
    w.ok(&[
        "evaluate",
        "--strategy",
        "wl",
        "--logits",
        s(&oof),
        s(&eoof),
        "--folds",
        "10",
        "--out",
        s(&w.path("eval_fused")),
    ]);
    let m = json(&w.path("eval_fused/metrics.json"));
    assert_eq!(m["folds"].as_array().unwrap().len(), 10);
    let acc = m["mean_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn fusion_with_missing_modality_exits_2() {
    let w = Workspace::new(80, "complementary");
    let cnv = w.train("cnv", &[]);
    let ehr = w.train("ehr", &[]);
    // drop the first patient from the ehr logits
    let text = std::fs::read_to_string(ehr.join("oof.jsonl")).unwrap();
    let partial = w.path("ehr_partial.jsonl");
    std::fs::write(&partial, text.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    let out = w.run(&[
        "fuse",
        "--strategy",
        "wlb",
        "--logits",
        s(&cnv.join("oof.jsonl")),
        s(&partial),
        "--out",
        s(&w.path("fuse")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing modality 'ehr'"), "{err}");
    assert!(!w.path("fuse/predictions.jsonl").exists());
}

#[test]
fn dangling_manifest_path_is_named() {
    let w = Workspace::new(80, "complementary");
    let manifest = w.path("data/manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap().replace("\"cnv.csv\"", "\"gone.csv\"");
    std::fs::write(&manifest, text).unwrap();
    let out = w.run(&["train-modality", "--manifest", s(&manifest), "--modality", "ehr", "--out", s(&w.path("runs/ehr"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gone.csv"), "{err}");
    assert!(err.contains("cnv"), "{err}");
}

#[test]
fn zero_noise_cohort_is_learned_perfectly_by_every_modality() {
    let w = Workspace::new(100, "zero-noise");
    w.build_graphs();
    for m in ["cnv", "ehr", "wsi"] {
        let dir = w.train(m, &[]);
        let cv = json(&dir.join("cv.json"));
        assert_eq!(cv["oof_accuracy"].as_f64(), Some(1.0), "{m}: {cv}");
    }
}

#[test]
fn stages_skip_when_up_to_date_and_dry_run_writes_nothing() {
    let w = Workspace::new(80, "complementary");
    let dry = w.path("runs/dry");
    let manifest = w.path("data/manifest.json");
    let plan = w.ok(&["--dry-run", "train-modality", "--manifest", s(&manifest), "--modality", "cnv", "--out", s(&dry)]);
    assert!(plan.contains("train-modality"), "{plan}");
    assert!(!dry.exists());

    let dir = w.train("cnv", &[]);
    let before: Vec<(PathBuf, Vec<u8>, std::time::SystemTime)> = files(&dir)
        .into_iter()
        .map(|f| {
            let meta = std::fs::metadata(&f).unwrap();
            (f.clone(), std::fs::read(&f).unwrap(), meta.modified().unwrap())
        })
        .collect();
    let out = w.run(&["train-modality", "--manifest", s(&manifest), "--modality", "cnv", "--out", s(&dir)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("up to date"));
    for (f, bytes, mtime) in &before {
        assert_eq!(&std::fs::read(f).unwrap(), bytes);
        assert_eq!(&std::fs::metadata(f).unwrap().modified().unwrap(), mtime, "{}", f.display());
    }

    // a different seed is a different stage
    let out = w.run(&["--seed", "4", "train-modality", "--manifest", s(&manifest), "--modality", "cnv", "--out", s(&dir)]);
    assert!(out.status.success());
    assert!(!String::from_utf8_lossy(&out.stdout).contains("up to date"));
}

#[test]
fn job_count_does_not_change_results() {
    let w = Workspace::new(60, "complementary");
    let manifest = w.path("data/manifest.json");
    let mut outputs = Vec::new();
    for jobs in ["1", "3"] {
        let out_dir = w.path(&format!("runs/j{jobs}"));
        let out = Command::new(env!("CARGO_BIN_EXE_pathfuse"))
            .env("PATHFUSE_JOBS", jobs)
            .args(["--config", s(&w.config), "train-modality", "--manifest", s(&manifest), "--modality", "ehr", "--out", s(&out_dir)])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(std::fs::read(out_dir.join("oof.jsonl")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let out = Command::new(env!("CARGO_BIN_EXE_pathfuse"))
        .env("PATHFUSE_JOBS", "zero")
        .args(["synth-data", "--out", s(&w.path("x")), "--patients", "10"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PATHFUSE_JOBS"));
}

#[test]
fn usage_errors_exit_2_with_structured_message() {
    let out = pathfuse(&["fuse", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: kind=usage msg="));
    let out = pathfuse(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn truncated_checkpoint_reports_byte_offset() {
    let w = Workspace::new(80, "complementary");
    let dir = w.train("cnv", &[]);
    let bytes = std::fs::read(dir.join("model.ckpt")).unwrap();
    let cut = w.path("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let out = w.run(&["explain", "--checkpoint", s(&cut), "--manifest", s(&w.path("data/manifest.json")), "--modality", "cnv", "--out", s(&w.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kind=parse"), "{err}");
    assert!(err.contains("at byte"), "{err}");
}
