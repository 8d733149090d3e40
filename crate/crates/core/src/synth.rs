//! Synthetic multimodal cohorts with class-conditional Gaussian modalities
//! and a closed-form Bayes accuracy.
//!
//! Each modality draws a latent vector `x = s[y] * e_y + sd * z` of width
//! `C + extra_dims`: class `c` shifts only coordinate `c`, by the modality's
//! per-class signal. Writers turn latents into CNV tables, clinical tables,
//! patch-feature tables and slide images.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{write_patch_table, PatchFeature};
use crate::imaging::RasterImage;
use crate::manifest::{DatasetManifest, ModalitySource};
use crate::rng::{Rng, Stream};
use crate::tabular::{ColumnKind, ColumnSpec, TabularSchema};

pub const PAM50_PREVALENCE: [f64; 4] = [0.535, 0.206, 0.181, 0.078];
pub const PAM50_CLASSES: [&str; 4] = ["LumA", "LumB", "Basal", "Her2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Cnv,
    Ehr,
    Graph,
    Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthModality {
    pub name: String,
    pub kind: SynthKind,
    /// Mean shift of the class's own coordinate, per class.
    pub signal: Vec<f64>,
    pub noise_sd: f64,
    #[serde(default)]
    pub extra_dims: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub patients: usize,
    pub prevalence: Vec<f64>,
    pub class_names: Vec<String>,
    pub modalities: Vec<SynthModality>,
    /// Per-patch deviation around the patient latent.
    pub patch_noise_sd: f64,
    pub patches_min: usize,
    pub patches_max: usize,
    pub patch_size: usize,
    /// Fraction of patches drawn as uninformative stroma.
    pub stroma_fraction: f64,
    /// Stroma patches sit at this value on every coordinate.
    pub stroma_level: f64,
    /// Probability that a clinical lab cell is blank.
    pub ehr_missing_rate: f64,
    /// Number of patients that also get a slide image.
    pub slides: usize,
    pub slide_size: usize,
}

fn modality(name: &str, kind: SynthKind, signal: [f64; 4], noise_sd: f64) -> SynthModality {
    SynthModality { name: name.into(), kind, signal: signal.to_vec(), noise_sd, extra_dims: 2 }
}

impl SynthSpec {
    /// Three modalities with complementary strengths: `cnv` separates LumA
    /// and Basal, `ehr` LumB and Her2, `wsi` is uniformly moderate.
    pub fn complementary(patients: usize) -> Self {
        SynthSpec {
            patients,
            prevalence: PAM50_PREVALENCE.to_vec(),
            class_names: PAM50_CLASSES.iter().map(|s| s.to_string()).collect(),
            modalities: vec![
                modality("cnv", SynthKind::Cnv, [1.5, 0.3, 1.5, 0.3], 1.0),
                modality("ehr", SynthKind::Ehr, [0.3, 1.5, 0.3, 1.5], 1.0),
                modality("wsi", SynthKind::Graph, [0.9, 0.9, 0.9, 0.9], 1.0),
            ],
            patch_noise_sd: 0.5,
            patches_min: 12,
            patches_max: 24,
            patch_size: 512,
            stroma_fraction: 0.4,
            stroma_level: 3.0,
            ehr_missing_rate: 0.1,
            slides: 2,
            slide_size: 1024,
        }
    }

    /// Noise-free variant: every modality alone separates the classes.
    pub fn zero_noise(patients: usize) -> Self {
        let mut s = Self::complementary(patients);
        for m in &mut s.modalities {
            m.signal = vec![1.0; 4];
            m.noise_sd = 0.0;
        }
        s.patch_noise_sd = 0.0;
        s.ehr_missing_rate = 0.0;
        s
    }

    pub fn num_classes(&self) -> usize {
        self.prevalence.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c < 2 || self.class_names.len() != c {
            return Err(Error::invalid(format!("{} class names for {c} prevalences", self.class_names.len())));
        }
        let total: f64 = self.prevalence.iter().sum();
        if self.prevalence.iter().any(|p| !(*p > 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("prevalence {:?} must be positive and sum to 1", self.prevalence)));
        }
        if self.patients < c {
            return Err(Error::invalid(format!("{} patients cannot cover {c} classes", self.patients)));
        }
        if self.modalities.is_empty() {
            return Err(Error::invalid("spec has no modalities"));
        }
        for m in &self.modalities {
            if m.signal.len() != c || m.signal.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::invalid(format!("modality {}: need {c} positive signals", m.name)));
            }
            if !(m.noise_sd.is_finite() && m.noise_sd >= 0.0) {
                return Err(Error::invalid(format!("modality {}: noise_sd {} invalid", m.name, m.noise_sd)));
            }
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.modalities.len() {
            return Err(Error::invalid("modality names repeat"));
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max || self.patch_size == 0 {
            return Err(Error::invalid("need 0 < patches_min <= patches_max and a positive patch_size"));
        }
        if !(0.0..1.0).contains(&self.stroma_fraction) || !self.stroma_level.is_finite() {
            return Err(Error::invalid("stroma_fraction must lie in [0, 1) and stroma_level be finite"));
        }
        if !(0.0..1.0).contains(&self.ehr_missing_rate) || !(self.patch_noise_sd >= 0.0) {
            return Err(Error::invalid("ehr_missing_rate must lie in [0, 1) and patch_noise_sd be non-negative"));
        }
        if self.slides > 0 && self.slide_size < 2 * self.patch_size {
            return Err(Error::invalid("slide_size must hold at least 2x2 patches"));
        }
        Ok(())
    }

    /// Closed-form Bayes accuracy of each modality alone.
    pub fn bayes_accuracies(&self) -> BTreeMap<String, f64> {
        self.modalities
            .iter()
            .map(|m| (m.name.clone(), bayes_accuracy(&self.prevalence, &m.signal, m.noise_sd)))
            .collect()
    }

    /// Closed-form Bayes accuracy given every modality.
    pub fn fused_bayes_accuracy(&self) -> f64 {
        let views: Vec<(&[f64], f64)> = self.modalities.iter().map(|m| (m.signal.as_slice(), m.noise_sd)).collect();
        fused_bayes_accuracy(&self.prevalence, &views)
    }
}

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Bayes accuracy for class-conditional `N(s_y e_y, sd^2 I)` with prior
/// `prior`. The optimal rule compares `g_k = ln prior_k + (s_k x_k - s_k^2/2)/sd^2`;
/// given the true class the competitors are independent, leaving a 1-D
/// integral over the true coordinate's noise (composite Simpson on [-10, 10]).
pub fn bayes_accuracy(prior: &[f64], signal: &[f64], sd: f64) -> f64 {
    if sd == 0.0 {
        return 1.0;
    }
    let c = prior.len();
    let var = sd * sd;
    let mut acc = 0.0;
    for y in 0..c {
        let inner = |z: f64| {
            let g = prior[y].ln() + (signal[y] * (signal[y] + sd * z) - 0.5 * signal[y] * signal[y]) / var;
            (0..c)
                .filter(|&k| k != y)
                .map(|k| {
                    let s = signal[k];
                    // P(ln p_k + (s sd z_k - s^2/2)/sd^2 < g)
                    phi((sd / s) * (g - prior[k].ln() + 0.5 * s * s / var))
                })
                .product::<f64>()
                * (-0.5 * z * z).exp()
                / (2.0 * std::f64::consts::PI).sqrt()
        };
        acc += prior[y] * simpson(inner, -10.0, 10.0, 4000);
    }
    acc
}

/// Bayes accuracy with independent views `(signal, sd)` observed together.
/// The class-`k` statistic collapses to one coordinate with unit noise and
/// signal `sqrt(sum_m s_mk^2 / sd_m^2)`.
pub fn fused_bayes_accuracy(prior: &[f64], views: &[(&[f64], f64)]) -> f64 {
    if views.iter().any(|(_, sd)| *sd == 0.0) {
        return 1.0;
    }
    let q: Vec<f64> = (0..prior.len())
        .map(|k| views.iter().map(|(s, sd)| s[k] * s[k] / (sd * sd)).sum::<f64>().sqrt())
        .collect();
    bayes_accuracy(prior, &q, 1.0)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Class counts by largest remainder, ties to the lower class index.
pub fn quota_counts(prevalence: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = prevalence.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..prevalence.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub seed: u64,
    pub patients: Vec<String>,
    pub labels: Vec<usize>,
    /// Per modality, one latent row per patient.
    pub latent: BTreeMap<String, Vec<Vec<f64>>>,
}

pub fn patient_id(i: usize) -> String {
    format!("P{:04}", i + 1)
}

/// Draws labels (exact class quotas, shuffled) and every modality's latents.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    spec.validate()?;
    let rng = Rng::new(seed);
    let mut labels: Vec<usize> = quota_counts(&spec.prevalence, spec.patients)
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect();
    rng.stream("labels").shuffle(&mut labels);
    let c = spec.num_classes();
    let mut latent = BTreeMap::new();
    for m in &spec.modalities {
        let mut s = rng.stream(&format!("latent/{}", m.name));
        let rows = labels
            .iter()
            .map(|&y| {
                (0..c + m.extra_dims)
                    .map(|k| if k == y { m.signal[y] } else { 0.0 } + m.noise_sd * s.normal())
                    .collect()
            })
            .collect();
        latent.insert(m.name.clone(), rows);
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        seed,
        patients: (0..spec.patients).map(patient_id).collect(),
        labels,
        latent,
    })
}

fn num(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl SynthDataset {
    pub fn class_histogram(&self) -> Vec<f64> {
        let mut h = vec![0.0; self.spec.num_classes()];
        for &y in &self.labels {
            h[y] += 1.0 / self.labels.len() as f64;
        }
        h
    }

    fn features_csv(&self, name: &str) -> String {
        let rows = &self.latent[name];
        let mut out = String::from("patient");
        for k in 0..rows[0].len() {
            let _ = write!(out, ",f{k}");
        }
        out.push('\n');
        for (p, row) in self.patients.iter().zip(rows) {
            out.push_str(p);
            for v in row {
                out.push(',');
                out.push_str(&num(*v));
            }
            out.push('\n');
        }
        out
    }

    fn cnv_csv(&self, name: &str) -> String {
        let rows = &self.latent[name];
        let mut out = String::from("patient");
        for k in 0..rows[0].len() {
            let _ = write!(out, ",G{}", k + 1);
        }
        out.push('\n');
        for (p, row) in self.patients.iter().zip(rows) {
            out.push_str(p);
            for v in row {
                let _ = write!(out, ",{}", v.round().clamp(-2.0, 2.0) as i64);
            }
            out.push('\n');
        }
        out
    }

    /// Lab columns carry the latent (`50 + 10 x`); `stage` and `site` are
    /// uninformative; `sparse_note` is mostly blank.
    fn ehr_csv(&self, name: &str) -> (String, TabularSchema) {
        let rows = &self.latent[name];
        let mut s = Rng::new(self.seed).stream(&format!("ehr/{name}"));
        let stages = ["I", "II", "III", "IV"];
        let mut out = String::from("patient");
        for k in 0..rows[0].len() {
            let _ = write!(out, ",lab{k}");
        }
        out.push_str(",stage,site,sparse_note\n");
        for (p, row) in self.patients.iter().zip(rows) {
            out.push_str(p);
            for v in row {
                out.push(',');
                if s.uniform() >= self.spec.ehr_missing_rate {
                    out.push_str(&num(50.0 + 10.0 * v));
                }
            }
            let stage = stages[s.below(4)];
            let site = if s.below(2) == 0 { "left" } else { "right" };
            let note = if s.uniform() < 0.7 { "" } else if s.below(2) == 0 { "yes" } else { "no" };
            let _ = writeln!(out, ",{stage},{site},{note}");
        }
        let mut schema = TabularSchema::new();
        for k in 0..rows[0].len() {
            schema.insert(format!("lab{k}"), ColumnSpec { kind: ColumnKind::Numerical, order: None });
        }
        schema.insert(
            "stage".into(),
            ColumnSpec { kind: ColumnKind::Ordinal, order: Some(stages.iter().map(|s| s.to_string()).collect()) },
        );
        schema.insert("site".into(), ColumnSpec { kind: ColumnKind::Categorical, order: None });
        schema.insert("sparse_note".into(), ColumnSpec { kind: ColumnKind::Categorical, order: None });
        (out, schema)
    }

    /// Patches on a grid; tumour patches carry the patient latent plus patch
    /// noise, stroma patches a constant level plus the same noise.
    pub fn patch_table(&self, modality: &str, i: usize) -> Vec<PatchFeature> {
        let spec = &self.spec;
        let mut s = Rng::new(self.seed).stream(&format!("patches/{modality}/{}", self.patients[i]));
        let n = spec.patches_min + s.below(spec.patches_max - spec.patches_min + 1);
        let side = (n as f64).sqrt().ceil() as usize + 1;
        let mut cells: Vec<usize> = (0..side * side).collect();
        s.shuffle(&mut cells);
        cells.truncate(n);
        cells.sort_unstable();
        let step = spec.patch_size as f64;
        let latent = &self.latent[modality][i];
        cells
            .iter()
            .enumerate()
            .map(|(id, &cell)| {
                let stroma = s.uniform() < spec.stroma_fraction;
                PatchFeature {
                    id: id as u64,
                    x: (cell % side) as f64 * step + step / 2.0,
                    y: (cell / side) as f64 * step + step / 2.0,
                    features: latent
                        .iter()
                        .map(|v| if stroma { spec.stroma_level } else { *v } + spec.patch_noise_sd * s.normal())
                        .collect(),
                }
            })
            .collect()
    }

    /// White slide with a pink tissue block covering a random sub-rectangle.
    pub fn slide(&self, i: usize) -> RasterImage {
        let size = self.spec.slide_size;
        let mut s: Stream = Rng::new(self.seed).stream(&format!("slides/{}", self.patients[i]));
        let mut img = RasterImage::filled(size, size, &[245, 245, 245]);
        let x0 = s.below(size / 4);
        let y0 = s.below(size / 4);
        let x1 = size - s.below(size / 4);
        let y1 = size - s.below(size / 4);
        img.fill_rect(x0, y0, x1, y1, &[200, 110, 160]);
        img
    }

    /// Writes the cohort under `dir` along with `manifest.json` and
    /// `synth.json` (spec, seed and Bayes accuracies). Graph modalities point
    /// at `graphs/<name>/`, which `graph-build` fills from `patches/<name>/`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        create_dir(&dir.join("features"))?;
        let mut sources = BTreeMap::new();
        for m in &self.spec.modalities {
            write_text(&dir.join(format!("features/{}.csv", m.name)), &self.features_csv(&m.name))?;
            let src = match m.kind {
                SynthKind::Features => ModalitySource::Features { path: format!("features/{}.csv", m.name).into() },
                SynthKind::Cnv => {
                    let p = format!("{}.csv", m.name);
                    write_text(&dir.join(&p), &self.cnv_csv(&m.name))?;
                    ModalitySource::Cnv { path: p.into() }
                }
                SynthKind::Ehr => {
                    let (csv, schema) = self.ehr_csv(&m.name);
                    let p = format!("{}.csv", m.name);
                    let sp = format!("{}_schema.json", m.name);
                    write_text(&dir.join(&p), &csv)?;
                    write_text(&dir.join(&sp), &(serde_json::to_string_pretty(&schema)? + "\n"))?;
                    ModalitySource::Ehr { path: p.into(), schema: sp.into() }
                }
                SynthKind::Graph => {
                    let pdir = dir.join("patches").join(&m.name);
                    create_dir(&pdir)?;
                    create_dir(&dir.join("graphs").join(&m.name))?;
                    for (i, p) in self.patients.iter().enumerate() {
                        let mut buf = Vec::new();
                        write_patch_table(&mut buf, &self.patch_table(&m.name, i))?;
                        let path = pdir.join(format!("{p}.csv"));
                        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
                    }
                    ModalitySource::Graphs { dir: format!("graphs/{}", m.name).into() }
                }
            };
            sources.insert(m.name.clone(), src);
        }
        if self.spec.slides > 0 {
            create_dir(&dir.join("slides"))?;
            for i in 0..self.spec.slides.min(self.patients.len()) {
                self.slide(i).save_png(&dir.join(format!("slides/{}.png", self.patients[i])))?;
            }
        }
        let manifest = DatasetManifest {
            class_names: self.spec.class_names.clone(),
            patients: self.patients.clone(),
            labels: self
                .patients
                .iter()
                .zip(&self.labels)
                .map(|(p, &y)| (p.clone(), self.spec.class_names[y].clone()))
                .collect(),
            modality_order: self.spec.modalities.iter().map(|m| m.name.clone()).collect(),
            modalities: sources,
            exclude: vec![],
            root: dir.to_path_buf(),
        };
        manifest.save(&dir.join("manifest.json"))?;
        let info = serde_json::json!({
            "seed": self.seed,
            "spec": self.spec,
            "bayes_accuracy": self.spec.bayes_accuracies(),
            "fused_bayes_accuracy": self.spec.fused_bayes_accuracy(),
        });
        write_text(&dir.join("synth.json"), &(serde_json::to_string_pretty(&info)? + "\n"))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prevalence_within_two_points() {
        let d = generate(&SynthSpec::complementary(1000), 7).unwrap();
        for (h, p) in d.class_histogram().iter().zip(PAM50_PREVALENCE) {
            assert!((h - p).abs() <= 0.02, "{h} vs {p}");
        }
        assert_eq!(quota_counts(&PAM50_PREVALENCE, 1000), vec![535, 206, 181, 78]);
        assert_eq!(quota_counts(&PAM50_PREVALENCE, 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SynthSpec::complementary(50);
        assert_eq!(generate(&spec, 3).unwrap(), generate(&spec, 3).unwrap());
        assert_ne!(generate(&spec, 3).unwrap().latent, generate(&spec, 4).unwrap().latent);
    }

    /// Monte Carlo estimate of the Bayes rule's accuracy.
    fn monte_carlo(prior: &[f64], signal: &[f64], sd: f64, n: usize) -> f64 {
        let mut s = Rng::new(1).stream("mc");
        let cdf: Vec<f64> = prior.iter().scan(0.0, |a, p| { *a += p; Some(*a) }).collect();
        let mut hits = 0;
        for _ in 0..n {
            let u = s.uniform();
            let y = cdf.iter().position(|&c| u < c).unwrap_or(prior.len() - 1);
            let x: Vec<f64> = (0..prior.len()).map(|k| if k == y { signal[k] } else { 0.0 } + sd * s.normal()).collect();
            let g = |k: usize| prior[k].ln() + (signal[k] * x[k] - 0.5 * signal[k] * signal[k]) / (sd * sd);
            let pred = (0..prior.len()).max_by(|&a, &b| g(a).total_cmp(&g(b))).unwrap();
            hits += usize::from(pred == y);
        }
        hits as f64 / n as f64
    }

    #[test]
    fn closed_form_matches_simulation() {
        let spec = SynthSpec::complementary(10);
        for m in &spec.modalities {
            let exact = bayes_accuracy(&spec.prevalence, &m.signal, m.noise_sd);
            let mc = monte_carlo(&spec.prevalence, &m.signal, m.noise_sd, 200_000);
            assert!((exact - mc).abs() < 0.005, "{}: {exact} vs {mc}", m.name);
        }
        let acc = spec.bayes_accuracies();
        assert!((acc["cnv"] - 0.6810).abs() < 5e-4, "{acc:?}");
        assert!((acc["ehr"] - 0.6180).abs() < 5e-4, "{acc:?}");
        assert!((acc["wsi"] - 0.6185).abs() < 5e-4, "{acc:?}");
        assert!((spec.fused_bayes_accuracy() - 0.811).abs() < 5e-4);
    }

    #[test]
    fn two_class_symmetric_closed_form() {
        // equal priors, equal signal s, unit noise: accuracy is Phi(s / sqrt(2))
        let got = bayes_accuracy(&[0.5, 0.5], &[2.0, 2.0], 1.0);
        assert!((got - phi(2.0 / 2f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SynthSpec::complementary(100);
        s.prevalence = vec![0.5, 0.5, 0.1, 0.1];
        assert!(generate(&s, 0).is_err());
        let mut s = SynthSpec::complementary(100);
        s.modalities[0].signal.pop();
        assert!(generate(&s, 0).is_err());
    }

    #[test]
    fn written_dataset_is_byte_identical() {
        let spec = SynthSpec { slides: 1, ..SynthSpec::complementary(12) };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&spec, 7).unwrap().write(a.path()).unwrap();
        generate(&spec, 7).unwrap().write(b.path()).unwrap();
        let m = DatasetManifest::load(&a.path().join("manifest.json")).unwrap();
        assert_eq!(m.roster().unwrap().0.len(), 12);
        for rel in ["manifest.json", "synth.json", "cnv.csv", "ehr.csv", "ehr_schema.json", "patches/wsi/P0001.csv", "slides/P0001.png"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
    }
}
