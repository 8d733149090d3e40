//! Static SVG figures and JSON mirrors of the evaluation results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

use super::attribution::AttributionReport;
use super::metrics::MetricsReport;
use super::pca::PcaProjection;

const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportInput {
    pub metrics: Option<MetricsReport>,
    pub class_names: Vec<String>,
    pub attributions: Option<AttributionReport>,
    pub pca: Option<PcaProjection>,
    /// Colour index per PCA sample.
    pub pca_labels: Vec<usize>,
    /// Slide id to merged `[x0, y0, x1, y1]` regions.
    pub regions: BTreeMap<String, Vec<[f64; 4]>>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(w: u32, h: u32) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

/// Per-fold accuracy bars, summary line and confusion matrix.
pub fn metrics_svg(m: Option<&MetricsReport>, class_names: &[String]) -> String {
    let mut s = svg_open(640, 420);
    s.push_str("<text x=\"20\" y=\"24\" font-size=\"16\">Cross-validated metrics</text>\n");
    if let Some(m) = m {
        let _ = writeln!(
            s,
            "<text x=\"20\" y=\"46\">mean accuracy {:.4}, macro AUROC {:.4}</text>",
            m.mean_accuracy, m.macro_auroc
        );
        let (x0, y0, h) = (40.0, 80.0, 200.0);
        let bw = 280.0 / m.folds.len().max(1) as f64;
        let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", y0 + h, x0 + 280.0, y0 + h);
        for (i, f) in m.folds.iter().enumerate() {
            let bh = f.accuracy * h;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"><title>fold {} accuracy {:.4}</title></rect>",
                x0 + i as f64 * bw + 1.0,
                y0 + h - bh,
                (bw - 2.0).max(1.0),
                bh,
                PALETTE[0],
                f.fold,
                f.accuracy
            );
        }
        let c = m.confusion.len();
        let cell = 200.0 / c.max(1) as f64;
        let peak = m.confusion.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
        let (cx, cy) = (380.0, 80.0);
        for (i, row) in m.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let shade = 255 - (v as f64 / peak * 200.0).round() as u8;
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#999\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{v}</text>",
                    cx + j as f64 * cell,
                    cy + i as f64 * cell,
                    cx + (j as f64 + 0.5) * cell,
                    cy + (i as f64 + 0.5) * cell + 4.0
                );
            }
            let name = class_names.get(i).map_or_else(|| i.to_string(), |n| esc(n));
            let _ = writeln!(
                s,
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{name}</text>",
                cx - 4.0,
                cy + (i as f64 + 0.5) * cell + 4.0
            );
        }
        let _ = writeln!(s, "<text x=\"{cx}\" y=\"{:.2}\">rows true, columns predicted</text>", cy + 220.0);
    } else {
        s.push_str("<text x=\"20\" y=\"46\">no metrics</text>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of the first two PCA coordinates, one circle per sample.
pub fn pca_svg(p: Option<&PcaProjection>, labels: &[usize]) -> String {
    let mut s = svg_open(480, 480);
    s.push_str("<text x=\"20\" y=\"24\" font-size=\"16\">PCA of fused logits</text>\n");
    if let Some(p) = p {
        let xy: Vec<(f64, f64)> = p.coords.iter().map(|c| (c[0], c.get(1).copied().unwrap_or(0.0))).collect();
        let ext = xy.iter().map(|&(x, y)| x.abs().max(y.abs())).fold(0.0, f64::max).max(1e-12);
        let k = 200.0 / ext;
        let _ = writeln!(
            s,
            "<line x1=\"40\" y1=\"260\" x2=\"440\" y2=\"260\" stroke=\"#ccc\"/><line x1=\"240\" y1=\"60\" x2=\"240\" y2=\"460\" stroke=\"#ccc\"/>"
        );
        for (i, (x, y)) in xy.iter().enumerate() {
            let col = PALETTE[labels.get(i).copied().unwrap_or(7) % PALETTE.len()];
            let _ = writeln!(s, "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"{col}\"/>", 240.0 + x * k, 260.0 - y * k);
        }
        let ratio = |i: usize| p.explained_variance_ratio.get(i).copied().unwrap_or(0.0);
        let _ = writeln!(s, "<text x=\"20\" y=\"44\">PC1 {:.4}, PC2 {:.4} of variance</text>", ratio(0), ratio(1));
    } else {
        s.push_str("<text x=\"20\" y=\"44\">no projection</text>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

/// Writes `metrics.json`, `metrics.svg`, `pca.svg`, `attributions.json` and
/// `regions.json` into `dir`.
pub fn render_report(dir: &Path, input: &ReportInput) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let metrics = serde_json::json!({
        "class_names": input.class_names,
        "metrics": input.metrics,
        "pca": input.pca,
    });
    write(dir.join("metrics.json"), &json(&metrics)?, &mut written)?;
    write(dir.join("metrics.svg"), metrics_svg(input.metrics.as_ref(), &input.class_names).as_bytes(), &mut written)?;
    write(dir.join("pca.svg"), pca_svg(input.pca.as_ref(), &input.pca_labels).as_bytes(), &mut written)?;
    write(dir.join("attributions.json"), &json(&input.attributions)?, &mut written)?;
    write(dir.join("regions.json"), &json(&input.regions)?, &mut written)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_a_valid_skeleton() {
        let svg = metrics_svg(None, &[]);
        assert!(svg.starts_with("<?xml") && svg.trim_end().ends_with("</svg>"));
        let dir = tempfile::tempdir().unwrap();
        let files = render_report(dir.path(), &ReportInput::default()).unwrap();
        assert_eq!(files.len(), 5);
    }

    #[test]
    fn scatter_has_one_point_per_sample() {
        let data: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, (i * i) as f64 % 5.0, 1.0]).collect();
        let p = super::super::pca::pca_project(&data, 2).unwrap();
        let svg = pca_svg(Some(&p), &[0, 1, 2, 3, 0, 1, 2]);
        assert_eq!(svg.matches("<circle").count(), 7);
        assert_eq!(svg, pca_svg(Some(&p), &[0, 1, 2, 3, 0, 1, 2]));
    }
}
