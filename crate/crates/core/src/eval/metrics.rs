use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape("accuracy", format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    Ok(preds.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64)
}

/// `m[true][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != labels.len() {
        return Err(Error::shape("confusion", format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::invalid(format!("class index outside 0..{classes}")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocReport {
    /// `None` for classes without both positives and negatives.
    pub per_class: Vec<Option<f64>>,
    pub macro_auroc: f64,
    pub skipped: Vec<usize>,
}

/// Ascending midranks (1-based, ties share their average rank).
fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest AUROC per class from the rank-sum statistic; the macro value
/// averages the evaluable classes.
pub fn macro_auroc(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<AurocReport> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", format!("{} score rows vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|r| r.len() != classes) {
        return Err(Error::shape("auroc", format!("score rows must have {classes} entries")));
    }
    if scores.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::domain("auroc", "NaN score"));
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut skipped = Vec::new();
    for c in 0..classes {
        let pos = labels.iter().filter(|&&y| y == c).count();
        let neg = labels.len() - pos;
        if pos == 0 || neg == 0 {
            per_class.push(None);
            skipped.push(c);
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let ranks = midranks(&col);
        let rsum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == c).map(|(r, _)| r).sum();
        let u = rsum - (pos * (pos + 1)) as f64 / 2.0;
        per_class.push(Some(u / (pos as f64 * neg as f64)));
    }
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::invalid("AUROC undefined: every label belongs to one class"));
    }
    Ok(AurocReport {
        per_class,
        macro_auroc: vals.iter().sum::<f64>() / vals.len() as f64,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub accuracy: f64,
    pub macro_auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub mean_accuracy: f64,
    /// Over the pooled out-of-fold predictions.
    pub per_class_auroc: Vec<Option<f64>>,
    pub macro_auroc: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    /// `fold_of[i]` names the test fold of sample `i`; `probs` are its
    /// out-of-fold class probabilities.
    pub fn from_oof(probs: &[Vec<f64>], labels: &[usize], fold_of: &[usize], k: usize, classes: usize) -> Result<Self> {
        if fold_of.len() != labels.len() {
            return Err(Error::shape("metrics", "fold assignment length"));
        }
        let preds: Vec<usize> = probs
            .iter()
            .map(|p| (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b }))
            .collect();
        let mut folds = Vec::with_capacity(k);
        for f in 0..k {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
            let fp: Vec<usize> = rows.iter().map(|&i| preds[i]).collect();
            let fl: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let fs: Vec<Vec<f64>> = rows.iter().map(|&i| probs[i].clone()).collect();
            folds.push(FoldMetrics {
                fold: f,
                accuracy: accuracy(&fp, &fl)?,
                macro_auroc: macro_auroc(&fs, &fl, classes).ok().map(|r| r.macro_auroc),
            });
        }
        let auc = macro_auroc(probs, labels, classes)?;
        Ok(MetricsReport {
            mean_accuracy: folds.iter().map(|f| f.accuracy).sum::<f64>() / k as f64,
            folds,
            per_class_auroc: auc.per_class,
            macro_auroc: auc.macro_auroc,
            confusion: confusion_matrix(&preds, labels, classes)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 1, 1, 0], &[1, 1, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    fn pairwise(scores: &[Vec<f64>], labels: &[usize], c: usize) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, a) in scores.iter().enumerate() {
            for (j, b) in scores.iter().enumerate() {
                if labels[i] == c && labels[j] != c {
                    den += 1.0;
                    num += if a[c] > b[c] { 1.0 } else if a[c] == b[c] { 0.5 } else { 0.0 };
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn auroc_conventions() {
        let s: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, -(i as f64)]).collect();
        let y = [1, 1, 1, 0, 0, 0];
        let r = macro_auroc(&s, &y, 2).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
        let flat = vec![vec![0.5, 0.5]; 6];
        assert_eq!(macro_auroc(&flat, &y, 2).unwrap().macro_auroc, 0.5);
        assert!(macro_auroc(&flat, &[0; 6], 2).is_err());
    }

    #[test]
    fn auroc_matches_pairwise_oracle() {
        let mut s = crate::rng::Rng::new(4).stream("auc");
        for _ in 0..200 {
            let c = 3;
            let scores: Vec<Vec<f64>> = (0..8).map(|_| (0..c).map(|_| s.below(4) as f64 / 4.0).collect()).collect();
            let labels: Vec<usize> = (0..8).map(|_| s.below(c)).collect();
            let Ok(r) = macro_auroc(&scores, &labels, c) else { continue };
            for k in 0..c {
                match (r.per_class[k], pairwise(&scores, &labels, k)) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                    (None, None) => {}
                    other => panic!("{other:?}"),
                }
            }
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut s = crate::rng::Rng::new(5).stream("auc");
        let scores: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| s.normal()).collect()).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 4).collect();
        let t: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|v| v.exp() * 3.0 + 1.0).collect()).collect();
        assert_eq!(macro_auroc(&scores, &labels, 4).unwrap(), macro_auroc(&t, &labels, 4).unwrap());
    }

    #[test]
    fn report_from_oof() {
        let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.3, 0.7]];
        let r = MetricsReport::from_oof(&probs, &[0, 1, 1, 1], &[0, 0, 1, 1], 2, 2).unwrap();
        assert_eq!(r.folds.len(), 2);
        assert_eq!(r.folds[0].accuracy, 1.0);
        assert_eq!(r.folds[1].accuracy, 0.5);
        assert_eq!(r.confusion, vec![vec![1, 0], vec![1, 2]]);
        let mean: f64 = r.per_class_auroc.iter().flatten().sum::<f64>() / 2.0;
        assert_eq!(r.macro_auroc, mean);
    }
}
