//! Patch-to-patient pooling of classifier outputs and intermediate vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::logitset::softmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputPooling {
    Majority,
    MeanLogits,
    MeanProbs,
}

impl OutputPooling {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(Self::Majority),
            "mean_logits" => Ok(Self::MeanLogits),
            "mean_probs" => Ok(Self::MeanProbs),
            _ => Err(Error::invalid(format!("unknown output pooling '{s}' (majority, mean_logits, mean_probs)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntermediatePooling {
    Mean,
    DistanceWeighted,
}

impl IntermediatePooling {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "distance_weighted" => Ok(Self::DistanceWeighted),
            _ => Err(Error::invalid(format!("unknown intermediate pooling '{s}' (mean, distance_weighted)"))),
        }
    }
}

pub const DISTANCE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledPrediction {
    pub patient: String,
    pub variant: OutputPooling,
    /// Log-probabilities for the majority and mean-probability variants.
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate: Option<Vec<f64>>,
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

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn log_probs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| v.max(1e-300).ln()).collect()
}

/// Pools per-patch logits into one patient prediction.
///
/// Majority vote breaks ties by the higher mean probability and then the
/// lower class index; its probability vector holds the vote fractions.
pub fn pool_outputs(patient: &str, patch_logits: &[Vec<f64>], variant: OutputPooling) -> Result<PooledPrediction> {
    let c = patch_logits.first().map(Vec::len).unwrap_or(0);
    if c == 0 {
        return Err(Error::invalid(format!("patient {patient}: no patch outputs to pool")));
    }
    if patch_logits.iter().any(|r| r.len() != c) {
        return Err(Error::shape("pool_outputs", format!("patient {patient}: unequal class counts")));
    }
    let probs: Vec<Vec<f64>> = patch_logits.iter().map(|l| softmax(l)).collect();
    let (logits, probs, class) = match variant {
        OutputPooling::MeanLogits => {
            let l = mean_rows(patch_logits);
            let p = softmax(&l);
            let k = argmax(&l);
            (l, p, k)
        }
        OutputPooling::MeanProbs => {
            let mut p = mean_rows(&probs);
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let k = argmax(&p);
            (log_probs(&p), p, k)
        }
        OutputPooling::Majority => {
            let mut votes = vec![0usize; c];
            for p in &probs {
                votes[argmax(p)] += 1;
            }
            let mean_p = mean_rows(&probs);
            let mut k = 0;
            for j in 1..c {
                if votes[j] > votes[k] || (votes[j] == votes[k] && mean_p[j] > mean_p[k]) {
                    k = j;
                }
            }
            let n = probs.len() as f64;
            let p: Vec<f64> = votes.iter().map(|&v| v as f64 / n).collect();
            (log_probs(&p), p, k)
        }
    };
    Ok(PooledPrediction {
        patient: patient.to_string(),
        variant,
        logits,
        probs,
        class,
        intermediate: None,
    })
}

/// Mean, or inverse-distance-to-centroid weighted mean, of patch vectors.
pub fn pool_intermediate(vectors: &[Vec<f64>], variant: IntermediatePooling) -> Result<Vec<f64>> {
    let d = vectors.first().map(Vec::len).ok_or_else(|| Error::invalid("no vectors to pool"))?;
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::shape("pool_intermediate", "unequal vector widths"));
    }
    let centroid = mean_rows(vectors);
    match variant {
        IntermediatePooling::Mean => Ok(centroid),
        IntermediatePooling::DistanceWeighted => {
            let raw: Vec<f64> = vectors
                .iter()
                .map(|v| {
                    let dist = v.iter().zip(&centroid).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    1.0 / (dist + DISTANCE_EPS)
                })
                .collect();
            let total: f64 = raw.iter().sum();
            let mut out = vec![0.0; d];
            for (v, w) in vectors.iter().zip(&raw) {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += w / total * x;
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_vote_and_ties() {
        let l = vec![vec![2.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0]];
        assert_eq!(pool_outputs("p", &l, OutputPooling::Majority).unwrap().class, 0);
        // one vote each; class 1 has the higher mean probability
        let l = vec![vec![0.1, 0.0], vec![0.0, 3.0]];
        assert_eq!(pool_outputs("p", &l, OutputPooling::Majority).unwrap().class, 1);
        // full tie goes to the lower index
        let l = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(pool_outputs("p", &l, OutputPooling::Majority).unwrap().class, 0);
    }

    #[test]
    fn mean_probs_example() {
        let l = vec![vec![0.6f64.ln(), 0.4f64.ln()], vec![0.2f64.ln(), 0.8f64.ln()]];
        let p = pool_outputs("p", &l, OutputPooling::MeanProbs).unwrap();
        assert!((p.probs[0] - 0.4).abs() < 1e-12 && (p.probs[1] - 0.6).abs() < 1e-12);
        assert_eq!(p.class, 1);
    }

    #[test]
    fn single_patch_and_identical_patches() {
        let l = vec![vec![0.3, -1.2, 0.5]];
        let m = pool_outputs("p", &l, OutputPooling::MeanLogits).unwrap();
        assert_eq!(m.logits, l[0]);
        let same = vec![l[0].clone(); 4];
        let a = pool_outputs("p", &same, OutputPooling::MeanLogits).unwrap();
        let b = pool_outputs("p", &same, OutputPooling::MeanProbs).unwrap();
        let c = pool_outputs("p", &same, OutputPooling::Majority).unwrap();
        assert_eq!(a.class, b.class);
        assert_eq!(b.class, c.class);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(pool_outputs("p", &[], OutputPooling::MeanLogits).is_err());
    }

    #[test]
    fn intermediate_pooling() {
        let v = vec![vec![1.0, 2.0]; 3];
        for var in [IntermediatePooling::Mean, IntermediatePooling::DistanceWeighted] {
            let p = pool_intermediate(&v, var).unwrap();
            assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] - 2.0).abs() < 1e-12);
        }
        let sym = vec![vec![1.0, 0.0], vec![-1.0, 2.0]];
        assert_eq!(
            pool_intermediate(&sym, IntermediatePooling::DistanceWeighted).unwrap(),
            pool_intermediate(&sym, IntermediatePooling::Mean).unwrap()
        );
    }

    #[test]
    fn distance_weighted_matches_direct_formula() {
        let mut s = crate::rng::Rng::new(5).stream("v");
        let v: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| s.normal()).collect()).collect();
        let got = pool_intermediate(&v, IntermediatePooling::DistanceWeighted).unwrap();
        let c: Vec<f64> = (0..3).map(|j| v.iter().map(|r| r[j]).sum::<f64>() / 5.0).collect();
        let inv: Vec<f64> = v
            .iter()
            .map(|r| 1.0 / ((0..3).map(|j| (r[j] - c[j]).powi(2)).sum::<f64>().sqrt() + 1e-8))
            .collect();
        let z: f64 = inv.iter().sum();
        for j in 0..3 {
            let want: f64 = (0..5).map(|k| inv[k] / z * v[k][j]).sum();
            assert!((got[j] - want).abs() < 1e-12);
        }
    }
}
