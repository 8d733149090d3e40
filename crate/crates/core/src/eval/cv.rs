use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Sample-index folds. Callers index by patient, so every sample of a
/// patient shares its fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvSplit {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Each class is shuffled and dealt round-robin over the folds, continuing
/// the deal where the previous class stopped so fold sizes differ by at most
/// one.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<CvSplit> {
    if k < 2 {
        return Err(Error::invalid(format!("fold count {k} must be at least 2")));
    }
    let c = labels.iter().max().map_or(0, |&m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let small: Vec<String> = members
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty() && m.len() < k)
        .map(|(y, m)| format!("class {y} ({} samples)", m.len()))
        .collect();
    if !small.is_empty() {
        return Err(Error::invalid(format!("classes smaller than {k} folds: {}", small.join(", "))));
    }
    let mut s = Rng::new(seed).stream("cv");
    let mut test: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut next = 0;
    for m in &mut members {
        s.shuffle(m);
        for &i in m.iter() {
            test[next].push(i);
            next = (next + 1) % k;
        }
    }
    let folds = test
        .into_iter()
        .map(|mut t| {
            t.sort_unstable();
            let mut in_test = vec![false; labels.len()];
            t.iter().for_each(|&i| in_test[i] = true);
            let train = (0..labels.len()).filter(|&i| !in_test[i]).collect();
            Fold { train, test: t }
        })
        .collect();
    Ok(CvSplit { k, seed, folds })
}
