//! Class-imbalance handling: oversampling, stratified batches, loss weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ImbalanceStrategy {
    #[default]
    None,
    Oversample,
    StratifiedBatches,
    ClassWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RebalancePlan {
    /// Positions into the label slice, originals first, then duplicates.
    Oversample(Vec<usize>),
    /// `n / (C · n_c)` per class.
    ClassWeights(Vec<f64>),
    /// Batches of positions whose class mix tracks the global mix.
    StratifiedBatches(Vec<Vec<usize>>),
    Unchanged,
}

pub fn class_counts(labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::invalid(format!("label {y} outside 0..{num_classes}")));
        }
        counts[y] += 1;
    }
    Ok(counts)
}

fn require_all_classes(counts: &[usize]) -> Result<()> {
    let empty: Vec<usize> = counts.iter().enumerate().filter(|(_, &c)| c == 0).map(|(i, _)| i).collect();
    if empty.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!("classes without samples: {empty:?}")))
    }
}

/// `n / (C · n_c)`.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let counts = class_counts(labels, num_classes)?;
    require_all_classes(&counts)?;
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (num_classes as f64 * c as f64)).collect())
}

/// Duplicates minority samples round-robin until every class matches the
/// largest one.
pub fn oversample(labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let counts = class_counts(labels, num_classes)?;
    require_all_classes(&counts)?;
    let target = *counts.iter().max().unwrap_or(&0);
    let mut plan: Vec<usize> = (0..labels.len()).collect();
    for (c, &have) in counts.iter().enumerate() {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        plan.extend(members.iter().cycle().take(target - have));
    }
    Ok(plan)
}

/// Splits positions into `ceil(n / batch_size)` batches, dealing each
/// (shuffled) class round-robin so per-batch class counts differ from the
/// global proportion by at most one sample.
pub fn stratified_batches(
    labels: &[usize],
    num_classes: usize,
    batch_size: usize,
    s: &mut Stream,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let counts = class_counts(labels, num_classes)?;
    require_all_classes(&counts)?;
    let nb = labels.len().div_ceil(batch_size).max(1);
    let mut batches = vec![Vec::new(); nb];
    let mut slot = 0;
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        s.shuffle(&mut members);
        for i in members {
            batches[slot % nb].push(i);
            slot += 1;
        }
    }
    for b in &mut batches {
        s.shuffle(b);
    }
    Ok(batches)
}

pub fn rebalance(
    labels: &[usize],
    num_classes: usize,
    strategy: ImbalanceStrategy,
    batch_size: usize,
    s: &mut Stream,
) -> Result<RebalancePlan> {
    Ok(match strategy {
        ImbalanceStrategy::None => RebalancePlan::Unchanged,
        ImbalanceStrategy::Oversample => RebalancePlan::Oversample(oversample(labels, num_classes)?),
        ImbalanceStrategy::ClassWeights => RebalancePlan::ClassWeights(class_weights(labels, num_classes)?),
        ImbalanceStrategy::StratifiedBatches => {
            RebalancePlan::StratifiedBatches(stratified_batches(labels, num_classes, batch_size, s)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn oversample_equalises_counts() {
        let labels: Vec<usize> = [vec![0; 8], vec![1; 2]].concat();
        let plan = oversample(&labels, 2).unwrap();
        let counts = class_counts(&plan.iter().map(|&i| labels[i]).collect::<Vec<_>>(), 2).unwrap();
        assert_eq!(counts, vec![8, 8]);
    }

    #[test]
    fn weights_formula() {
        let labels: Vec<usize> = [vec![0; 75], vec![1; 25]].concat();
        let w = class_weights(&labels, 2).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_class_errors() {
        assert!(class_weights(&[0, 0, 2], 3).is_err());
        assert!(oversample(&[0, 0], 2).is_err());
    }

    proptest! {
        #[test]
        fn oversampling_only_duplicates(labels in proptest::collection::vec(0usize..3, 3..40)) {
            prop_assume!((0..3).all(|c| labels.contains(&c)));
            let plan = oversample(&labels, 3).unwrap();
            let mut distinct: Vec<usize> = plan.clone();
            distinct.sort();
            distinct.dedup();
            prop_assert_eq!(distinct, (0..labels.len()).collect::<Vec<_>>());
        }

        #[test]
        fn stratified_batches_track_global_mix(
            labels in proptest::collection::vec(0usize..4, 8..120),
            bs in 2usize..17,
            seed in any::<u64>(),
        ) {
            prop_assume!((0..4).all(|c| labels.contains(&c)));
            let mut s = Rng::new(seed).stream("b");
            let batches = stratified_batches(&labels, 4, bs, &mut s).unwrap();
            let nb = batches.len() as f64;
            let counts = class_counts(&labels, 4).unwrap();
            let mut seen: Vec<usize> = batches.concat();
            seen.sort();
            prop_assert_eq!(seen, (0..labels.len()).collect::<Vec<_>>());
            for b in &batches {
                let bc = class_counts(&b.iter().map(|&i| labels[i]).collect::<Vec<_>>(), 4).unwrap();
                for c in 0..4 {
                    let expect = counts[c] as f64 / nb;
                    prop_assert!((bc[c] as f64 - expect).abs() <= 1.0);
                }
            }
        }
    }
}
