//! Thresholded-kernel dissimilarity and average-linkage agglomeration.

use crate::error::{Error, Result};

use super::{GraphBuildConfig, PatchFeature};

/// 1 beyond the spatial threshold, else `1 − exp(−γ‖fa − fb‖)`.
pub fn pairwise_dissimilarity(a: &PatchFeature, b: &PatchFeature, cfg: &GraphBuildConfig) -> Result<f64> {
    if a.features.len() != b.features.len() {
        return Err(Error::shape(
            "dissimilarity",
            format!("feature widths {} and {}", a.features.len(), b.features.len()),
        ));
    }
    if a.features.iter().chain(&b.features).any(|v| v.is_nan()) {
        return Err(Error::domain("dissimilarity", format!("NaN feature in patch {} or {}", a.id, b.id)));
    }
    let spatial = (a.x - b.x).hypot(a.y - b.y);
    if spatial > cfg.spatial_threshold {
        return Ok(1.0);
    }
    let fd = a.features.iter().zip(&b.features).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    Ok(1.0 - (-cfg.gamma * fd).exp())
}

/// Cluster label per patch (labels are arbitrary; see [`super::build_nodes`]
/// for the canonical node order).
///
/// Clusters merge while the smallest average-linkage distance is strictly
/// below the cut-off. Equal distances go to the pair with the smallest
/// `(min member id, min member id)` key. Linkage is kept as pairwise sums
/// (Lance–Williams in sum form) with a cached nearest neighbour per cluster.
pub fn agglomerate_average_linkage(patches: &[PatchFeature], cfg: &GraphBuildConfig) -> Result<Vec<usize>> {
    let n = patches.len();
    if n == 0 {
        return Err(Error::invalid("no patches to cluster"));
    }
    let mut sums = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = pairwise_dissimilarity(&patches[i], &patches[j], cfg)?;
            sums[i * n + j] = d;
            sums[j * n + i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut key: Vec<u64> = patches.iter().map(|p| p.id).collect();
    let mut active = vec![true; n];
    let mut label: Vec<usize> = (0..n).collect();

    let avg = |sums: &[f64], size: &[usize], i: usize, j: usize| sums[i * n + j] / (size[i] * size[j]) as f64;
    let nearest = |sums: &[f64], size: &[usize], key: &[u64], active: &[bool], i: usize| -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if j == i || !active[j] {
                continue;
            }
            let d = avg(sums, size, i, j);
            best = match best {
                Some((bd, bj)) if bd < d || (bd == d && key[bj] < key[j]) => Some((bd, bj)),
                _ => Some((d, j)),
            };
        }
        best
    };
    let mut nn: Vec<Option<(f64, usize)>> = (0..n).map(|i| nearest(&sums, &size, &key, &active, i)).collect();

    loop {
        let mut pick: Option<(f64, (u64, u64), usize, usize)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            if let Some((d, j)) = nn[i] {
                let pair = (key[i].min(key[j]), key[i].max(key[j]));
                let better = match pick {
                    None => true,
                    Some((pd, pp, _, _)) => d < pd || (d == pd && pair < pp),
                };
                if better {
                    pick = Some((d, pair, i, j));
                }
            }
        }
        let Some((d, _, i, j)) = pick else { break };
        if d >= cfg.linkage_cutoff {
            break;
        }
        let (a, b) = if key[i] < key[j] { (i, j) } else { (j, i) };
        for k in 0..n {
            if active[k] && k != a && k != b {
                let s = sums[a * n + k] + sums[b * n + k];
                sums[a * n + k] = s;
                sums[k * n + a] = s;
            }
        }
        size[a] += size[b];
        key[a] = key[a].min(key[b]);
        active[b] = false;
        nn[b] = None;
        for l in label.iter_mut() {
            if *l == b {
                *l = a;
            }
        }
        nn[a] = nearest(&sums, &size, &key, &active, a);
        for k in 0..n {
            if !active[k] || k == a {
                continue;
            }
            match nn[k] {
                Some((_, t)) if t == a || t == b => nn[k] = nearest(&sums, &size, &key, &active, k),
                Some((bd, bt)) => {
                    let d = avg(&sums, &size, k, a);
                    if d < bd || (d == bd && key[a] < key[bt]) {
                        nn[k] = Some((d, a));
                    }
                }
                None => nn[k] = nearest(&sums, &size, &key, &active, k),
            }
        }
    }
    Ok(label)
}
