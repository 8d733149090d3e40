use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// Unit component vectors, largest eigenvalue first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub coords: Vec<Vec<f64>>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors as columns of a row-major matrix)`.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Principal axes of the sample covariance (denominator `n − 1`). Each
/// component is signed so its largest-magnitude coordinate is positive.
pub fn pca_project(data: &[Vec<f64>], dims: usize) -> Result<PcaProjection> {
    let n = data.len();
    let d = data.first().map_or(0, Vec::len);
    if dims == 0 || dims > d {
        return Err(Error::invalid(format!("cannot project {d}-dimensional data onto {dims} components")));
    }
    if n < dims + 1 {
        return Err(Error::invalid(format!("PCA onto {dims} components needs at least {} samples, got {n}", dims + 1)));
    }
    if data.iter().any(|r| r.len() != d) {
        return Err(Error::shape("pca", "ragged rows"));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = data.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| centred.iter().map(|r| r[i] * r[j]).sum::<f64>() / (n - 1) as f64).collect())
        .collect();
    let (vals, vecs) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(dims);
    let mut eigenvalues = Vec::with_capacity(dims);
    for &k in order.iter().take(dims) {
        let mut c: Vec<f64> = (0..d).map(|i| vecs[i][k]).collect();
        let big = (0..d).fold(0, |b, i| if c[i].abs() > c[b].abs() { i } else { b });
        if c[big] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        eigenvalues.push(vals[k].max(0.0));
    }
    let explained_variance_ratio = eigenvalues.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
    let coords = centred
        .iter()
        .map(|r| components.iter().map(|c| c.iter().zip(r).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(PcaProjection {
        mean,
        components,
        eigenvalues,
        explained_variance_ratio,
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_has_unit_first_ratio() {
        let data: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca_project(&data, 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(p.explained_variance_ratio[1].abs() < 1e-12);
    }

    #[test]
    fn diagonal_covariance_oracle() {
        // ±2 on axis 0 and ±1 on axis 1 in a balanced pattern: cov ∝ diag(4, 1)
        let data = vec![vec![2.0, 1.0], vec![-2.0, 1.0], vec![2.0, -1.0], vec![-2.0, -1.0]];
        let p = pca_project(&data, 2).unwrap();
        assert!((p.components[0][0] - 1.0).abs() < 1e-12 && p.components[0][1].abs() < 1e-12);
        assert!((p.explained_variance_ratio[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn components_are_orthonormal_and_sorted() {
        let mut s = crate::rng::Rng::new(3).stream("pca");
        let data: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|j| s.normal() * (j + 1) as f64).collect()).collect();
        let p = pca_project(&data, 3).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = p.components[a].iter().zip(&p.components[b]).map(|(x, y)| x * y).sum();
                assert!((dot - f64::from(u8::from(a == b))).abs() < 1e-9);
            }
            let big = p.components[a].iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
        assert!(p.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]));
        assert!(p.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn zero_variance_data() {
        let p = pca_project(&vec![vec![1.0, 2.0]; 5], 2).unwrap();
        assert_eq!(p.explained_variance_ratio, vec![0.0, 0.0]);
        assert_eq!(p.components.len(), 2);
        assert!(pca_project(&vec![vec![1.0, 2.0]; 2], 2).is_err());
    }
}
