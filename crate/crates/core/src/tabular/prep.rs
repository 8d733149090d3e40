//! Sparse-column removal, k-NN imputation, encoding and CNV validation.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::table::{ColumnKind, RawTable, TabularMatrix};

/// Drops columns whose missing fraction is strictly above `threshold`.
pub fn drop_sparse_features(m: &TabularMatrix, threshold: f64) -> Result<TabularMatrix> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("sparsity threshold {threshold} outside (0, 1]")));
    }
    let n = m.rows();
    let keep: Vec<usize> = (0..m.cols())
        .filter(|&j| {
            if n == 0 {
                return true;
            }
            let miss = (0..n).filter(|&i| m.is_missing(i, j)).count();
            (miss as f64) <= threshold * n as f64
        })
        .collect();
    Ok(m.select_columns(&keep))
}

/// Masked Euclidean distance between rows `a` and `b` over their mutually
/// observed columns, scaled by `n_total / n_mutual`. `None` when they share
/// no observed column.
pub fn masked_distance(m: &TabularMatrix, a: usize, b: usize) -> Option<f64> {
    let mut sq = 0.0;
    let mut mutual = 0usize;
    for j in 0..m.cols() {
        if let (Some(x), Some(y)) = (m.get(a, j), m.get(b, j)) {
            let d = match m.columns[j].kind {
                ColumnKind::Categorical => f64::from(u8::from(x != y)),
                _ => x - y,
            };
            sq += d * d;
            mutual += 1;
        }
    }
    (mutual > 0).then(|| (sq * m.cols() as f64 / mutual as f64).sqrt())
}

fn column_fill(m: &TabularMatrix, j: usize, donors: &[usize]) -> f64 {
    let vals: Vec<f64> = donors.iter().filter_map(|&i| m.get(i, j)).collect();
    match m.columns[j].kind {
        ColumnKind::Categorical => majority(&vals),
        _ => vals.iter().sum::<f64>() / vals.len() as f64,
    }
}

/// Most frequent code; ties go to the smallest code.
fn majority(vals: &[f64]) -> f64 {
    let mut sorted = vals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mut best, mut best_n) = (sorted[0], 0);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        if j > best_n {
            best = sorted[i];
            best_n = j;
        }
        i += j;
    }
    best
}

/// Fills each missing cell from the `k` nearest rows that observe that column
/// (mean for numerical/ordinal, majority vote for categorical). Neighbours are
/// ranked by [`masked_distance`], ties by row index; only originally observed
/// values are used. Rows sharing no observed column with any donor fall back
/// to the column mean (or mode).
pub fn knn_impute(m: &TabularMatrix, k: usize) -> Result<TabularMatrix> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let n = m.rows();
    for j in 0..m.cols() {
        if n > 0 && (0..n).all(|i| m.is_missing(i, j)) {
            return Err(Error::invalid(format!("column {} has no observed values", m.columns[j].name)));
        }
    }
    let mut out = m.clone();
    for i in 0..n {
        let targets: Vec<usize> = (0..m.cols()).filter(|&j| m.is_missing(i, j)).collect();
        if targets.is_empty() {
            continue;
        }
        let dist: Vec<Option<f64>> = (0..n).map(|r| if r == i { None } else { masked_distance(m, i, r) }).collect();
        for j in targets {
            let mut donors: Vec<(f64, usize)> = (0..n)
                .filter(|&r| !m.is_missing(r, j))
                .filter_map(|r| dist[r].map(|d| (d, r)))
                .collect();
            let value = if donors.is_empty() {
                let all: Vec<usize> = (0..n).collect();
                column_fill(m, j, &all)
            } else {
                donors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let near: Vec<usize> = donors.iter().take(k).map(|&(_, r)| r).collect();
                column_fill(m, j, &near)
            };
            out.set(i, j, value);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ColumnEncoding {
    /// Z-scored with training mean and standard deviation; a zero deviation
    /// maps every value to 0.
    ZScore { mean: f64, std: f64 },
    /// One output column per training-observed category code.
    OneHot { codes: Vec<i64> },
}

/// Encoding fitted on the training rows and applied unchanged elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub columns: Vec<(String, ColumnEncoding)>,
}

impl Encoder {
    pub fn fit(m: &TabularMatrix, train_rows: &[usize]) -> Result<Self> {
        if train_rows.is_empty() {
            return Err(Error::invalid("encoder needs at least one training row"));
        }
        let mut columns = Vec::with_capacity(m.cols());
        for (j, col) in m.columns.iter().enumerate() {
            let vals: Vec<f64> = train_rows
                .iter()
                .map(|&i| m.get(i, j).ok_or_else(|| missing_error(m, i, j)))
                .collect::<Result<_>>()?;
            let enc = match col.kind {
                ColumnKind::Categorical => {
                    let mut codes: Vec<i64> = vals.iter().map(|&v| v as i64).filter(|&c| c >= 0).collect();
                    codes.sort_unstable();
                    codes.dedup();
                    ColumnEncoding::OneHot { codes }
                }
                _ => {
                    let n = vals.len() as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    ColumnEncoding::ZScore { mean, std: var.sqrt() }
                }
            };
            columns.push((col.name.clone(), enc));
        }
        Ok(Encoder { columns })
    }

    pub fn output_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (name, enc) in &self.columns {
            match enc {
                ColumnEncoding::ZScore { .. } => names.push(name.clone()),
                ColumnEncoding::OneHot { codes } => names.extend(codes.iter().map(|c| format!("{name}={c}"))),
            }
        }
        names
    }

    pub fn width(&self) -> usize {
        self.output_names().len()
    }

    /// Encodes a complete matrix whose columns match the fitted ones.
    pub fn transform(&self, m: &TabularMatrix) -> Result<Tensor<f32>> {
        if m.cols() != self.columns.len() || m.columns.iter().zip(&self.columns).any(|(c, (n, _))| &c.name != n) {
            return Err(Error::shape("encode", "matrix columns differ from the fitted encoder"));
        }
        let w = self.width();
        let mut out = Vec::with_capacity(m.rows() * w);
        for i in 0..m.rows() {
            for (j, (_, enc)) in self.columns.iter().enumerate() {
                let v = m.get(i, j).ok_or_else(|| missing_error(m, i, j))?;
                match enc {
                    ColumnEncoding::ZScore { mean, std } => {
                        out.push(if *std > 1e-12 { ((v - mean) / std) as f32 } else { 0.0 });
                    }
                    ColumnEncoding::OneHot { codes } => {
                        out.extend(codes.iter().map(|&c| if c == v as i64 { 1.0f32 } else { 0.0 }));
                    }
                }
            }
        }
        Tensor::new(&[m.rows(), w], out)
    }
}

fn missing_error(m: &TabularMatrix, i: usize, j: usize) -> Error {
    Error::invalid(format!(
        "missing value at row {}, column {}; impute before encoding",
        m.row_ids[i], m.columns[j].name
    ))
}

/// Patient x gene copy-number states in `{-2, ..., 2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CnvMatrix {
    pub patients: Vec<String>,
    pub genes: Vec<String>,
    pub values: Vec<i8>,
}

impl CnvMatrix {
    pub fn features(&self) -> Tensor<f32> {
        Tensor::new(&[self.patients.len(), self.genes.len()], self.values.iter().map(|&v| f32::from(v)).collect())
            .expect("consistent CNV matrix")
    }
}

/// Validates every observed cell against the 5-state alphabet, then drops
/// genes with any missing entry.
pub fn cnv_prepare(raw: &RawTable) -> Result<CnvMatrix> {
    for (i, row) in raw.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            if let Some(v) = cell {
                match v.parse::<i64>() {
                    Ok(x) if (-2..=2).contains(&x) => {}
                    _ => {
                        return Err(Error::invalid(format!(
                            "CNV value '{v}' for gene {} and patient {} outside {{-2..2}}",
                            raw.columns[j], raw.row_ids[i]
                        )))
                    }
                }
            }
        }
    }
    let keep: Vec<usize> = (0..raw.columns.len()).filter(|&j| raw.column(j).all(|c| c.is_some())).collect();
    let mut values = Vec::with_capacity(raw.row_ids.len() * keep.len());
    for row in &raw.cells {
        for &j in &keep {
            values.push(row[j].as_deref().and_then(|v| v.parse::<i8>().ok()).expect("validated"));
        }
    }
    Ok(CnvMatrix {
        patients: raw.row_ids.clone(),
        genes: keep.iter().map(|&j| raw.columns[j].clone()).collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn sparse_boundary_is_strict() {
        // a: 75% missing, kept; b: 76% missing, dropped
        let n = 100;
        let mut cells = Vec::new();
        for i in 0..n {
            cells.push(if i < 75 { None } else { Some(1.0) });
            cells.push(if i < 76 { None } else { Some(1.0) });
            cells.push(Some(i as f64));
        }
        let m = TabularMatrix::numeric(ids(n), &["a", "b", "c"], &cells).unwrap();
        let d = drop_sparse_features(&m, 0.75).unwrap();
        let names: Vec<&str> = d.columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec!["a", "c"]);
        assert_eq!(drop_sparse_features(&d, 0.75).unwrap(), d);
    }

    #[test]
    fn all_columns_dropped_keeps_rows() {
        let m = TabularMatrix::numeric(ids(2), &["a"], &[None, None]).unwrap();
        let d = drop_sparse_features(&m, 0.75).unwrap();
        assert_eq!(d.cols(), 0);
        assert_eq!(d.row_ids, ids(2));
    }

    #[test]
    fn knn_small_cases() {
        // row 0 missing col 1; row 1 is closest on col 0
        let cells = [Some(0.0), None, Some(0.1), Some(7.0), Some(5.0), Some(9.0)];
        let m = TabularMatrix::numeric(ids(3), &["a", "b"], &cells).unwrap();
        assert_eq!(knn_impute(&m, 1).unwrap().get(0, 1), Some(7.0));

        let cells = [Some(0.0), None, Some(1.0), Some(2.0), Some(-1.0), Some(4.0), Some(50.0), Some(100.0)];
        let m = TabularMatrix::numeric(ids(4), &["a", "b"], &cells).unwrap();
        assert_eq!(knn_impute(&m, 2).unwrap().get(0, 1), Some(3.0));
    }

    #[test]
    fn knn_no_mutual_falls_back_to_column_mean() {
        let cells = [Some(1.0), None, None, Some(4.0), None, Some(6.0)];
        let m = TabularMatrix::numeric(ids(3), &["a", "b"], &cells).unwrap();
        let out = knn_impute(&m, 5).unwrap();
        assert_eq!(out.get(0, 1), Some(5.0));
    }

    #[test]
    fn knn_all_missing_column_errors() {
        let m = TabularMatrix::numeric(ids(2), &["a", "b"], &[Some(1.0), None, Some(2.0), None]).unwrap();
        assert!(knn_impute(&m, 1).is_err());
    }

    /// Exhaustive oracle: for each missing cell, compute every candidate
    /// distance from scratch, sort, average the first k donors.
    fn oracle(rows: &[Vec<Option<f64>>], k: usize) -> Vec<Vec<f64>> {
        let n = rows.len();
        let d = rows[0].len();
        let mut out = vec![vec![0.0; d]; n];
        for i in 0..n {
            for j in 0..d {
                if let Some(v) = rows[i][j] {
                    out[i][j] = v;
                    continue;
                }
                let mut cands = Vec::new();
                for r in 0..n {
                    if r == i || rows[r][j].is_none() {
                        continue;
                    }
                    let mut s = 0.0;
                    let mut c = 0;
                    for q in 0..d {
                        if let (Some(a), Some(b)) = (rows[i][q], rows[r][q]) {
                            s += (a - b).powi(2);
                            c += 1;
                        }
                    }
                    if c > 0 {
                        cands.push(((s * d as f64 / c as f64).sqrt(), r));
                    }
                }
                cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let take: Vec<f64> = cands.iter().take(k).map(|&(_, r)| rows[r][j].unwrap()).collect();
                out[i][j] = take.iter().sum::<f64>() / take.len() as f64;
            }
        }
        out
    }

    #[test]
    fn knn_matches_exhaustive_oracle_on_random_fixtures() {
        let mut s = Rng::new(11).stream("knn");
        for _ in 0..50 {
            let rows: Vec<Vec<Option<f64>>> = (0..6)
                .map(|_| (0..4).map(|_| if s.uniform() < 0.25 { None } else { Some((s.normal() * 3.0).round()) }).collect())
                .collect();
            let ok = (0..4).all(|j| rows.iter().any(|r| r[j].is_some()))
                && rows.iter().enumerate().all(|(i, r)| {
                    (0..4).all(|j| {
                        r[j].is_some()
                            || rows.iter().enumerate().any(|(q, o)| q != i && o[j].is_some() && (0..4).any(|c| r[c].is_some() && o[c].is_some()))
                    })
                });
            if !ok {
                continue;
            }
            let flat: Vec<Option<f64>> = rows.concat();
            let m = TabularMatrix::numeric(ids(6), &["a", "b", "c", "d"], &flat).unwrap();
            let got = knn_impute(&m, 2).unwrap();
            let want = oracle(&rows, 2);
            for i in 0..6 {
                for j in 0..4 {
                    assert!((got.get(i, j).unwrap() - want[i][j]).abs() < 1e-12);
                    if let Some(v) = rows[i][j] {
                        assert_eq!(got.get(i, j), Some(v));
                    }
                }
            }
        }
    }

    #[test]
    fn encode_one_hot_and_zscore() {
        let raw = RawTable::from_reader("id,x,c\na,1,u\nb,2,v\nc,3,w\nd,4,u\n".as_bytes()).unwrap();
        let m = TabularMatrix::from_raw(&raw, &Default::default(), &[]).unwrap();
        let enc = Encoder::fit(&m, &[0, 1, 2, 3]).unwrap();
        assert_eq!(enc.width(), 4);
        let t = enc.transform(&m).unwrap();
        for i in 0..4 {
            assert_eq!(t.row(i)[1..].iter().sum::<f32>(), 1.0);
        }
        let col: Vec<f64> = (0..4).map(|i| f64::from(t.row(i)[0])).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn encode_constant_column_and_unseen_category() {
        let raw = RawTable::from_reader("id,x,c\na,5,u\nb,5,v\nc,5,w\n".as_bytes()).unwrap();
        let m = TabularMatrix::from_raw(&raw, &Default::default(), &[]).unwrap();
        let enc = Encoder::fit(&m, &[0, 1]).unwrap();
        let t = enc.transform(&m).unwrap();
        assert!(t.data().chunks(3).all(|r| r[0] == 0.0));
        assert_eq!(t.row(2), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cnv_rules() {
        let raw = RawTable::from_reader("id,g1,g2,g3\np1,0,1,-2\np2,2,,0\n".as_bytes()).unwrap();
        let c = cnv_prepare(&raw).unwrap();
        assert_eq!(c.genes, vec!["g1", "g3"]);
        assert_eq!(c.values, vec![0, -2, 2, 0]);
        let bad = RawTable::from_reader("id,g1\np1,3\n".as_bytes()).unwrap();
        let msg = cnv_prepare(&bad).unwrap_err().to_string();
        assert!(msg.contains("g1") && msg.contains("p1"), "{msg}");
        let full = RawTable::from_reader("id,g1\np1,1\n".as_bytes()).unwrap();
        assert_eq!(cnv_prepare(&full).unwrap().genes, vec!["g1"]);
    }
}
