//! Raw CSV tables, column schemas and the coded numeric matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A CSV table as strings. The first column holds row ids; empty fields and
/// `NA` are missing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub row_ids: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<Option<String>>>,
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == "NA"
}

impl RawTable {
    pub fn from_reader<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rdr.headers()?.clone();
        if header.is_empty() {
            return Err(Error::invalid("CSV has no header"));
        }
        let columns: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let mut row_ids = Vec::new();
        let mut cells = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            row_ids.push(rec.get(0).unwrap_or("").trim().to_string());
            cells.push(
                rec.iter()
                    .skip(1)
                    .map(|s| if is_missing(s) { None } else { Some(s.trim().to_string()) })
                    .collect(),
            );
        }
        Ok(RawTable { row_ids, columns, cells })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f)
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = Option<&str>> {
        self.cells.iter().map(move |r| r[j].as_deref())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numerical,
    Ordinal,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub kind: ColumnKind,
    /// Ordinal: values from lowest to highest rank. Categorical: vocabulary
    /// order (sorted distinct values when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<String>>,
}

/// `{column: {kind, order?}}`.
pub type TabularSchema = BTreeMap<String, ColumnSpec>;

pub fn read_schema(path: &Path) -> Result<TabularSchema> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema: TabularSchema = serde_json::from_str(&text)?;
    for (name, spec) in &schema {
        if let Some(order) = &spec.order {
            let distinct: BTreeSet<&String> = order.iter().collect();
            if distinct.len() != order.len() {
                return Err(Error::invalid(format!("column {name}: order has repeated values")));
            }
        }
    }
    Ok(schema)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    /// Ordinal ranks or categorical vocabulary; empty for numerical columns.
    pub levels: Vec<String>,
}

/// Numeric codes with an explicit missing mask. Ordinal cells hold their rank,
/// categorical cells their vocabulary index.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMatrix {
    pub row_ids: Vec<String>,
    pub columns: Vec<Column>,
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl TabularMatrix {
    pub fn new(row_ids: Vec<String>, columns: Vec<Column>, values: Vec<f64>, missing: Vec<bool>) -> Result<Self> {
        let n = row_ids.len() * columns.len();
        if values.len() != n || missing.len() != n {
            return Err(Error::shape(
                "tabular",
                format!("{} rows x {} columns vs {} values / {} mask cells", row_ids.len(), columns.len(), values.len(), missing.len()),
            ));
        }
        Ok(TabularMatrix { row_ids, columns, values, missing })
    }

    /// Numerical matrix from optional cells (row-major).
    pub fn numeric(row_ids: Vec<String>, names: &[&str], cells: &[Option<f64>]) -> Result<Self> {
        let columns = names
            .iter()
            .map(|n| Column { name: n.to_string(), kind: ColumnKind::Numerical, levels: vec![] })
            .collect();
        let values = cells.iter().map(|c| c.unwrap_or(0.0)).collect();
        let missing = cells.iter().map(Option::is_none).collect();
        Self::new(row_ids, columns, values, missing)
    }

    /// Codes a raw table. Columns absent from the schema are numerical when
    /// every observed value parses as a number and categorical otherwise.
    pub fn from_raw(raw: &RawTable, schema: &TabularSchema, exclude: &[String]) -> Result<Self> {
        let keep: Vec<usize> = (0..raw.columns.len()).filter(|&j| !exclude.contains(&raw.columns[j])).collect();
        let n = raw.row_ids.len();
        let mut columns = Vec::with_capacity(keep.len());
        let mut codes: Vec<Vec<Option<f64>>> = Vec::with_capacity(keep.len());
        for &j in &keep {
            let name = &raw.columns[j];
            let spec = match schema.get(name) {
                Some(s) => s.clone(),
                None => {
                    let numeric = raw.column(j).flatten().all(|v| v.parse::<f64>().is_ok());
                    ColumnSpec { kind: if numeric { ColumnKind::Numerical } else { ColumnKind::Categorical }, order: None }
                }
            };
            let levels = match (spec.kind, spec.order) {
                (ColumnKind::Numerical, _) => vec![],
                (_, Some(order)) => order,
                (ColumnKind::Ordinal, None) => {
                    return Err(Error::invalid(format!("ordinal column {name} needs an order")));
                }
                (ColumnKind::Categorical, None) => {
                    raw.column(j).flatten().map(str::to_string).collect::<BTreeSet<_>>().into_iter().collect()
                }
            };
            let mut col = Vec::with_capacity(n);
            for (i, cell) in raw.column(j).enumerate() {
                col.push(match cell {
                    None => None,
                    Some(v) => Some(match spec.kind {
                        ColumnKind::Numerical => v.parse::<f64>().map_err(|_| {
                            Error::invalid(format!("column {name}, row {}: '{v}' is not a number", raw.row_ids[i]))
                        })?,
                        // unseen categories code as -1 and one-hot to all zeros
                        ColumnKind::Categorical => levels.iter().position(|l| l == v).map_or(-1.0, |p| p as f64),
                        ColumnKind::Ordinal => levels.iter().position(|l| l == v).ok_or_else(|| {
                            Error::invalid(format!("column {name}, row {}: '{v}' not in ordinal order", raw.row_ids[i]))
                        })? as f64,
                    }),
                });
            }
            columns.push(Column { name: name.clone(), kind: spec.kind, levels });
            codes.push(col);
        }
        let mut values = vec![0.0; n * keep.len()];
        let mut missing = vec![false; n * keep.len()];
        let w = keep.len();
        for (c, col) in codes.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                match v {
                    Some(x) => values[i * w + c] = *x,
                    None => missing[i * w + c] = true,
                }
            }
        }
        Self::new(raw.row_ids.clone(), columns, values, missing)
    }

    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let k = i * self.cols() + j;
        (!self.missing[k]).then_some(self.values[k])
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = i * self.cols() + j;
        self.values[k] = v;
        self.missing[k] = false;
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.missing[i * self.cols() + j]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn select_columns(&self, keep: &[usize]) -> Self {
        let w = self.cols();
        let mut values = Vec::with_capacity(self.rows() * keep.len());
        let mut missing = Vec::with_capacity(self.rows() * keep.len());
        for i in 0..self.rows() {
            for &j in keep {
                values.push(self.values[i * w + j]);
                missing.push(self.missing[i * w + j]);
            }
        }
        TabularMatrix {
            row_ids: self.row_ids.clone(),
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
            values,
            missing,
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let w = self.cols();
        let mut values = Vec::with_capacity(rows.len() * w);
        let mut missing = Vec::with_capacity(rows.len() * w);
        for &i in rows {
            values.extend_from_slice(&self.values[i * w..(i + 1) * w]);
            missing.extend_from_slice(&self.missing[i * w..(i + 1) * w]);
        }
        TabularMatrix {
            row_ids: rows.iter().map(|&i| self.row_ids[i].clone()).collect(),
            columns: self.columns.clone(),
            values,
            missing,
        }
    }
}
