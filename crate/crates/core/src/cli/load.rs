//! Reads manifest modalities into model-ready inputs.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gnn::GraphData;
use crate::graph::WsiGraph;
use crate::manifest::{DatasetManifest, ModalitySource};
use crate::pipeline::ModalityInput;
use crate::tabular::{cnv_prepare, drop_sparse_features, knn_impute, read_schema, RawTable, TabularMatrix};

use super::config::RunConfig;

/// Patients of one modality, in roster order, with their inputs.
pub struct LoadedModality {
    pub patients: Vec<String>,
    pub labels: Vec<usize>,
    pub input: ModalityInput,
    pub feature_names: Vec<String>,
}

/// Positions in `row_ids` of the roster patients that appear there.
fn align(roster: &[String], labels: &[usize], row_ids: &[String]) -> Result<(Vec<usize>, Vec<String>, Vec<usize>)> {
    let mut pos = BTreeMap::new();
    for (i, id) in row_ids.iter().enumerate() {
        if pos.insert(id.as_str(), i).is_some() {
            return Err(Error::invalid(format!("patient {id} appears twice")));
        }
    }
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut ys = Vec::new();
    for (p, &y) in roster.iter().zip(labels) {
        if let Some(&i) = pos.get(p.as_str()) {
            rows.push(i);
            ids.push(p.clone());
            ys.push(y);
        }
    }
    Ok((rows, ids, ys))
}

fn select_rows(x: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let w = x.cols();
    let mut data = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(&[rows.len(), w], data)
}

fn numeric_table(path: &Path) -> Result<(Vec<String>, Vec<String>, Tensor<f32>)> {
    let raw = RawTable::read_csv(path)?;
    let mut data = Vec::with_capacity(raw.row_ids.len() * raw.columns.len());
    for (i, row) in raw.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let v = cell.as_deref().ok_or_else(|| {
                Error::invalid(format!("{}: row {} column {} is missing", path.display(), raw.row_ids[i], raw.columns[j]))
            })?;
            data.push(v.parse::<f32>().map_err(|_| {
                Error::invalid(format!("{}: row {} column {}: '{v}' is not a number", path.display(), raw.row_ids[i], raw.columns[j]))
            })?);
        }
    }
    let x = Tensor::new(&[raw.row_ids.len(), raw.columns.len()], data)?;
    Ok((raw.row_ids, raw.columns, x))
}

/// Loads `modality` for the included patients that have it.
pub fn load_modality(manifest: &DatasetManifest, modality: &str, cfg: &RunConfig) -> Result<LoadedModality> {
    let (roster, labels) = manifest.roster()?;
    let source = manifest.source(modality)?;
    let loaded = match source {
        ModalitySource::Features { path } => {
            let (ids, names, x) = numeric_table(&manifest.resolve(path))?;
            let (rows, patients, labels) = align(&roster, &labels, &ids)?;
            LoadedModality { patients, labels, input: ModalityInput::Dense { x: select_rows(&x, &rows)?, names: names.clone() }, feature_names: names }
        }
        ModalitySource::Cnv { path } => {
            let cnv = cnv_prepare(&RawTable::read_csv(&manifest.resolve(path))?)?;
            let (rows, patients, labels) = align(&roster, &labels, &cnv.patients)?;
            let x = select_rows(&cnv.features(), &rows)?;
            LoadedModality { patients, labels, input: ModalityInput::Dense { x, names: cnv.genes.clone() }, feature_names: cnv.genes }
        }
        ModalitySource::Ehr { path, schema } => {
            let raw = RawTable::read_csv(&manifest.resolve(path))?;
            let schema = read_schema(&manifest.resolve(schema))?;
            let table = TabularMatrix::from_raw(&raw, &schema, &[])?;
            let (rows, patients, labels) = align(&roster, &labels, &table.row_ids)?;
            let table = table.select_rows(&rows);
            let table = drop_sparse_features(&table, cfg.ehr.sparse_threshold)?;
            let table = knn_impute(&table, cfg.ehr.knn_k)?;
            let names = table.columns.iter().map(|c| c.name.clone()).collect();
            LoadedModality { patients, labels, input: ModalityInput::Tabular(table), feature_names: names }
        }
        ModalitySource::Graphs { dir } => {
            let dir = manifest.resolve(dir);
            let mut graphs = Vec::new();
            let mut patients = Vec::new();
            let mut ys = Vec::new();
            for (p, &y) in roster.iter().zip(&labels) {
                let path = dir.join(format!("{p}.json"));
                if path.exists() {
                    graphs.push(GraphData::<f32>::from_graph(&WsiGraph::load(&path)?)?);
                    patients.push(p.clone());
                    ys.push(y);
                }
            }
            let width = graphs.first().map_or(0, |g| g.x.cols());
            LoadedModality {
                patients,
                labels: ys,
                input: ModalityInput::Graphs(graphs),
                feature_names: (0..width).map(|k| format!("f{k}")).collect(),
            }
        }
        ModalitySource::Logits { .. } => {
            return Err(Error::invalid(format!("modality {modality} holds precomputed logits, not model inputs")));
        }
    };
    if loaded.patients.is_empty() {
        return Err(Error::invalid(format!("modality {modality}: no included patient has data")));
    }
    Ok(loaded)
}
