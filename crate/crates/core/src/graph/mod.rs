//! Patch tables to slide graphs: clustering, node averaging, Delaunay edges.

pub mod cluster;
pub mod delaunay;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cluster::{agglomerate_average_linkage, pairwise_dissimilarity};
pub use delaunay::triangulate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchFeature {
    pub id: u64,
    /// Patch centre in slide pixels.
    pub x: f64,
    pub y: f64,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphBuildConfig {
    pub gamma: f64,
    pub spatial_threshold: f64,
    pub linkage_cutoff: f64,
    pub edge_threshold: f64,
    /// Side of a source patch; node boxes extend member centres by half of it.
    pub patch_size: f64,
}

impl Default for GraphBuildConfig {
    fn default() -> Self {
        GraphBuildConfig {
            gamma: 0.001,
            spatial_threshold: 2000.0,
            linkage_cutoff: 0.8,
            edge_threshold: 4000.0,
            patch_size: 512.0,
        }
    }
}

impl GraphBuildConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma, self.spatial_threshold, self.linkage_cutoff, self.edge_threshold, self.patch_size];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("graph config values must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub features: Vec<f64>,
    pub members: Vec<u64>,
    /// `[x0, y0, x1, y1]` covering the member patches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsiGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<[usize; 2]>,
    pub config: GraphBuildConfig,
}

impl WsiGraph {
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes.len()];
        for e in &self.edges {
            d[e[0]] += 1;
            d[e[1]] += 1;
        }
        d
    }

    pub fn feature_width(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.features.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        let w = self.feature_width();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.features.len() != w {
                return Err(Error::invalid(format!("node {i} has {} features, expected {w}", node.features.len())));
            }
        }
        for e in &self.edges {
            if e[0] >= n || e[1] >= n || e[0] == e[1] {
                return Err(Error::invalid(format!("bad edge {e:?} for {n} nodes")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let g: WsiGraph = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: 0,
            msg: format!("{}: {e}", path.display()),
        })?;
        g.validate()?;
        Ok(g)
    }
}

/// CSV with header `patch_id,x,y,f0..fK`.
pub fn read_patch_table<R: std::io::Read>(r: R) -> Result<Vec<PatchFeature>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.len() < 3 || &header[0] != "patch_id" || &header[1] != "x" || &header[2] != "y" {
        return Err(Error::invalid("patch table header must start with patch_id,x,y"));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s.trim().parse().map_err(|_| Error::invalid(format!("row {}: '{s}' is not a number", line + 1)))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::invalid(format!("row {}: non-finite value", line + 1)))
            }
        };
        let id: u64 = rec[0].trim().parse().map_err(|_| Error::invalid(format!("row {}: bad patch_id", line + 1)))?;
        out.push(PatchFeature {
            id,
            x: num(&rec[1])?,
            y: num(&rec[2])?,
            features: rec.iter().skip(3).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

pub fn write_patch_table<W: std::io::Write>(w: W, patches: &[PatchFeature]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let k = patches.first().map_or(0, |p| p.features.len());
    let mut header = vec!["patch_id".to_string(), "x".into(), "y".into()];
    header.extend((0..k).map(|i| format!("f{i}")));
    wtr.write_record(&header)?;
    for p in patches {
        let mut row = vec![p.id.to_string(), p.x.to_string(), p.y.to_string()];
        row.extend(p.features.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<patch table>", e))
}

/// Averages features and coordinates per cluster. Nodes are ordered by their
/// smallest member id.
pub fn build_nodes(patches: &[PatchFeature], assignment: &[usize], cfg: &GraphBuildConfig) -> Result<Vec<GraphNode>> {
    if assignment.len() != patches.len() {
        return Err(Error::invalid(format!("{} labels for {} patches", assignment.len(), patches.len())));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in assignment.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let mut clusters: Vec<Vec<usize>> = groups.into_values().collect();
    for c in &mut clusters {
        c.sort_by_key(|&i| patches[i].id);
    }
    clusters.sort_by_key(|c| patches[c[0]].id);
    let half = cfg.patch_size / 2.0;
    let mut nodes = Vec::with_capacity(clusters.len());
    for (id, members) in clusters.into_iter().enumerate() {
        if members.is_empty() {
            return Err(Error::invalid("empty cluster"));
        }
        let m = members.len() as f64;
        let w = patches[members[0]].features.len();
        let mut features = vec![0.0; w];
        let (mut x, mut y) = (0.0, 0.0);
        let mut bb = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for &i in &members {
            let p = &patches[i];
            for (f, v) in features.iter_mut().zip(&p.features) {
                *f += v;
            }
            x += p.x;
            y += p.y;
            bb = [bb[0].min(p.x - half), bb[1].min(p.y - half), bb[2].max(p.x + half), bb[3].max(p.y + half)];
        }
        nodes.push(GraphNode {
            id,
            x: x / m,
            y: y / m,
            features: features.iter().map(|f| f / m).collect(),
            members: members.iter().map(|&i| patches[i].id).collect(),
            bbox: Some(bb),
        });
    }
    Ok(nodes)
}

/// Delaunay edges over node coordinates, dropping those longer than the
/// edge threshold.
pub fn delaunay_edges(nodes: &[GraphNode], cfg: &GraphBuildConfig) -> Vec<[usize; 2]> {
    let pts: Vec<(f64, f64)> = nodes.iter().map(|n| (n.x, n.y)).collect();
    delaunay::delaunay_edges(&pts)
        .into_iter()
        .filter(|&(i, j)| (pts[i].0 - pts[j].0).hypot(pts[i].1 - pts[j].1) <= cfg.edge_threshold)
        .map(|(i, j)| [i, j])
        .collect()
}

pub fn build_graph(patches: &[PatchFeature], cfg: &GraphBuildConfig) -> Result<WsiGraph> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::invalid("empty patch table"));
    }
    let w = patches[0].features.len();
    let mut ids: Vec<u64> = patches.iter().map(|p| p.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|p| p[0] == p[1]) {
        return Err(Error::invalid("patch ids must be unique"));
    }
    if let Some(p) = patches.iter().find(|p| p.features.len() != w) {
        return Err(Error::invalid(format!("patch {} has {} features, expected {w}", p.id, p.features.len())));
    }
    let assignment = agglomerate_average_linkage(patches, cfg)?;
    let nodes = build_nodes(patches, &assignment, cfg)?;
    let edges = delaunay_edges(&nodes, cfg);
    Ok(WsiGraph { nodes, edges, config: cfg.clone() })
}
