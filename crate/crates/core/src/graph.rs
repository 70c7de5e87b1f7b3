//! Graph, batch and dataset types plus their JSON interchange format.
//!
//! A dataset file is one UTF-8 JSON object:
//!
//! ```text
//! {"meta": {...}, "train": [G, ...], "val": [G, ...], "test": [G, ...]}
//! G = {"nodes": n, "features": [[f64; d_in]; n], "edges": [[u, v], ...],
//!      "label": c, "env": "...", "mask": [bool; n]}
//! ```
//!
//! Edges are directed; undirected graphs list both directions. `mask` is
//! omitted when the graph has no ground-truth invariance annotation.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{split}[{index}]: {reason}")]
    Validation {
        split: String,
        index: usize,
        reason: String,
    },
    #[error("cannot batch: {0}")]
    Batch(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Graph {
    #[serde(rename = "nodes")]
    pub num_nodes: usize,
    pub features: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize)>,
    pub label: usize,
    #[serde(rename = "env")]
    pub env_id: String,
    #[serde(rename = "mask", default, skip_serializing_if = "Option::is_none")]
    pub invariance_mask: Option<Vec<bool>>,
}

impl Graph {
    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Checks structural invariants against the owning dataset's class count.
    pub fn check(&self, num_classes: usize) -> std::result::Result<(), String> {
        if self.num_nodes == 0 {
            return Err("graph has no nodes".into());
        }
        if self.features.len() != self.num_nodes {
            return Err(format!(
                "{} feature rows for {} nodes",
                self.features.len(),
                self.num_nodes
            ));
        }
        let d = self.feature_dim();
        if d == 0 || self.features.iter().any(|r| r.len() != d) {
            return Err("feature rows must share a nonzero width".into());
        }
        if self.features.iter().flatten().any(|x| !x.is_finite()) {
            return Err("non-finite feature value".into());
        }
        if let Some(&(u, v)) = self
            .edges
            .iter()
            .find(|(u, v)| *u >= self.num_nodes || *v >= self.num_nodes)
        {
            return Err(format!(
                "edge ({u}, {v}) out of range for {} nodes",
                self.num_nodes
            ));
        }
        if self.label >= num_classes {
            return Err(format!(
                "label {} not below class count {num_classes}",
                self.label
            ));
        }
        if let Some(mask) = &self.invariance_mask {
            if mask.len() != self.num_nodes {
                return Err(format!(
                    "mask length {} != node count {}",
                    mask.len(),
                    self.num_nodes
                ));
            }
        }
        Ok(())
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(_, v) in &self.edges {
            deg[v] += 1;
        }
        deg
    }

    /// Same graph with nodes relabelled so old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        assert_eq!(perm.len(), self.num_nodes);
        let mut features = vec![Vec::new(); self.num_nodes];
        for (i, row) in self.features.iter().enumerate() {
            features[perm[i]] = row.clone();
        }
        let invariance_mask = self.invariance_mask.as_ref().map(|m| {
            let mut out = vec![false; m.len()];
            for (i, &b) in m.iter().enumerate() {
                out[perm[i]] = b;
            }
            out
        });
        Graph {
            num_nodes: self.num_nodes,
            features,
            edges: self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect(),
            label: self.label,
            env_id: self.env_id.clone(),
            invariance_mask,
        }
    }

    /// Breadth-first connectivity check, treating edges as undirected.
    pub fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut seen = vec![false; self.num_nodes];
        let mut queue = std::collections::VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.num_nodes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShiftKind {
    #[serde(rename = "covariate-size")]
    CovariateSize,
    #[serde(rename = "concept-base")]
    ConceptBase,
}

impl std::fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShiftKind::CovariateSize => "covariate-size",
            ShiftKind::ConceptBase => "concept-base",
        })
    }
}

/// Generation indices of each split's graphs; `(seed, index)` identifies a
/// graph across the whole dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIds {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub shift: ShiftKind,
    pub seed: u64,
    pub classes: usize,
    pub feature_dim: usize,
    pub ids: SplitIds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub meta: DatasetMeta,
    pub train: Vec<Graph>,
    pub val: Vec<Graph>,
    pub test: Vec<Graph>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}` (train|val|test)")),
        }
    }
}

impl DatasetSplit {
    pub fn split(&self, name: SplitName) -> &[Graph] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Validates every graph plus split-level consistency.
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        for (name, graphs, ids) in [
            ("train", &self.train, &m.ids.train),
            ("val", &self.val, &m.ids.val),
            ("test", &self.test, &m.ids.test),
        ] {
            if ids.len() != graphs.len() {
                return Err(GraphError::Validation {
                    split: name.into(),
                    index: 0,
                    reason: format!("{} ids for {} graphs", ids.len(), graphs.len()),
                });
            }
            for (i, g) in graphs.iter().enumerate() {
                g.check(m.classes)
                    .and_then(|_| {
                        if g.feature_dim() == m.feature_dim {
                            Ok(())
                        } else {
                            Err(format!(
                                "feature width {} != dataset width {}",
                                g.feature_dim(),
                                m.feature_dim
                            ))
                        }
                    })
                    .map_err(|reason| GraphError::Validation {
                        split: name.into(),
                        index: i,
                        reason,
                    })?;
            }
        }
        let mut all: Vec<u64> = m.ids.train.iter().chain(&m.ids.val).chain(&m.ids.test).copied().collect();
        all.sort_unstable();
        if let Some(w) = all.windows(2).find(|w| w[0] == w[1]) {
            return Err(GraphError::Validation {
                split: "meta".into(),
                index: w[0] as usize,
                reason: format!("graph id {} appears in more than one place", w[0]),
            });
        }
        Ok(())
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("dataset serialization cannot fail")
    }

    /// SHA-256 of the serialized file contents, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json_bytes()))
    }
}

pub fn save_dataset(split: &DatasetSplit, path: &Path) -> Result<()> {
    let io = |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    serde_json::to_writer(&mut w, split).map_err(|e| io(e.into()))?;
    w.flush().map_err(io)
}

pub fn load_dataset(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let split: DatasetSplit = serde_json::from_str(&text).map_err(|e| GraphError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    split.validate()?;
    Ok(split)
}

/// SHA-256 of a file on disk, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Padding-free concatenation of graphs.
///
/// Node `j` of graph `g` sits at global row `offsets[g] + j`; edges keep
/// their per-graph order and are grouped by graph via `edge_offsets`.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub graphs: Vec<&'a Graph>,
    pub feature_dim: usize,
    /// Row-major `[num_nodes, feature_dim]`.
    pub features: Vec<f64>,
    pub offsets: Vec<usize>,
    pub edge_offsets: Vec<usize>,
    pub node_graph: Arc<[usize]>,
    pub edge_graph: Arc<[usize]>,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub in_degree: Vec<usize>,
    pub labels: Vec<usize>,
    pub envs: Vec<String>,
}

impl<'a> Batch<'a> {
    pub fn num_graphs(&self) -> usize {
        self.graphs.len()
    }

    pub fn num_nodes(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn node_range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn edge_range(&self, g: usize) -> std::ops::Range<usize> {
        self.edge_offsets[g]..self.edge_offsets[g + 1]
    }
}

pub fn make_batch<'a>(graphs: &[&'a Graph]) -> Result<Batch<'a>> {
    let first = graphs
        .first()
        .ok_or_else(|| GraphError::Batch("empty graph list".into()))?;
    let d = first.feature_dim();
    let total_nodes: usize = graphs.iter().map(|g| g.num_nodes).sum();
    let total_edges: usize = graphs.iter().map(|g| g.edges.len()).sum();
    let mut features = Vec::with_capacity(total_nodes * d);
    let mut offsets = Vec::with_capacity(graphs.len() + 1);
    let mut edge_offsets = Vec::with_capacity(graphs.len() + 1);
    let mut node_graph = Vec::with_capacity(total_nodes);
    let mut edge_graph = Vec::with_capacity(total_edges);
    let mut src = Vec::with_capacity(total_edges);
    let mut dst = Vec::with_capacity(total_edges);
    let mut in_degree = vec![0; total_nodes];
    offsets.push(0);
    edge_offsets.push(0);
    for (gi, g) in graphs.iter().enumerate() {
        if g.feature_dim() != d || g.features.iter().any(|r| r.len() != d) {
            return Err(GraphError::Batch(format!(
                "graph {gi} has feature width {}, expected {d}",
                g.feature_dim()
            )));
        }
        let base = *offsets.last().unwrap();
        for row in &g.features {
            features.extend_from_slice(row);
        }
        node_graph.extend(std::iter::repeat(gi).take(g.num_nodes));
        for &(u, v) in &g.edges {
            if u >= g.num_nodes || v >= g.num_nodes {
                return Err(GraphError::Batch(format!(
                    "graph {gi} edge ({u}, {v}) out of range"
                )));
            }
            src.push(base + u);
            dst.push(base + v);
            edge_graph.push(gi);
            in_degree[base + v] += 1;
        }
        offsets.push(base + g.num_nodes);
        edge_offsets.push(src.len());
    }
    Ok(Batch {
        graphs: graphs.to_vec(),
        feature_dim: d,
        features,
        offsets,
        edge_offsets,
        node_graph: node_graph.into(),
        edge_graph: edge_graph.into(),
        src: src.into(),
        dst: dst.into(),
        in_degree,
        labels: graphs.iter().map(|g| g.label).collect(),
        envs: graphs.iter().map(|g| g.env_id.clone()).collect(),
    })
}

/// Per-graph invariance scores in the export format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub graph_index: usize,
    pub node_scores: Vec<f64>,
    pub edge_scores: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

pub fn save_scores(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let io = |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    };
    let bytes = serde_json::to_vec(records).map_err(|e| io(e.into()))?;
    fs::write(path, bytes).map_err(io)
}

/// Graphviz rendering; darker node fill means a higher score. Reverse-edge
/// duplicates are drawn once, with the larger of the two scores.
pub fn scores_to_dot(graph: &Graph, rec: &ScoreRecord) -> String {
    let mut out = format!("graph g{} {{\n  node [style=filled, shape=circle];\n", rec.graph_index);
    for (v, s) in rec.node_scores.iter().enumerate() {
        let level = (255.0 * (1.0 - s.clamp(0.0, 1.0))).round() as u8;
        let font = if level < 128 { "white" } else { "black" };
        let motif = rec
            .mask
            .as_ref()
            .map_or(false, |m| m.get(v).copied().unwrap_or(false));
        let _ = writeln!(
            out,
            "  n{v} [fillcolor=\"#{level:02x}{level:02x}{level:02x}\", fontcolor={font}, color={}, label=\"{v}\"];",
            if motif { "green" } else { "black" }
        );
    }
    let mut best: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
    for (e, &(u, v)) in graph.edges.iter().enumerate() {
        let key = (u.min(v), u.max(v));
        let s = rec.edge_scores.get(e).copied().unwrap_or(0.0);
        let slot = best.entry(key).or_insert(s);
        *slot = slot.max(s);
    }
    for ((u, v), s) in best {
        let _ = writeln!(out, "  n{u} -- n{v} [penwidth={:.3}];", 0.5 + 3.0 * s);
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, label: usize) -> Graph {
        Graph {
            num_nodes: n,
            features: vec![vec![1.0, 0.0]; n],
            edges: (1..n).flat_map(|i| [(i - 1, i), (i, i - 1)]).collect(),
            label,
            env_id: "e".into(),
            invariance_mask: None,
        }
    }

    #[test]
    fn single_graph_offsets() {
        let g = tiny(4, 0);
        let b = make_batch(&[&g]).unwrap();
        assert_eq!(b.offsets, vec![0, 4]);
    }

    #[test]
    fn membership_follows_concatenation() {
        let (a, b) = (tiny(3, 0), tiny(5, 1));
        let batch = make_batch(&[&a, &b]).unwrap();
        assert_eq!(&*batch.node_graph, &[0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(batch.offsets, vec![0, 3, 8]);
        assert_eq!(batch.labels, vec![0, 1]);
        assert!(batch.src.iter().skip(4).all(|&s| s >= 3));
    }

    #[test]
    fn mixed_widths_rejected() {
        let a = tiny(3, 0);
        let mut b = tiny(2, 0);
        b.features = vec![vec![1.0; 3]; 2];
        assert!(matches!(make_batch(&[&a, &b]), Err(GraphError::Batch(_))));
        assert!(make_batch(&[]).is_err());
    }

    #[test]
    fn label_out_of_range_fails_check() {
        assert!(tiny(2, 3).check(3).is_err());
        assert!(tiny(2, 2).check(3).is_ok());
    }

    #[test]
    fn dot_has_one_line_per_node_and_undirected_edge() {
        let g = tiny(3, 0);
        let rec = ScoreRecord {
            graph_index: 0,
            node_scores: vec![0.1, 0.5, 0.9],
            edge_scores: vec![0.5; 4],
            mask: Some(vec![false, true, true]),
        };
        let dot = scores_to_dot(&g, &rec);
        assert_eq!(dot.matches("fillcolor").count(), 3);
        assert_eq!(dot.matches(" -- ").count(), 2);
        assert!(dot.starts_with("graph g0 {"));
        assert!(dot.trim_end().ends_with('}'));
    }
}
