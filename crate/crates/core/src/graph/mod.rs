//! Graph storage, ingestion, hop neighbourhoods and homophily.

mod cora;
mod csr;
mod files;

use std::collections::VecDeque;
use std::path::PathBuf;

pub use cora::{load_cora_raw, planetoid_split, CoraReport, SplitSpec, CORA_CLASSES};
pub use csr::{BuildStats, Graph};
pub use files::{load_edge_list, write_edge_list, write_features, write_labels, write_masks, DatasetPaths, LoadReport};

use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("node id {id} out of range for {num_nodes} nodes")]
    NodeOutOfRange { id: usize, num_nodes: usize },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("edge homophily is undefined on a graph without edges")]
    NoEdges,
    #[error("cannot read {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

/// Per-node features, labels and the transductive split.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeData {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl NodeData {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.labels.len();
        if self.features.rows() != n {
            return Err(GraphError::Validation(format!(
                "{} feature rows for {n} labelled nodes",
                self.features.rows()
            )));
        }
        for (name, m) in [("train", &self.train_mask), ("val", &self.val_mask), ("test", &self.test_mask)] {
            if m.len() != n {
                return Err(GraphError::Validation(format!("{name} mask has length {} != {n}", m.len())));
            }
        }
        for u in 0..n {
            let hits = [self.train_mask[u], self.val_mask[u], self.test_mask[u]].iter().filter(|&&b| b).count();
            if hits > 1 {
                return Err(GraphError::Validation(format!("node {u} appears in more than one mask")));
            }
            if self.labels[u] >= self.num_classes {
                return Err(GraphError::Validation(format!(
                    "node {u} has label {} outside [0, {})",
                    self.labels[u], self.num_classes
                )));
            }
        }
        if !self.features.is_finite() {
            return Err(GraphError::Validation("features contain NaN or Inf".into()));
        }
        Ok(())
    }

    /// Scales each feature row to sum to one; all-zero rows are left alone.
    pub fn row_normalize_features(&mut self) {
        for r in 0..self.features.rows() {
            let row = self.features.row_mut(r);
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }

    /// Nodes outside the training mask.
    pub fn unlabeled_mask(&self) -> Vec<bool> {
        self.train_mask.iter().map(|&t| !t).collect()
    }
}

/// A graph together with its node data.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graph: Graph,
    pub data: NodeData,
}

/// Exact-distance BFS layers around one source node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KHopRings {
    pub source: usize,
    /// `rings[k]` holds the nodes at shortest-path distance exactly `k`,
    /// in BFS discovery order.
    pub rings: Vec<Vec<usize>>,
}

impl KHopRings {
    pub fn reachable_count(&self) -> usize {
        self.rings.iter().map(Vec::len).sum()
    }
}

pub fn khop_rings(graph: &Graph, u: usize, k_max: usize) -> KHopRings {
    let mut rings = vec![Vec::new(); k_max + 1];
    let mut dist = vec![usize::MAX; graph.num_nodes()];
    let mut queue = VecDeque::new();
    dist[u] = 0;
    rings[0].push(u);
    queue.push_back(u);
    while let Some(x) = queue.pop_front() {
        let d = dist[x];
        if d == k_max {
            continue;
        }
        for &y in graph.neighbors(x) {
            if dist[y] == usize::MAX {
                dist[y] = d + 1;
                rings[d + 1].push(y);
                queue.push_back(y);
            }
        }
    }
    KHopRings { source: u, rings }
}

/// Fraction of undirected edges whose endpoints share a label.
pub fn edge_homophily(graph: &Graph, labels: &[usize]) -> Result<f64, GraphError> {
    let e = graph.num_edges();
    if e == 0 {
        return Err(GraphError::NoEdges);
    }
    let same = graph.edges().filter(|&(u, v)| labels[u] == labels[v]).count();
    Ok(same as f64 / e as f64)
}
