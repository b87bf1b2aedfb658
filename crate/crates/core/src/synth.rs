//! Label-uniform random graphs with a target edge homophily.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::graph::{Dataset, Graph, GraphError, NodeData};
use crate::tensor::Matrix;

/// Width of the one-hot degree features attached to synthetic graphs.
pub const DEGREE_FEATURE_BINS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub target_rho: f64,
    pub avg_degree: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("ran out of distinct {kind}-label pairs after {placed} edges ({available} exist)")]
    Exhausted { kind: &'static str, placed: usize, available: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { num_nodes: 1000, num_classes: 2, target_rho: 0.9, avg_degree: 4.0, seed: 0 }
    }
}

impl SynthSpec {
    /// `⌊N·avg_degree/2⌋`.
    pub fn edge_budget(&self) -> usize {
        (self.num_nodes as f64 * self.avg_degree / 2.0).floor() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..=1.0).contains(&self.target_rho) {
            return bad(format!("target_rho {} outside [0, 1]", self.target_rho));
        }
        if !(self.avg_degree > 0.0 && self.avg_degree.is_finite()) {
            return bad(format!("avg_degree must be positive, got {}", self.avg_degree));
        }
        let m = self.edge_budget();
        if m == 0 {
            return bad("edge budget rounds to 0".into());
        }
        let n = self.num_nodes;
        if m > n * n.saturating_sub(1) / 2 {
            return bad(format!("{m} edges do not fit in a simple graph on {n} nodes"));
        }
        Ok(())
    }
}

fn pairs(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Draws labels uniformly, then places `edge_budget` distinct edges one at
/// a time: same-label with probability `target_rho`, otherwise
/// different-label, each uniform over unordered pairs of its kind. A
/// duplicate is redrawn within the same kind.
///
/// Features are one-hot `min(degree, 15)`. No masks are set.
pub fn generate_homophilic_graph(spec: &SynthSpec) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let n = spec.num_nodes;
    let k = spec.num_classes;
    let mut rng = Xoshiro256StarStar::seed_from_u64(spec.seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();

    let mut members = vec![Vec::new(); k];
    for (u, &y) in labels.iter().enumerate() {
        members[y].push(u);
    }
    let class_pairs: Vec<usize> = members.iter().map(|m| pairs(m.len())).collect();
    let same_total: usize = class_pairs.iter().sum();
    let diff_total = pairs(n) - same_total;

    let m = spec.edge_budget();
    let mut seen: HashSet<(usize, usize)> = HashSet::with_capacity(m);
    let (mut same_used, mut diff_used) = (0usize, 0usize);
    while seen.len() < m {
        let same = rng.gen_bool(spec.target_rho);
        let (used, total, kind) =
            if same { (&mut same_used, same_total, "same") } else { (&mut diff_used, diff_total, "different") };
        if *used == total {
            return Err(SynthError::Exhausted { kind, placed: seen.len(), available: total });
        }
        loop {
            let (u, v) = if same {
                let mut r = rng.gen_range(0..same_total);
                let c = class_pairs.iter().position(|&p| {
                    if r < p {
                        true
                    } else {
                        r -= p;
                        false
                    }
                });
                let group = &members[c.expect("r < same_total")];
                let a = rng.gen_range(0..group.len());
                let mut b = rng.gen_range(0..group.len() - 1);
                if b >= a {
                    b += 1;
                }
                (group[a], group[b])
            } else {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                if labels[a] == labels[b] {
                    continue;
                }
                (a, b)
            };
            if seen.insert((u.min(v), u.max(v))) {
                *used += 1;
                break;
            }
        }
    }

    let mut edges: Vec<(usize, usize)> = seen.into_iter().collect();
    edges.sort_unstable();
    let (graph, _) = Graph::from_edges(n, edges)?;
    let features = Matrix::from_fn(n, DEGREE_FEATURE_BINS, |u, c| {
        f64::from(u8::from(graph.degree(u).min(DEGREE_FEATURE_BINS - 1) == c))
    });
    let data = NodeData {
        features,
        labels,
        num_classes: k,
        train_mask: vec![false; n],
        val_mask: vec![false; n],
        test_mask: vec![false; n],
    };
    Ok(Dataset { graph, data })
}

/// Replaces the features of `ds` with sparse binary bag-of-words rows.
/// Each node draws `words_per_node` words; each word comes from its own
/// class's slice of the vocabulary with probability `signal`, otherwise
/// from the whole vocabulary.
pub fn attach_class_features(ds: &mut Dataset, vocab: usize, words_per_node: usize, signal: f64, seed: u64) -> Result<(), SynthError> {
    let k = ds.data.num_classes;
    if vocab < k || words_per_node == 0 || !(0.0..=1.0).contains(&signal) {
        return Err(SynthError::InvalidSpec(format!(
            "need vocab >= classes, words_per_node >= 1 and signal in [0, 1], got {vocab}, {words_per_node}, {signal}"
        )));
    }
    let slice = vocab / k;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let n = ds.data.num_nodes();
    let mut features = Matrix::zeros(n, vocab);
    for u in 0..n {
        let y = ds.data.labels[u];
        for _ in 0..words_per_node {
            let w = if rng.gen_bool(signal) { y * slice + rng.gen_range(0..slice) } else { rng.gen_range(0..vocab) };
            features.set(u, w, 1.0);
        }
    }
    ds.data.features = features;
    Ok(())
}

/// Synthetic stand-in with the citation-graph shape used for smoke runs:
/// 2708 nodes, 7 classes, about 5.3k edges at homophily 0.81 and 1433-word
/// sparse features, with the 20-per-class / 500 / 1000 split.
pub fn citation_like(seed: u64) -> Result<Dataset, SynthError> {
    let spec = SynthSpec { num_nodes: 2708, num_classes: 7, target_rho: 0.81, avg_degree: 3.9, seed };
    let mut ds = generate_homophilic_graph(&spec)?;
    attach_class_features(&mut ds, 1433, 18, 0.25, seed ^ 0xFEA7)?;
    let (train, val, test) = crate::graph::planetoid_split(&ds.data.labels, 7, 20, 500, 1000);
    ds.data.train_mask = train;
    ds.data.val_mask = val;
    ds.data.test_mask = test;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::edge_homophily;

    fn spec(n: usize, rho: f64, deg: f64, seed: u64) -> SynthSpec {
        SynthSpec { num_nodes: n, num_classes: 2, target_rho: rho, avg_degree: deg, seed }
    }

    #[test]
    fn pure_homophily_and_heterophily() {
        let mut same_ok = 0;
        let mut diff_ok = 0;
        for seed in 0..20 {
            if let Ok(ds) = generate_homophilic_graph(&spec(4, 1.0, 1.0, seed)) {
                assert_eq!(ds.graph.num_edges(), 2);
                assert!(ds.graph.edges().all(|(u, v)| ds.data.labels[u] == ds.data.labels[v]));
                same_ok += 1;
            }
            if let Ok(ds) = generate_homophilic_graph(&spec(4, 0.0, 1.0, seed)) {
                assert_eq!(ds.graph.num_edges(), 2);
                assert!(ds.graph.edges().all(|(u, v)| ds.data.labels[u] != ds.data.labels[v]));
                diff_ok += 1;
            }
        }
        assert!(same_ok > 0 && diff_ok > 0);
    }

    #[test]
    fn exhaustion_is_an_error() {
        let s = SynthSpec { num_nodes: 3, num_classes: 3, target_rho: 1.0, avg_degree: 2.0, seed: 1 };
        let err = generate_homophilic_graph(&s).unwrap_err();
        assert!(matches!(err, SynthError::Exhausted { kind: "same", .. }), "{err}");
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_homophilic_graph(&spec(4, 1.5, 1.0, 0)).is_err());
        assert!(generate_homophilic_graph(&spec(4, 0.5, 0.1, 0)).is_err());
        let one_class = SynthSpec { num_classes: 1, ..spec(10, 0.5, 2.0, 0) };
        assert!(generate_homophilic_graph(&one_class).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_homophilic_graph(&spec(200, 0.7, 4.0, 5)).unwrap();
        let b = generate_homophilic_graph(&spec(200, 0.7, 4.0, 5)).unwrap();
        let c = generate_homophilic_graph(&spec(200, 0.7, 4.0, 6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.graph, c.graph);
    }

    #[test]
    fn large_graph_hits_target() {
        let ds = generate_homophilic_graph(&spec(20_000, 0.9, 10.0, 3)).unwrap();
        assert_eq!(ds.graph.num_edges(), 100_000);
        let rho = edge_homophily(&ds.graph, &ds.data.labels).unwrap();
        assert!((0.89..=0.91).contains(&rho), "{rho}");
    }
}
