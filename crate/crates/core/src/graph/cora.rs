use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Dataset, Graph, GraphError, NodeData};
use crate::tensor::Matrix;

/// Class names in the order they are mapped to ids.
pub const CORA_CLASSES: [&str; 7] = [
    "Case_Based",
    "Genetic_Algorithms",
    "Neural_Networks",
    "Probabilistic_Methods",
    "Reinforcement_Learning",
    "Rule_Learning",
    "Theory",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SplitSpec {
    /// No masks; every node is in the unlabelled pool.
    #[default]
    None,
    /// 20 training nodes per class in file order, then the next 500 other
    /// nodes for validation and the next 1000 for test.
    PlanetoidPublic,
}

impl std::str::FromStr for SplitSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "planetoid-public" => Ok(Self::PlanetoidPublic),
            other => Err(format!("unknown split spec {other:?} (expected none or planetoid-public)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CoraReport {
    pub raw_cite_lines: usize,
    pub skipped_cites: usize,
    pub self_loops_dropped: usize,
    pub duplicates_merged: usize,
    /// Undirected edges after symmetrisation and dedup.
    pub num_edges: usize,
}

fn read(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|e| GraphError::Io { path: path.to_path_buf(), msg: e.to_string() })
}

/// Reads `cora.content` / `cora.cites`. Paper ids become dense ids in
/// order of first appearance in the content file.
pub fn load_cora_raw(content: &Path, cites: &Path, split: SplitSpec) -> Result<(Dataset, CoraReport), GraphError> {
    let text = read(content)?;
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut feats = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| GraphError::Parse { path: content.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(err("expected id, features and class separated by tabs".into()));
        }
        let d = fields.len() - 2;
        if *dim.get_or_insert(d) != d {
            return Err(err(format!("expected {} features, got {d}", dim.unwrap())));
        }
        let class_name = fields[fields.len() - 1].trim();
        let class = CORA_CLASSES.iter().position(|c| *c == class_name).ok_or_else(|| {
            GraphError::Validation(format!("{}:{}: unknown class {class_name:?}", content.display(), i + 1))
        })?;
        for tok in &fields[1..fields.len() - 1] {
            feats.push(tok.trim().parse::<f64>().map_err(|_| err(format!("invalid feature {tok:?}")))?);
        }
        let next = ids.len();
        if ids.insert(fields[0].trim().to_string(), next).is_some() {
            return Err(GraphError::Validation(format!("{}: paper id {} listed twice", content.display(), fields[0])));
        }
        labels.push(class);
    }
    let n = labels.len();
    let features = Matrix::from_vec(n, dim.unwrap_or(0), feats).map_err(|e| GraphError::Validation(e.to_string()))?;

    let text = read(cites)?;
    let mut report = CoraReport::default();
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        report.raw_cite_lines += 1;
        let mut it = line.split('\t').map(str::trim);
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(GraphError::Parse { path: cites.to_path_buf(), line: i + 1, msg: "expected cited<TAB>citing".into() });
        };
        match (ids.get(a), ids.get(b)) {
            (Some(&u), Some(&v)) => pairs.push((u, v)),
            _ => report.skipped_cites += 1,
        }
    }
    if report.skipped_cites > 0 {
        log::warn!("{}: skipped {} citations with unknown ids", cites.display(), report.skipped_cites);
    }
    let (graph, stats) = Graph::from_edges(n, pairs)?;
    report.self_loops_dropped = stats.self_loops_dropped;
    report.duplicates_merged = stats.duplicates_merged;
    report.num_edges = graph.num_edges();

    let (train_mask, val_mask, test_mask) = match split {
        SplitSpec::None => (vec![false; n], vec![false; n], vec![false; n]),
        SplitSpec::PlanetoidPublic => planetoid_split(&labels, CORA_CLASSES.len(), 20, 500, 1000),
    };
    let data = NodeData { features, labels, num_classes: CORA_CLASSES.len(), train_mask, val_mask, test_mask };
    data.validate()?;
    Ok((Dataset { graph, data }, report))
}

/// First `per_class` nodes of each class train, then the next `val` and
/// `test` remaining nodes in order. Short classes or graphs give smaller
/// masks rather than an error.
pub fn planetoid_split(
    labels: &[usize],
    num_classes: usize,
    per_class: usize,
    val: usize,
    test: usize,
) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
    let n = labels.len();
    let mut train = vec![false; n];
    let mut counts = vec![0usize; num_classes];
    for (u, &y) in labels.iter().enumerate() {
        if counts[y] < per_class {
            counts[y] += 1;
            train[u] = true;
        }
    }
    let mut val_mask = vec![false; n];
    let mut test_mask = vec![false; n];
    let rest = (0..n).filter(|&u| !train[u]);
    for (i, u) in rest.enumerate() {
        if i < val {
            val_mask[u] = true;
        } else if i < val + test {
            test_mask[u] = true;
        } else {
            break;
        }
    }
    (train, val_mask, test_mask)
}
