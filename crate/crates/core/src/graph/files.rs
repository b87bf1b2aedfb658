use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Dataset, Graph, GraphError, NodeData};
use crate::tensor::Matrix;

/// Locations of the plain-text dataset files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetPaths {
    pub edges: PathBuf,
    pub labels: PathBuf,
    pub features: PathBuf,
    /// Optional split file; without it every node is unlabelled pool.
    pub masks: Option<PathBuf>,
}

/// What happened during ingestion, for logging and manifests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub raw_edge_lines: usize,
    pub self_loops_dropped: usize,
    pub duplicates_merged: usize,
}

fn read(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|e| GraphError::Io { path: path.to_path_buf(), msg: e.to_string() })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Content lines with their 1-based line numbers, skipping blanks and
/// `#` comments.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn two_fields<'a>(path: &Path, line: usize, l: &'a str) -> Result<(&'a str, &'a str), GraphError> {
    let mut it = l.split('\t');
    match (it.next(), it.next(), it.next()) {
        (Some(a), Some(b), None) => Ok((a.trim(), b.trim())),
        _ => Err(parse_err(path, line, format!("expected two tab-separated fields, got {l:?}"))),
    }
}

fn parse_id(path: &Path, line: usize, s: &str) -> Result<usize, GraphError> {
    s.parse().map_err(|_| parse_err(path, line, format!("invalid node id {s:?}")))
}

/// Loads the edge-list / labels / features / masks text formats.
///
/// The node count comes from the labels file, which must list every id in
/// `0..N` exactly once.
pub fn load_edge_list(paths: &DatasetPaths) -> Result<(Dataset, LoadReport), GraphError> {
    let labels = load_labels(&paths.labels)?;
    let n = labels.len();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);

    let features = load_features(&paths.features)?;
    if features.rows() != n {
        return Err(GraphError::Validation(format!(
            "{} declares {} feature rows but {} lists {n} nodes",
            paths.features.display(),
            features.rows(),
            paths.labels.display()
        )));
    }

    let text = read(&paths.edges)?;
    let mut pairs = Vec::new();
    for (line, l) in content_lines(&text) {
        let (a, b) = two_fields(&paths.edges, line, l)?;
        let (u, v) = (parse_id(&paths.edges, line, a)?, parse_id(&paths.edges, line, b)?);
        for id in [u, v] {
            if id >= n {
                return Err(GraphError::NodeOutOfRange { id, num_nodes: n });
            }
        }
        pairs.push((u, v));
    }
    let raw_edge_lines = pairs.len();
    let (graph, stats) = Graph::from_edges(n, pairs)?;
    if stats.self_loops_dropped > 0 {
        log::warn!("{}: dropped {} self-loops", paths.edges.display(), stats.self_loops_dropped);
    }

    let (train_mask, val_mask, test_mask) = match &paths.masks {
        Some(p) => load_masks(p, n)?,
        None => (vec![false; n], vec![false; n], vec![false; n]),
    };
    let data = NodeData { features, labels, num_classes, train_mask, val_mask, test_mask };
    data.validate()?;
    let report = LoadReport {
        raw_edge_lines,
        self_loops_dropped: stats.self_loops_dropped,
        duplicates_merged: stats.duplicates_merged,
    };
    Ok((Dataset { graph, data }, report))
}

fn load_labels(path: &Path) -> Result<Vec<usize>, GraphError> {
    let text = read(path)?;
    let mut entries = Vec::new();
    for (line, l) in content_lines(&text) {
        let (a, b) = two_fields(path, line, l)?;
        let id = parse_id(path, line, a)?;
        let class = b.parse::<usize>().map_err(|_| parse_err(path, line, format!("invalid class id {b:?}")))?;
        entries.push((id, class));
    }
    let n = entries.len();
    let mut labels = vec![None; n];
    for (id, class) in entries {
        if id >= n {
            return Err(GraphError::NodeOutOfRange { id, num_nodes: n });
        }
        if labels[id].replace(class).is_some() {
            return Err(GraphError::Validation(format!("{}: node {id} labelled twice", path.display())));
        }
    }
    Ok(labels.into_iter().map(|l| l.expect("n distinct ids below n cover 0..n")).collect())
}

fn load_features(path: &Path) -> Result<Matrix, GraphError> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing \"N d\" header"))?;
    let dims: Vec<usize> = header
        .split(' ')
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| parse_err(path, 1, format!("bad header {header:?}")))?;
    let [n, d] = dims[..] else {
        return Err(parse_err(path, 1, format!("header must be \"N d\", got {header:?}")));
    };
    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0;
    for (line, l) in lines {
        if l.is_empty() && rows == n {
            continue;
        }
        if rows == n {
            return Err(parse_err(path, line, format!("more than the declared {n} rows")));
        }
        let before = data.len();
        for tok in l.split(' ') {
            let v: f64 = tok.parse().map_err(|_| parse_err(path, line, format!("invalid real {tok:?}")))?;
            data.push(v);
        }
        if data.len() - before != d {
            return Err(parse_err(path, line, format!("expected {d} values, got {}", data.len() - before)));
        }
        rows += 1;
    }
    if rows != n {
        return Err(parse_err(path, rows + 2, format!("expected {n} rows, got {rows}")));
    }
    Matrix::from_vec(n, d, data).map_err(|e| GraphError::Validation(e.to_string()))
}

fn load_masks(path: &Path, n: usize) -> Result<(Vec<bool>, Vec<bool>, Vec<bool>), GraphError> {
    let text = read(path)?;
    let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
    let mut assigned = vec![false; n];
    for (line, l) in content_lines(&text) {
        let (a, b) = two_fields(path, line, l)?;
        let id = parse_id(path, line, a)?;
        if id >= n {
            return Err(GraphError::NodeOutOfRange { id, num_nodes: n });
        }
        let slot = match b {
            "train" => 0,
            "val" => 1,
            "test" => 2,
            other => return Err(parse_err(path, line, format!("unknown split {other:?}"))),
        };
        if std::mem::replace(&mut assigned[id], true) {
            return Err(GraphError::Validation(format!("{}: node {id} listed in more than one split", path.display())));
        }
        masks[slot][id] = true;
    }
    let [train, val, test] = masks;
    Ok((train, val, test))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, GraphError> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| GraphError::Io { path: path.to_path_buf(), msg: e.to_string() })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> GraphError + '_ {
    move |e| GraphError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

/// Writes each undirected edge once as `u<TAB>v`, `u < v`.
pub fn write_edge_list(path: &Path, graph: &Graph) -> Result<(), GraphError> {
    let mut w = create(path)?;
    for (u, v) in graph.edges() {
        writeln!(w, "{u}\t{v}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<(), GraphError> {
    let mut w = create(path)?;
    for (u, l) in labels.iter().enumerate() {
        writeln!(w, "{u}\t{l}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the `N d` header then one space-separated row per node. Values
/// use the shortest representation that parses back to the same `f64`.
pub fn write_features(path: &Path, features: &Matrix) -> Result<(), GraphError> {
    let mut w = create(path)?;
    writeln!(w, "{} {}", features.rows(), features.cols()).map_err(io_err(path))?;
    for row in features.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" ")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_masks(path: &Path, data: &NodeData) -> Result<(), GraphError> {
    let mut w = create(path)?;
    for u in 0..data.num_nodes() {
        let split = if data.train_mask[u] {
            "train"
        } else if data.val_mask[u] {
            "val"
        } else if data.test_mask[u] {
            "test"
        } else {
            continue;
        };
        writeln!(w, "{u}\t{split}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn paths(dir: &Path, edges: &str, labels: &str, features: &str, masks: Option<&str>) -> DatasetPaths {
        DatasetPaths {
            edges: write(dir, "edges.tsv", edges),
            labels: write(dir, "labels.tsv", labels),
            features: write(dir, "features.txt", features),
            masks: masks.map(|m| write(dir, "masks.tsv", m)),
        }
    }

    #[test]
    fn loads_and_dedups() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path(), "# comment\n0\t1\n1\t0\n1\t1\n", "0\t0\n1\t1\n", "2 1\n0.5\n-1\n", Some("0\ttrain\n1\ttest\n"));
        let (ds, report) = load_edge_list(&p).unwrap();
        assert_eq!(ds.graph.num_edges(), 1);
        assert_eq!(report.self_loops_dropped, 1);
        assert_eq!(report.raw_edge_lines, 3);
        assert!(ds.data.train_mask[0] && ds.data.test_mask[1]);
        assert_eq!(ds.data.features.as_slice(), &[0.5, -1.0]);
    }

    #[test]
    fn empty_edge_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path(), "", "0\t0\n1\t0\n2\t1\n", "3 1\n1\n2\n3\n", None);
        let (ds, _) = load_edge_list(&p).unwrap();
        assert_eq!(ds.graph.num_nodes(), 3);
        assert_eq!(ds.graph.num_edges(), 0);
        assert_eq!(super::super::khop_rings(&ds.graph, 0, 3).reachable_count(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path(), "0\t1\n0 1\n", "0\t0\n1\t0\n", "2 1\n1\n2\n", None);
        match load_edge_list(&p) {
            Err(GraphError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_edge() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path(), "0\t7\n", "0\t0\n1\t0\n", "2 1\n1\n2\n", None);
        assert_eq!(load_edge_list(&p).unwrap_err(), GraphError::NodeOutOfRange { id: 7, num_nodes: 2 });
    }

    #[test]
    fn overlapping_masks() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path(), "", "0\t0\n1\t0\n", "2 1\n1\n2\n", Some("0\ttrain\n0\tval\n"));
        assert!(matches!(load_edge_list(&p), Err(GraphError::Validation(_))));
    }

    #[test]
    fn feature_row_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path(), "", "0\t0\n1\t0\n", "2 2\n1 2\n", None);
        assert!(matches!(load_edge_list(&p), Err(GraphError::Parse { .. })));
    }
}
