//! Artifact formats: binary checkpoints, partition files, attention dumps
//! and JSON metric streams.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::AttnView;
use crate::graph::Graph;
use crate::partition::{edge_cut, Partition};
use crate::tensor::{Matrix, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CBT1";
pub const ATTENTION_DUMP_VERSION: u32 = 1;
pub const PARTITION_FILE_VERSION: u32 = 1;
pub const METRICS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IoError {
    #[error("{}: {msg}", path.display())]
    Io { path: PathBuf, msg: String },
    #[error("{what}: byte {offset}: {msg}")]
    Format { what: &'static str, offset: usize, msg: String },
    #[error("{what}: unsupported format version {found} (this build reads {expected})")]
    Version { what: &'static str, found: String, expected: String },
    #[error("checkpoint does not fit the model: {0}")]
    Mismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |e| IoError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// `"CBT1"`, then per parameter: name length (u32), name bytes (UTF-8),
/// rows (u64), cols (u64) and `rows·cols` doubles, all little-endian.
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        for x in p.value.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, field: &str) -> Result<&[u8], IoError> {
        if self.bytes.len() - self.pos < n {
            return Err(IoError::Format {
                what: "checkpoint",
                offset: self.bytes.len(),
                msg: format!("truncated while reading {field} at byte {} (needs {n} bytes)", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

/// Parameters come back in file order with no gradients.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore, IoError> {
    if bytes.len() < 4 {
        return Err(IoError::Format { what: "checkpoint", offset: bytes.len(), msg: "missing magic".into() });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        if &bytes[..3] == b"CBT" {
            return Err(IoError::Version {
                what: "checkpoint",
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
                expected: "CBT1".into(),
            });
        }
        return Err(IoError::Format { what: "checkpoint", offset: 0, msg: "not a checkpoint (bad magic)".into() });
    }
    let mut c = Cursor { bytes, pos: 4 };
    let mut store = ParamStore::new();
    while c.pos < bytes.len() {
        let start = c.pos;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| IoError::Format { what: "checkpoint", offset: start + 4, msg: "name is not UTF-8".into() })?
            .to_string();
        let rows = c.u64("rows")? as usize;
        let cols = c.u64("cols")? as usize;
        let count = rows.checked_mul(cols).filter(|n| n.checked_mul(8).is_some()).ok_or_else(|| IoError::Format {
            what: "checkpoint",
            offset: start,
            msg: format!("{name}: shape {rows}×{cols} overflows"),
        })?;
        let raw = c.take(count * 8, "values")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        store.add(name, Matrix::from_vec(rows, cols, data).expect("length checked"));
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<(), IoError> {
    write_file(path, &encode_checkpoint(store))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, IoError> {
    decode_checkpoint(&read_file(path)?)
}

/// Copies values from `loaded` into `store` by name; every parameter of
/// `store` must be present with the same shape.
pub fn restore_params(store: &mut ParamStore, loaded: &ParamStore) -> Result<(), IoError> {
    if store.len() != loaded.len() {
        return Err(IoError::Mismatch(format!("model has {} tensors, checkpoint {}", store.len(), loaded.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let src = loaded.find(&name).ok_or_else(|| IoError::Mismatch(format!("tensor {name} missing")))?;
        let value = loaded.value(src);
        if value.shape() != store.value(id).shape() {
            return Err(IoError::Mismatch(format!(
                "{name}: shape {:?} in checkpoint, {:?} in model",
                value.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = value.clone();
    }
    Ok(())
}

/// Summary line `CBP<v> N=<N> P=<P> eps=<eps> cut=<cut> maxload=<maxload>`,
/// then `node_id<TAB>cluster_id` per node.
pub fn encode_partition(partition: &Partition, graph: Option<&Graph>) -> String {
    let cut = graph.map_or_else(|| "na".to_string(), |g| edge_cut(g, partition).to_string());
    let mut s = format!(
        "CBP{PARTITION_FILE_VERSION} N={} P={} eps={} cut={cut} maxload={}\n",
        partition.num_nodes(),
        partition.num_parts(),
        partition.epsilon(),
        partition.max_load()
    );
    for (u, &p) in partition.assignment().iter().enumerate() {
        writeln!(s, "{u}\t{p}").expect("string write");
    }
    s
}

fn header_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    header.split_whitespace().find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

pub fn decode_partition(text: &str) -> Result<Partition, IoError> {
    let fmt = |offset: usize, msg: String| IoError::Format { what: "partition", offset, msg };
    let mut lines = LineCursor::new(text);
    let (off, header) = lines.next_line().ok_or_else(|| fmt(0, "empty file".into()))?;
    let tag = header.split_whitespace().next().unwrap_or("");
    let expected = format!("CBP{PARTITION_FILE_VERSION}");
    if tag != expected {
        if tag.starts_with("CBP") {
            return Err(IoError::Version { what: "partition", found: tag.into(), expected });
        }
        return Err(fmt(off, format!("expected header starting with {expected}")));
    }
    let field = |key: &str| -> Result<&str, IoError> {
        header_field(header, key).ok_or_else(|| fmt(off, format!("header lacks {key}=")))
    };
    let n: usize = field("N")?.parse().map_err(|_| fmt(off, "bad N".into()))?;
    let p: usize = field("P")?.parse().map_err(|_| fmt(off, "bad P".into()))?;
    let eps: f64 = field("eps")?.parse().map_err(|_| fmt(off, "bad eps".into()))?;
    let mut assign = vec![usize::MAX; n];
    for i in 0..n {
        let (off, line) = lines.next_line().ok_or_else(|| fmt(text.len(), format!("truncated after {i} of {n} nodes")))?;
        let (u, c) = line.split_once('\t').ok_or_else(|| fmt(off, format!("expected node<TAB>cluster, got {line:?}")))?;
        let u: usize = u.trim().parse().map_err(|_| fmt(off, format!("bad node id {u:?}")))?;
        let c: usize = c.trim().parse().map_err(|_| fmt(off, format!("bad cluster id {c:?}")))?;
        match assign.get_mut(u) {
            Some(slot) if *slot == usize::MAX => *slot = c,
            Some(_) => return Err(fmt(off, format!("node {u} listed twice"))),
            None => return Err(fmt(off, format!("node {u} out of range for N={n}"))),
        }
    }
    if let Some((off, _)) = lines.next_line() {
        return Err(fmt(off, format!("more than {n} assignment lines")));
    }
    Partition::from_assignment(assign, p, eps).map_err(|e| fmt(0, e.to_string()))
}

pub fn save_partition(path: &Path, partition: &Partition, graph: Option<&Graph>) -> Result<(), IoError> {
    write_file(path, encode_partition(partition, graph).as_bytes())
}

pub fn load_partition(path: &Path) -> Result<Partition, IoError> {
    decode_partition(&read_text(path)?)
}

/// Yields non-blank lines with their starting byte offsets.
struct LineCursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    fn new(text: &'a str) -> Self {
        Self { text, pos: 0 }
    }

    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        while self.pos < self.text.len() {
            let start = self.pos;
            let rest = &self.text[start..];
            let (line, adv) = match rest.find('\n') {
                Some(i) => (&rest[..i], i + 1),
                None => (rest, rest.len()),
            };
            self.pos += adv;
            if !line.trim().is_empty() {
                return Some((start, line));
            }
        }
        None
    }
}

fn write_rows(s: &mut String, m: &Matrix) {
    for r in m.iter_rows() {
        let mut first = true;
        for x in r {
            if !first {
                s.push(' ');
            }
            first = false;
            write!(s, "{x}").expect("string write");
        }
        s.push('\n');
    }
}

/// `DENSE N=<N> layer=<k>` followed by `N` rows, or `BGA P=<P> layer=<k>`
/// followed per cluster by `cluster p: n×n nodes=<ids>` and `n` rows, and
/// finally `inter: P×P` and `P` rows. Values print in shortest round-trip
/// form.
pub fn encode_attention_dump(view: &AttnView) -> String {
    let mut s = String::new();
    match view {
        AttnView::Dense { scores, layer } => {
            writeln!(s, "DENSE N={} layer={layer}", scores.rows()).expect("string write");
            write_rows(&mut s, scores);
        }
        AttnView::Bga { partition, intra, inter, layer } => {
            writeln!(s, "BGA P={} layer={layer}", partition.num_parts()).expect("string write");
            for (p, (m, block)) in partition.members().iter().zip(intra).enumerate() {
                let ids: Vec<String> = m.iter().map(ToString::to_string).collect();
                writeln!(s, "cluster {p}: {0}×{0} nodes={1}", m.len(), ids.join(",")).expect("string write");
                write_rows(&mut s, block);
            }
            writeln!(s, "inter: {0}×{0}", partition.num_parts()).expect("string write");
            write_rows(&mut s, inter);
        }
    }
    s
}

fn parse_dim(tok: &str) -> Option<(usize, usize)> {
    let (a, b) = tok.split_once('×').or_else(|| tok.split_once('x'))?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

pub fn decode_attention_dump(text: &str) -> Result<AttnView, IoError> {
    let fmt = |offset: usize, msg: String| IoError::Format { what: "attention dump", offset, msg };
    let mut lines = LineCursor::new(text);
    let read_matrix = |lines: &mut LineCursor, rows: usize, cols: usize| -> Result<Matrix, IoError> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let (off, line) =
                lines.next_line().ok_or_else(|| fmt(text.len(), format!("truncated: expected row {r} of {rows}")))?;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| fmt(off, format!("bad number {tok:?}")))?);
            }
            if data.len() - before != cols {
                return Err(fmt(off, format!("expected {cols} values, found {}", data.len() - before)));
            }
        }
        Ok(Matrix::from_vec(rows, cols, data).expect("length checked"))
    };
    let (off, header) = lines.next_line().ok_or_else(|| fmt(0, "empty file".into()))?;
    let layer = match header_field(header, "layer") {
        Some(v) => v.parse().map_err(|_| fmt(off, "bad layer".into()))?,
        None => 0,
    };
    match header.split_whitespace().next() {
        Some("DENSE") => {
            let n: usize =
                header_field(header, "N").and_then(|v| v.parse().ok()).ok_or_else(|| fmt(off, "header lacks N=".into()))?;
            let scores = read_matrix(&mut lines, n, n)?;
            Ok(AttnView::Dense { scores, layer })
        }
        Some("BGA") => {
            let p: usize =
                header_field(header, "P").and_then(|v| v.parse().ok()).ok_or_else(|| fmt(off, "header lacks P=".into()))?;
            let mut intra = Vec::with_capacity(p);
            let mut members = Vec::with_capacity(p);
            for q in 0..p {
                let (off, line) =
                    lines.next_line().ok_or_else(|| fmt(text.len(), format!("truncated: expected cluster {q}")))?;
                let bad = || fmt(off, format!("expected `cluster {q}: n×n nodes=...`"));
                let rest = line.strip_prefix(&format!("cluster {q}:")).ok_or_else(bad)?;
                let mut toks = rest.split_whitespace();
                let (rows, cols) = toks.next().and_then(parse_dim).ok_or_else(bad)?;
                let ids: Vec<usize> = toks
                    .next()
                    .and_then(|t| t.strip_prefix("nodes="))
                    .ok_or_else(bad)?
                    .split(',')
                    .filter(|t| !t.is_empty())
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad())?;
                if rows != cols || ids.len() != rows {
                    return Err(bad());
                }
                intra.push(read_matrix(&mut lines, rows, cols)?);
                members.push(ids);
            }
            let (off, line) = lines.next_line().ok_or_else(|| fmt(text.len(), "truncated: expected inter".into()))?;
            let dims = line.strip_prefix("inter:").and_then(|r| parse_dim(r.trim()));
            if dims != Some((p, p)) {
                return Err(fmt(off, format!("expected `inter: {p}×{p}`")));
            }
            let inter = read_matrix(&mut lines, p, p)?;
            if let Some((off, _)) = lines.next_line() {
                return Err(fmt(off, "trailing content".into()));
            }
            let n: usize = members.iter().map(Vec::len).sum();
            let mut assign = vec![usize::MAX; n];
            for (q, m) in members.iter().enumerate() {
                for &u in m {
                    if u >= n || assign[u] != usize::MAX {
                        return Err(fmt(0, format!("node {u} out of range or listed twice")));
                    }
                    assign[u] = q;
                }
            }
            let partition = Partition::from_assignment(assign, p, f64::INFINITY).map_err(|e| fmt(0, e.to_string()))?;
            Ok(AttnView::Bga { partition, intra, inter, layer })
        }
        _ => Err(fmt(off, "expected DENSE or BGA header".into())),
    }
}

/// One JSON object per line.
pub fn encode_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("serialisable record"));
        s.push('\n');
    }
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serialisable value");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub checkpoint: String,
    pub attention_dump: u32,
    pub partition: u32,
    pub metrics: u32,
}

impl Default for FormatVersions {
    fn default() -> Self {
        Self {
            checkpoint: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            attention_dump: ATTENTION_DUMP_VERSION,
            partition: PARTITION_FILE_VERSION,
            metrics: METRICS_VERSION,
        }
    }
}

/// Self-description written next to every artifact set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub formats: FormatVersions,
    pub tool_version: String,
    pub artifacts: Vec<String>,
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Matrix::from_rows(&[vec![0.1, -2.5e-300], vec![f64::MAX, 1.0 / 3.0]]));
        s.add("bias", Matrix::zeros(1, 3));
        s.add("ε", Matrix::zeros(0, 4));
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let s = store();
        let back = decode_checkpoint(&encode_checkpoint(&s)).unwrap();
        assert_eq!(back.len(), 3);
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn checkpoint_errors() {
        let bytes = encode_checkpoint(&store());
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, IoError::Format { offset, .. } if offset == bytes.len() - 3), "{err}");
        let mut v2 = bytes.clone();
        v2[3] = b'2';
        let msg = decode_checkpoint(&v2).unwrap_err().to_string();
        assert!(msg.contains("CBT2") && msg.contains("CBT1"), "{msg}");
        assert!(decode_checkpoint(b"XYZW").is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let mut target = store();
        target.value_mut(crate::tensor::ParamStore::ids(&target).next().unwrap()).set(0, 0, 9.0);
        restore_params(&mut target, &store()).unwrap();
        assert_eq!(target, store());
        let mut other = ParamStore::new();
        other.add("a.weight", Matrix::zeros(1, 1));
        other.add("bias", Matrix::zeros(1, 3));
        other.add("ε", Matrix::zeros(0, 4));
        assert!(matches!(restore_params(&mut other, &store()), Err(IoError::Mismatch(_))));
    }

    #[test]
    fn partition_round_trip() {
        let p = Partition::from_assignment(vec![1, 0, 2, 1, 0, 2, 2], 3, 0.5).unwrap();
        let g = Graph::from_edges(7, [(0, 1), (1, 2), (3, 4)]).unwrap().0;
        let text = encode_partition(&p, Some(&g));
        assert!(text.starts_with("CBP1 N=7 P=3 eps=0.5 cut=3 maxload="));
        let back = decode_partition(&text).unwrap();
        assert_eq!(back.assignment(), p.assignment());
        assert_eq!(back, p);
        assert_eq!(text.lines().nth(3), Some("2\t2"));
        let cut = text.rfind("6\t").unwrap();
        assert!(matches!(decode_partition(&text[..cut]), Err(IoError::Format { offset, .. }) if offset == cut));
        let dup = text.replace("6\t2", "5\t2");
        assert!(matches!(decode_partition(&dup), Err(IoError::Format { .. })));
    }

    #[test]
    fn dense_dump_round_trip() {
        let v = AttnView::Dense { scores: Matrix::from_rows(&[vec![0.25, 0.75], vec![1.0 / 3.0, 2.0 / 3.0]]), layer: 2 };
        let text = encode_attention_dump(&v);
        assert!(text.starts_with("DENSE N=2 layer=2\n"));
        assert_eq!(decode_attention_dump(&text).unwrap(), v);
    }

    #[test]
    fn bga_dump_round_trip_and_truncation() {
        let partition = Partition::from_assignment(vec![0, 1, 0], 2, f64::INFINITY).unwrap();
        let v = AttnView::Bga {
            partition,
            intra: vec![Matrix::from_rows(&[vec![0.5, 0.5], vec![0.1, 0.9]]), Matrix::identity(1)],
            inter: Matrix::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]]),
            layer: 0,
        };
        let text = encode_attention_dump(&v);
        assert!(text.starts_with("BGA P=2 layer=0\ncluster 0: 2×2 nodes=0,2\n"));
        assert!(text.contains("inter: 2×2\n"));
        assert_eq!(decode_attention_dump(&text).unwrap(), v);
        let short = &text[..text.len() - 8];
        match decode_attention_dump(short).unwrap_err() {
            IoError::Format { offset, .. } => assert_eq!(offset, short.len()),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn jsonl_is_one_object_per_line() {
        let s = encode_jsonl(&[serde_json::json!({"a": 1}), serde_json::json!({"a": 0.1})]);
        assert_eq!(s, "{\"a\":1}\n{\"a\":0.1}\n");
    }
}
