//! Homophily profiles, attention-distance profiles, Attn-SNR, smoothness
//! and the attention identities.

use serde::Serialize;

use crate::graph::{khop_rings, Graph};
use crate::model::LayerCapture;
use crate::partition::Partition;
use crate::tensor::{Matrix, TensorError};

/// Head-averaged attention of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnView {
    /// Full row-stochastic `N × N` scores.
    Dense { scores: Matrix, layer: usize },
    /// Intra-cluster blocks plus pooled inter-cluster scores.
    Bga { partition: Partition, intra: Vec<Matrix>, inter: Matrix, layer: usize },
}

impl AttnView {
    /// The view of a captured layer. A single-cluster capture becomes a
    /// dense view of its intra block.
    pub fn from_capture(partition: &Partition, capture: &LayerCapture, layer: usize) -> Self {
        if partition.num_parts() == 1 && partition.members()[0].iter().enumerate().all(|(i, &u)| i == u) {
            return AttnView::Dense { scores: capture.intra[0].clone(), layer };
        }
        AttnView::Bga { partition: partition.clone(), intra: capture.intra.clone(), inter: capture.inter.clone(), layer }
    }

    pub fn num_nodes(&self) -> usize {
        match self {
            AttnView::Dense { scores, .. } => scores.rows(),
            AttnView::Bga { partition, .. } => partition.num_nodes(),
        }
    }

    pub fn layer(&self) -> usize {
        match self {
            AttnView::Dense { layer, .. } | AttnView::Bga { layer, .. } => *layer,
        }
    }

    /// Per-node attention row over all `N` nodes. For the BGA view the
    /// node's intra row and its cluster's pooled row (spread evenly over
    /// each target cluster) are weighted one half each, matching the two
    /// halves of the fusion input.
    pub fn row_into(&self, u: usize, out: &mut [f64]) {
        match self {
            AttnView::Dense { scores, .. } => out.copy_from_slice(scores.row(u)),
            AttnView::Bga { partition, intra, inter, .. } => {
                let members = partition.members();
                let p = partition.cluster_of(u);
                for (q, m) in members.iter().enumerate() {
                    let share = 0.5 * inter.get(p, q) / m.len() as f64;
                    for &v in m {
                        out[v] = share;
                    }
                }
                let local = members[p].binary_search(&u).expect("u is a member of its cluster");
                for (j, &v) in members[p].iter().enumerate() {
                    out[v] += 0.5 * intra[p].get(local, j);
                }
            }
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.num_nodes();
        let mut m = Matrix::zeros(n, n);
        for u in 0..n {
            self.row_into(u, m.row_mut(u));
        }
        m
    }

    /// Largest deviation of a row sum from 1, over every stored matrix.
    pub fn max_row_sum_error(&self) -> f64 {
        let err = |m: &Matrix| m.iter_rows().map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        match self {
            AttnView::Dense { scores, .. } => err(scores),
            AttnView::Bga { intra, inter, .. } => intra.iter().map(err).fold(err(inter), f64::max),
        }
    }
}

/// Node-averaged same-label fraction per hop distance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CukProfile {
    pub k_max: usize,
    /// `mean[k]` averages over nodes with a non-empty `k`-hop ring; `None`
    /// when no node has one.
    pub mean: Vec<Option<f64>>,
    pub per_node: Vec<Vec<Option<f64>>>,
}

pub fn empirical_cuk(graph: &Graph, labels: &[usize], k_max: usize) -> CukProfile {
    let n = graph.num_nodes();
    let mut per_node = Vec::with_capacity(n);
    let mut sums = vec![(0.0, 0usize); k_max + 1];
    for u in 0..n {
        let rings = khop_rings(graph, u, k_max);
        let row: Vec<Option<f64>> = rings
            .rings
            .iter()
            .map(|ring| {
                (!ring.is_empty())
                    .then(|| ring.iter().filter(|&&v| labels[v] == labels[u]).count() as f64 / ring.len() as f64)
            })
            .collect();
        for (k, c) in row.iter().enumerate() {
            if let Some(c) = c {
                sums[k].0 += c;
                sums[k].1 += 1;
            }
        }
        per_node.push(row);
    }
    let mean = sums.iter().map(|&(s, c)| (c > 0).then(|| s / c as f64)).collect();
    CukProfile { k_max, mean, per_node }
}

/// Iterates `C^k = (1 + |Y|ρC^{k−1} − ρ − C^{k−1}) / (|Y| − 1)` from
/// `C^0 = 1`, `C^1 = ρ`.
pub fn theoretical_cuk(rho: f64, num_classes: usize, k: usize) -> f64 {
    let y = num_classes as f64;
    match k {
        0 => 1.0,
        _ => {
            let mut c = rho;
            for _ in 1..k {
                c = (1.0 + y * rho * c - rho - c) / (y - 1.0);
            }
            c
        }
    }
}

/// `(|Y|ρ − 1) / (|Y| − 1)`, the contraction ratio of the recursion.
pub fn cuk_ratio(rho: f64, num_classes: usize) -> f64 {
    let y = num_classes as f64;
    (y * rho - 1.0) / (y - 1.0)
}

/// `C^k − 1/|Y| = (1 − 1/|Y|)·r^k`.
pub fn theoretical_cuk_deviation(rho: f64, num_classes: usize, k: usize) -> f64 {
    let y = num_classes as f64;
    (1.0 - 1.0 / y) * cuk_ratio(rho, num_classes).powi(k as i32)
}

pub fn theoretical_cuk_closed(rho: f64, num_classes: usize, k: usize) -> f64 {
    1.0 / num_classes as f64 + theoretical_cuk_deviation(rho, num_classes, k)
}

/// Hop-size-weighted same-label fraction over the `k_max`-hop reachable
/// set (all reachable nodes when `None`), per node.
pub fn cu_reachable(graph: &Graph, labels: &[usize], k_max: Option<usize>) -> Vec<f64> {
    let depth = k_max.unwrap_or(graph.num_nodes());
    (0..graph.num_nodes())
        .map(|u| {
            let rings = khop_rings(graph, u, depth);
            let total = rings.reachable_count();
            let same = rings.rings.iter().flatten().filter(|&&v| labels[v] == labels[u]).count();
            same as f64 / total as f64
        })
        .collect()
}

/// Node-averaged attention mass per hop distance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttnKProfile {
    pub k_max: usize,
    pub bins: Vec<f64>,
    /// Mass on nodes farther than `k_max` or unreachable.
    pub overflow: f64,
    /// Largest per-node `|Σ bins + overflow − 1|`.
    pub max_conservation_error: f64,
}

pub fn attn_k_profile(view: &AttnView, graph: &Graph, k_max: usize) -> AttnKProfile {
    let n = view.num_nodes();
    let mut bins = vec![0.0; k_max + 1];
    let mut overflow = 0.0;
    let mut worst: f64 = 0.0;
    let mut row = vec![0.0; n];
    let mut hop = vec![usize::MAX; n];
    for u in 0..n {
        view.row_into(u, &mut row);
        let rings = khop_rings(graph, u, k_max);
        for (k, ring) in rings.rings.iter().enumerate() {
            for &v in ring {
                hop[v] = k;
            }
        }
        let mut node_bins = vec![0.0; k_max + 1];
        let mut node_over = 0.0;
        for v in 0..n {
            match hop[v] {
                usize::MAX => node_over += row[v],
                k => node_bins[k] += row[v],
            }
        }
        for ring in &rings.rings {
            for &v in ring {
                hop[v] = usize::MAX;
            }
        }
        worst = worst.max((node_bins.iter().sum::<f64>() + node_over - 1.0).abs());
        for (b, x) in bins.iter_mut().zip(&node_bins) {
            *b += x / n as f64;
        }
        overflow += node_over / n as f64;
    }
    AttnKProfile { k_max, bins, overflow, max_conservation_error: worst }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum SnrStatus {
    Finite,
    /// No different-label mass: reported as +∞.
    NoNoise,
    /// No same-label mass: reported as −∞.
    NoSignal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttnSnrReport {
    pub same_label_mass: f64,
    pub diff_label_mass: f64,
    pub snr_db: f64,
    pub status: SnrStatus,
}

pub fn snr_from_masses(same: f64, diff: f64) -> Result<AttnSnrReport, TensorError> {
    if !(same >= 0.0 && diff >= 0.0) || (same == 0.0 && diff == 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "attn_snr",
            msg: format!("need non-negative masses, not both zero; got {same}, {diff}"),
        });
    }
    let (snr_db, status) = if diff == 0.0 {
        (f64::INFINITY, SnrStatus::NoNoise)
    } else if same == 0.0 {
        (f64::NEG_INFINITY, SnrStatus::NoSignal)
    } else {
        (10.0 * (same / diff).log10(), SnrStatus::Finite)
    };
    Ok(AttnSnrReport { same_label_mass: same, diff_label_mass: diff, snr_db, status })
}

fn label_masses(scores: &Matrix, rows: &[usize], cols: &[usize], labels: &[usize]) -> (f64, f64) {
    let (mut same, mut diff) = (0.0, 0.0);
    for (i, &u) in rows.iter().enumerate() {
        for (j, &v) in cols.iter().enumerate() {
            if labels[u] == labels[v] {
                same += scores.get(i, j);
            } else {
                diff += scores.get(i, j);
            }
        }
    }
    (same, diff)
}

/// `10·lg(same-label mass / different-label mass)`. BGA views use the
/// intra-cluster scores only.
pub fn attn_snr(view: &AttnView, labels: &[usize]) -> Result<AttnSnrReport, TensorError> {
    let (same, diff) = match view {
        AttnView::Dense { scores, .. } => {
            let all: Vec<usize> = (0..scores.rows()).collect();
            label_masses(scores, &all, &all, labels)
        }
        AttnView::Bga { partition, intra, .. } => partition
            .members()
            .iter()
            .zip(intra)
            .map(|(m, s)| label_masses(s, m, m, labels))
            .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1)),
    };
    snr_from_masses(same, diff)
}

fn denoise_block(scores: &Matrix, rows: &[usize], cols: &[usize], labels: &[usize], factor: f64) -> Matrix {
    let mut out = scores.clone();
    for (i, &u) in rows.iter().enumerate() {
        let row = out.row_mut(i);
        for (j, &v) in cols.iter().enumerate() {
            if labels[u] == labels[v] {
                row[j] *= factor;
            }
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

/// Oracle intervention: multiplies the same-label entries of every row by
/// `factor` and renormalises. On softmax scores this equals scaling the
/// same-label exp-logits before normalisation.
pub fn denoise_attention(view: &AttnView, labels: &[usize], factor: f64) -> Result<AttnView, TensorError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(TensorError::InvalidArgument { op: "denoise_attention", msg: format!("factor must be > 0, got {factor}") });
    }
    Ok(match view {
        AttnView::Dense { scores, layer } => {
            let all: Vec<usize> = (0..scores.rows()).collect();
            AttnView::Dense { scores: denoise_block(scores, &all, &all, labels, factor), layer: *layer }
        }
        AttnView::Bga { partition, intra, inter, layer } => AttnView::Bga {
            partition: partition.clone(),
            intra: partition.members().iter().zip(intra).map(|(m, s)| denoise_block(s, m, m, labels, factor)).collect(),
            inter: inter.clone(),
            layer: *layer,
        },
    })
}

/// Same as [`denoise_attention`] but starting from pre-softmax logits.
pub fn denoise_logits(logits: &Matrix, labels: &[usize], factor: f64) -> Result<Matrix, TensorError> {
    let view = AttnView::Dense { scores: crate::tensor::softmax_rows(logits), layer: 0 };
    match denoise_attention(&view, labels, factor)? {
        AttnView::Dense { scores, .. } => Ok(scores),
        AttnView::Bga { .. } => unreachable!("dense in, dense out"),
    }
}

/// `‖Z − ÂZ‖_F`.
pub fn smoothness_frobenius(z: &Matrix, view: &AttnView) -> Result<f64, TensorError> {
    let a = view.to_dense();
    let mut diff = a.matmul(z)?;
    diff.axpy(-1.0, z);
    Ok(diff.frobenius_norm())
}

/// Both sides of the per-node identity for full attention.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Thm31Node {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Thm31Report {
    pub nodes: Vec<Thm31Node>,
    /// Largest gap over non-degenerate nodes.
    pub max_gap: f64,
}

/// Different-label attention mass from `softmax(QKᵀ/√d)` against
/// `1 / (1 + (C_u/(1−C_u))·(η_u/γ_u))`, with sums over all `N` nodes.
pub fn thm31_identity(q: &Matrix, k: &Matrix, labels: &[usize]) -> Result<Thm31Report, TensorError> {
    let n = q.rows();
    let logits = q.matmul_nt(k)?.scaled(1.0 / (q.cols() as f64).sqrt());
    let scores = crate::tensor::softmax_rows(&logits);
    let mut nodes = Vec::with_capacity(n);
    let mut max_gap: f64 = 0.0;
    for u in 0..n {
        let (mut es, mut ed, mut ns, mut nd, mut lhs) = (0.0, 0.0, 0usize, 0usize, 0.0);
        let row_max = logits.row(u).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in 0..n {
            let e = (logits.get(u, v) - row_max).exp();
            if labels[v] == labels[u] {
                es += e;
                ns += 1;
            } else {
                ed += e;
                nd += 1;
                lhs += scores.get(u, v);
            }
        }
        let degenerate = ns < 2 || nd == 0;
        if degenerate {
            nodes.push(Thm31Node { lhs, rhs: f64::NAN, gap: f64::NAN, degenerate });
            continue;
        }
        // A common factor exp(row_max) cancels in η/γ.
        let (eta, gamma) = (es / ns as f64, ed / nd as f64);
        let c = ns as f64 / n as f64;
        let rhs = 1.0 / (1.0 + (c / (1.0 - c)) * (eta / gamma));
        let gap = (lhs - rhs).abs();
        max_gap = max_gap.max(gap);
        nodes.push(Thm31Node { lhs, rhs, gap, degenerate });
    }
    Ok(Thm31Report { nodes, max_gap })
}

/// Attention-score entries one attention layer materialises:
/// `Σ_p |V_p|² + P²`.
pub fn attention_cost(partition: &Partition) -> usize {
    partition.members().iter().map(|m| m.len() * m.len()).sum::<usize>() + partition.num_parts() * partition.num_parts()
}
