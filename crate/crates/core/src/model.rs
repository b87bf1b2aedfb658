//! The bi-level global attention model with its GCN branch, the two label
//! heads and the collaborative objective.

use std::sync::Arc;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::nn::{AttentionBlock, FfnBlock, GcnLayer, Linear};
use crate::partition::Partition;
use crate::tensor::{softmax_rows, Matrix, ParamId, ParamStore, SparseMatrix, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Intra-cluster attention, pooled inter-cluster attention and fusion.
    #[default]
    Bga,
    /// One full N×N attention: the same stack run on a single cluster.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub gcn_hidden: usize,
    pub num_bga_layers: usize,
    pub num_heads: usize,
    pub dropout_gcn: f64,
    pub dropout_bga: f64,
    pub gcn_layers: usize,
    pub alpha: f64,
    pub tau: f64,
    pub attention: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            gcn_hidden: 64,
            num_bga_layers: 1,
            num_heads: 1,
            dropout_gcn: 0.5,
            dropout_bga: 0.1,
            gcn_layers: 2,
            alpha: 0.8,
            tau: 0.9,
            attention: AttentionMode::Bga,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.hidden == 0 || self.gcn_hidden == 0 {
            return bad("hidden sizes must be positive".into());
        }
        if self.num_heads == 0 || self.hidden % self.num_heads != 0 {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.num_heads));
        }
        if self.num_bga_layers == 0 {
            return bad("need at least one attention layer".into());
        }
        if !(2..=3).contains(&self.gcn_layers) {
            return bad(format!("gcn_layers must be 2 or 3, got {}", self.gcn_layers));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        for (name, p) in [("dropout_gcn", self.dropout_gcn), ("dropout_bga", self.dropout_bga)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        Ok(())
    }
}

/// One intra/inter/fusion stage.
#[derive(Clone, Debug, PartialEq)]
pub struct BgaLayer {
    pub intra_attn: AttentionBlock,
    pub intra_ffn: FfnBlock,
    pub inter_attn: AttentionBlock,
    pub inter_ffn: FfnBlock,
    pub fusion: Linear,
}

/// Scores captured from one attention stage, head-averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCapture {
    /// Per cluster, a `|V_p| × |V_p|` matrix in the order of
    /// `partition.members()[p]`.
    pub intra: Vec<Matrix>,
    /// `P × P` scores between cluster tokens.
    pub inter: Matrix,
}

pub struct BgaOutput {
    pub repr: Var,
    pub captures: Vec<LayerCapture>,
    /// Attention-score entries materialised, summed over layers.
    pub attention_cost: usize,
}

pub struct ForwardOutput {
    pub gcn_logits: Var,
    pub bga_logits: Var,
    pub captures: Vec<LayerCapture>,
    pub attention_cost: usize,
}

/// Graph-level inputs shared by every forward pass.
pub struct ModelInputs {
    pub features: Matrix,
    pub adjacency: Arc<SparseMatrix>,
    pub partition: Partition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cobformer {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    pub embed: Linear,
    pub bga: Vec<BgaLayer>,
    pub gcn: Vec<GcnLayer>,
    pub head_g: Linear,
    pub head_t: Linear,
}

impl Cobformer {
    /// Registers every parameter in `store`. Initialisation is determined
    /// by `seed`.
    pub fn new(store: &mut ParamStore, config: ModelConfig, input_dim: usize, num_classes: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if input_dim == 0 || num_classes == 0 {
            return Err(ModelError::Config("input_dim and num_classes must be positive".into()));
        }
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let h = config.hidden;
        let embed = Linear::new(store, "embed", input_dim, h, true, &mut rng);
        let mut bga = Vec::new();
        for l in 0..config.num_bga_layers {
            bga.push(BgaLayer {
                intra_attn: AttentionBlock::new(store, &format!("bga{l}.intra.attn"), h, config.num_heads, &mut rng)?,
                intra_ffn: FfnBlock::new(store, &format!("bga{l}.intra.ffn"), h, &mut rng),
                inter_attn: AttentionBlock::new(store, &format!("bga{l}.inter.attn"), h, config.num_heads, &mut rng)?,
                inter_ffn: FfnBlock::new(store, &format!("bga{l}.inter.ffn"), h, &mut rng),
                fusion: Linear::new(store, &format!("bga{l}.fusion"), 2 * h, h, false, &mut rng),
            });
        }
        let mut gcn = Vec::new();
        let mut fan_in = input_dim;
        for l in 0..config.gcn_layers {
            let last = l + 1 == config.gcn_layers;
            gcn.push(GcnLayer::new(store, &format!("gcn{l}"), fan_in, config.gcn_hidden, !last, &mut rng));
            fan_in = config.gcn_hidden;
        }
        let head_g = Linear::new(store, "head_g", config.gcn_hidden, num_classes, true, &mut rng);
        let head_t = Linear::new(store, "head_t", h, num_classes, true, &mut rng);
        Ok(Self { config, input_dim, num_classes, embed, bga, gcn, head_g, head_t })
    }

    /// Parameters trained with the GCN weight decay: the GCN layers and
    /// the Lin-G head. Everything else belongs to the attention group.
    pub fn gcn_group(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.gcn.iter().map(|l| l.lin.weight).collect();
        ids.push(self.head_g.weight);
        ids.extend(self.head_g.bias);
        ids
    }

    pub fn bga_group(&self, store: &ParamStore) -> Vec<ParamId> {
        let gcn = self.gcn_group();
        store.ids().filter(|id| !gcn.contains(id)).collect()
    }

    /// The partition the attention stack runs on for this model's mode.
    pub fn effective_partition<'a>(&self, partition: &'a Partition) -> std::borrow::Cow<'a, Partition> {
        match self.config.attention {
            AttentionMode::Bga => std::borrow::Cow::Borrowed(partition),
            AttentionMode::Vanilla => std::borrow::Cow::Owned(Partition::trivial(partition.num_nodes())),
        }
    }

    /// Embedding followed by the attention stages, on `partition` as given.
    pub fn bga_forward(&self, t: &mut Tape, store: &ParamStore, x: Var, partition: &Partition, capture: bool) -> Result<BgaOutput, ModelError> {
        let n = t.shape(x).0;
        if partition.num_nodes() != n {
            return Err(ModelError::Config(format!("partition covers {} nodes, features have {n}", partition.num_nodes())));
        }
        let p_drop = self.config.dropout_bga;
        let members: Arc<[Vec<usize>]> = partition.members().to_vec().into();
        let assignment: Arc<[usize]> = partition.assignment().into();
        // Row of each node inside the cluster-ordered stack.
        let order: Vec<usize> = members.iter().flatten().copied().collect();
        let mut inverse = vec![0; n];
        for (pos, &u) in order.iter().enumerate() {
            inverse[u] = pos;
        }
        let inverse: Arc<[usize]> = inverse.into();
        let single = members.len() == 1;

        let h = self.embed.forward(t, store, x)?;
        let h = t.relu(h)?;
        let mut h = t.dropout(h, p_drop)?;
        let mut captures = Vec::new();
        let mut cost = 0;
        for layer in &self.bga {
            let mut blocks = Vec::with_capacity(members.len());
            let mut intra = Vec::new();
            for m in members.iter() {
                let hp = if single && m.iter().enumerate().all(|(i, &u)| i == u) { h } else { t.gather_rows(h, m.clone())? };
                let a = layer.intra_attn.forward(t, store, hp, hp, capture, p_drop)?;
                cost += m.len() * m.len();
                intra.extend(a.scores);
                blocks.push(layer.intra_ffn.forward(t, store, a.out, p_drop)?);
            }
            let intra_out = if single {
                let stacked = blocks[0];
                if order.iter().enumerate().all(|(i, &u)| i == u) { stacked } else { t.gather_rows(stacked, inverse.clone())? }
            } else {
                let stacked = t.concat_rows(&blocks)?;
                t.gather_rows(stacked, inverse.clone())?
            };

            let tokens = t.mean_rows(intra_out, members.clone())?;
            let a = layer.inter_attn.forward(t, store, tokens, tokens, capture, p_drop)?;
            cost += members.len() * members.len();
            let inter_out = layer.inter_ffn.forward(t, store, a.out, p_drop)?;
            let expanded = t.gather_rows(inter_out, assignment.clone())?;
            let cat = t.concat_cols(&[intra_out, expanded])?;
            h = layer.fusion.forward(t, store, cat)?;
            if let Some(inter) = a.scores {
                captures.push(LayerCapture { intra, inter });
            }
        }
        Ok(BgaOutput { repr: h, captures, attention_cost: cost })
    }

    pub fn gcn_forward(&self, t: &mut Tape, store: &ParamStore, x: Var, adjacency: &Arc<SparseMatrix>) -> Result<Var, ModelError> {
        let mut h = x;
        for layer in &self.gcn {
            h = layer.forward(t, store, adjacency, h, self.config.dropout_gcn)?;
        }
        Ok(h)
    }

    /// Logits of the Lin-G and Lin-T heads.
    pub fn predict_heads(&self, t: &mut Tape, store: &ParamStore, gcn_out: Var, bga_out: Var) -> Result<(Var, Var), ModelError> {
        let zg = self.head_g.forward(t, store, gcn_out)?;
        let zt = self.head_t.forward(t, store, bga_out)?;
        Ok((zg, zt))
    }

    /// Both branches and heads. In vanilla mode the given partition is
    /// ignored.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, inputs: &ModelInputs, capture: bool) -> Result<ForwardOutput, ModelError> {
        let x = t.constant(inputs.features.clone());
        if inputs.features.cols() != self.input_dim {
            return Err(ModelError::Config(format!(
                "model expects {} input features, got {}",
                self.input_dim,
                inputs.features.cols()
            )));
        }
        let gcn_out = self.gcn_forward(t, store, x, &inputs.adjacency)?;
        let partition = self.effective_partition(&inputs.partition);
        let bga = self.bga_forward(t, store, x, &partition, capture)?;
        let (gcn_logits, bga_logits) = self.predict_heads(t, store, gcn_out, bga.repr)?;
        Ok(ForwardOutput { gcn_logits, bga_logits, captures: bga.captures, attention_cost: bga.attention_cost })
    }
}

/// `row_softmax(logits · τ)`.
pub fn soft_labels(logits: &Matrix, tau: f64) -> Matrix {
    softmax_rows(&logits.scaled(tau))
}

/// Per-node approximate score between a node of cluster `p` and any node
/// of cluster `q`: `α̇_pq / |V_q|`.
pub fn approx_global_attention(partition: &Partition, inter_scores: &Matrix, p: usize, q: usize) -> f64 {
    inter_scores.get(p, q) / partition.members()[q].len() as f64
}

/// Largest absolute difference between the pooled value path
/// `Σ_q α̇_pq · mean(H_q)·W_V` and its per-node expansion
/// `Σ_q Σ_{v∈V_q} (α̇_pq/|V_q|)·h_v·W_V`, over all clusters `p`.
pub fn pooled_identity_gap(h: &Matrix, partition: &Partition, inter_scores: &Matrix, wv: &Matrix) -> Result<f64, TensorError> {
    let members = partition.members();
    let pcount = members.len();
    let hv = h.matmul(wv)?;
    let mut means = Matrix::zeros(pcount, h.cols());
    for (q, m) in members.iter().enumerate() {
        for &v in m {
            for (o, x) in means.row_mut(q).iter_mut().zip(h.row(v)) {
                *o += x / m.len() as f64;
            }
        }
    }
    let tokens_v = means.matmul(wv)?;
    let pooled = inter_scores.matmul(&tokens_v)?;
    let mut expanded = Matrix::zeros(pcount, wv.cols());
    for p in 0..pcount {
        for (q, m) in members.iter().enumerate() {
            for &v in m {
                let a = approx_global_attention(partition, inter_scores, p, q);
                for (o, x) in expanded.row_mut(p).iter_mut().zip(hv.row(v)) {
                    *o += a * x;
                }
            }
        }
    }
    Ok(pooled.max_abs_diff(&expanded))
}

/// The pieces of the objective, as tape variables.
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    /// `None` when `alpha = 1`, in which case the term is never built.
    pub co: Option<Var>,
}

/// Soft-label distributions used as fixed targets in the co-training term.
pub struct SoftTargets<'a> {
    pub gcn: &'a Matrix,
    pub bga: &'a Matrix,
}

fn mean_log_likelihood(t: &mut Tape, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var, TensorError> {
    let probs = t.row_softmax(logits)?;
    let logp = t.log(probs)?;
    let sel = t.row_select(logp, mask)?;
    let (rows, cols) = t.shape(sel);
    let picked: Vec<usize> = labels.iter().zip(mask).filter(|(_, &m)| m).map(|(&y, _)| y).collect();
    let onehot = Matrix::from_fn(rows, cols, |r, c| if picked[r] == c { 1.0 / rows as f64 } else { 0.0 });
    let onehot = t.constant(onehot);
    let w = t.mul(sel, onehot)?;
    t.sum(w)
}

/// `−mean_u Σ_c target_c · log(pred_c)` over the rows in `mask`.
fn soft_cross_entropy(t: &mut Tape, target: Var, pred: Var, mask: &[bool], count: usize) -> Result<Var, TensorError> {
    let logp = t.log(pred)?;
    let logp = t.row_select(logp, mask)?;
    let tgt = t.row_select(target, mask)?;
    let prod = t.mul(tgt, logp)?;
    let s = t.sum(prod)?;
    t.scale(s, -1.0 / count as f64)
}

/// `α·L_ce + (1−α)·L_co` on the two heads' logits.
///
/// The target side of each co-training cross-entropy is cut from the
/// gradient. By default the targets are this pass's own soft labels;
/// `frozen` substitutes fixed distributions instead.
pub fn collaborative_loss(
    t: &mut Tape,
    gcn_logits: Var,
    bga_logits: Var,
    labels: &[usize],
    train_mask: &[bool],
    alpha: f64,
    tau: f64,
    frozen: Option<SoftTargets<'_>>,
) -> Result<LossParts, ModelError> {
    if !train_mask.iter().any(|&m| m) {
        return Err(ModelError::Config("training mask is empty".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) || !(tau > 0.0) {
        return Err(ModelError::Config(format!("need alpha in (0, 1] and tau > 0, got {alpha}, {tau}")));
    }
    let lg = mean_log_likelihood(t, gcn_logits, labels, train_mask)?;
    let lt = mean_log_likelihood(t, bga_logits, labels, train_mask)?;
    let both = t.add(lg, lt)?;
    let ce = t.scale(both, -1.0)?;
    if alpha == 1.0 {
        return Ok(LossParts { total: ce, ce, co: None });
    }

    let unlabeled: Vec<bool> = train_mask.iter().map(|&m| !m).collect();
    let count = unlabeled.iter().filter(|&&u| u).count();
    let co = if count == 0 {
        t.constant(Matrix::scalar(0.0))
    } else {
        let zg = t.scale(gcn_logits, tau)?;
        let sg = t.row_softmax(zg)?;
        let zt = t.scale(bga_logits, tau)?;
        let st = t.row_softmax(zt)?;
        let (tg, tt) = match frozen {
            Some(f) => (t.constant(f.gcn.clone()), t.constant(f.bga.clone())),
            None => (t.detach(sg), t.detach(st)),
        };
        let a = soft_cross_entropy(t, tg, st, &unlabeled, count)?;
        let b = soft_cross_entropy(t, tt, sg, &unlabeled, count)?;
        t.add(a, b)?
    };
    let wce = t.scale(ce, alpha)?;
    let wco = t.scale(co, 1.0 - alpha)?;
    let total = t.add(wce, wco)?;
    Ok(LossParts { total, ce, co: Some(co) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nn::normalized_adjacency;

    fn tiny_inputs(n: usize, d: usize, assignment: Vec<usize>, p: usize) -> ModelInputs {
        let edges: Vec<(usize, usize)> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        let g = Graph::from_edges(n, edges).unwrap().0;
        ModelInputs {
            features: Matrix::from_fn(n, d, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.5),
            adjacency: normalized_adjacency(&g),
            partition: Partition::from_assignment(assignment, p, 10.0).unwrap(),
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig { hidden: 4, gcn_hidden: 4, ..ModelConfig::default() }
    }

    #[test]
    fn single_node_single_cluster() {
        let mut store = ParamStore::new();
        let m = Cobformer::new(&mut store, small_config(), 3, 2, 0).unwrap();
        let inputs = tiny_inputs(1, 3, vec![0], 1);
        let mut t = Tape::new();
        let out = m.forward(&mut t, &store, &inputs, true).unwrap();
        assert_eq!(out.captures[0].intra, vec![Matrix::scalar(1.0)]);
        assert_eq!(out.captures[0].inter, Matrix::scalar(1.0));
        assert_eq!(t.shape(out.bga_logits), (1, 2));
        assert_eq!(out.attention_cost, 2);
    }

    #[test]
    fn cost_counter_and_block_shapes() {
        let mut store = ParamStore::new();
        let m = Cobformer::new(&mut store, small_config(), 3, 2, 0).unwrap();
        let inputs = tiny_inputs(5, 3, vec![0, 1, 0, 1, 1], 2);
        let mut t = Tape::new();
        let out = m.forward(&mut t, &store, &inputs, true).unwrap();
        assert_eq!(out.attention_cost, 4 + 9 + 4);
        let shapes: Vec<_> = out.captures[0].intra.iter().map(Matrix::shape).collect();
        assert_eq!(shapes, vec![(2, 2), (3, 3)]);
        assert_eq!(out.captures[0].inter.shape(), (2, 2));
    }

    #[test]
    fn vanilla_mode_uses_one_cluster() {
        let mut store = ParamStore::new();
        let cfg = ModelConfig { attention: AttentionMode::Vanilla, ..small_config() };
        let m = Cobformer::new(&mut store, cfg, 3, 2, 0).unwrap();
        let inputs = tiny_inputs(5, 3, vec![0, 1, 0, 1, 1], 2);
        let mut t = Tape::new();
        let out = m.forward(&mut t, &store, &inputs, true).unwrap();
        assert_eq!(out.attention_cost, 26);
        assert_eq!(out.captures[0].intra[0].shape(), (5, 5));
    }

    #[test]
    fn soft_label_examples() {
        let z = Matrix::from_rows(&[vec![2f64.ln(), 0.0]]);
        let s = soft_labels(&z, 1.0);
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        let flat = soft_labels(&Matrix::from_rows(&[vec![3.0, -1.0, 0.5]]), 1e-6);
        assert!(flat.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-5));
        assert_eq!(soft_labels(&z, 1.0), softmax_rows(&z));
    }

    #[test]
    fn approx_score_divides_by_cluster_size() {
        let p = Partition::from_assignment(vec![0, 1, 1, 1], 2, 10.0).unwrap();
        let inter = Matrix::from_rows(&[vec![0.4, 0.6], vec![0.5, 0.5]]);
        assert!((approx_global_attention(&p, &inter, 0, 1) - 0.2).abs() < 1e-15);
        let one = Partition::trivial(4);
        assert_eq!(approx_global_attention(&one, &Matrix::scalar(1.0), 0, 0), 0.25);
    }

    fn co_loss_value(sg: [f64; 2], st: [f64; 2]) -> f64 {
        // Logits whose softmax (τ = 1) reproduces the given rows.
        let zg = Matrix::from_rows(&[vec![0.0, 0.0], vec![sg[0].ln(), sg[1].ln()]]);
        let zt = Matrix::from_rows(&[vec![0.0, 0.0], vec![st[0].ln(), st[1].ln()]]);
        let mut t = Tape::new();
        let g = t.constant(zg);
        let tt = t.constant(zt);
        let parts = collaborative_loss(&mut t, g, tt, &[0, 0], &[true, false], 0.5, 1.0, None).unwrap();
        t.value(parts.co.unwrap()).item()
    }

    #[test]
    fn co_loss_hand_value() {
        let expect = -(0.8 * 0.6f64.ln() + 0.2 * 0.4f64.ln() + 0.6 * 0.8f64.ln() + 0.4 * 0.2f64.ln());
        assert!((expect - 1.369_579_941_149_79).abs() < 1e-12);
        assert!((co_loss_value([0.8, 0.2], [0.6, 0.4]) - expect).abs() < 1e-12);
        assert!((co_loss_value([0.6, 0.4], [0.8, 0.2]) - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_train_mask_is_rejected() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(2, 2));
        assert!(matches!(
            collaborative_loss(&mut t, z, z, &[0, 1], &[false, false], 0.8, 0.9, None),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            ModelConfig { alpha: 0.0, ..ModelConfig::default() },
            ModelConfig { tau: 0.0, ..ModelConfig::default() },
            ModelConfig { num_heads: 3, ..ModelConfig::default() },
            ModelConfig { gcn_layers: 4, ..ModelConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
