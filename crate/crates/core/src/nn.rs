//! Attention, feed-forward and graph-convolution blocks on top of the tape.

use std::sync::Arc;

use rand::Rng;

use crate::graph::Graph;
use crate::tensor::{Matrix, ParamId, ParamStore, SparseMatrix, Tape, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Uniform(−1/√fan_in, 1/√fan_in).
pub fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

/// `x·W (+ b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(fan_in, fan_out, fan_in, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = t.param(store, self.weight);
        let y = t.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = t.param(store, b);
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Matrix::filled(1, width, 1.0));
        let beta = store.add(format!("{name}.beta"), Matrix::zeros(1, width));
        Self { gamma, beta }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let g = t.param(store, self.gamma);
        let b = t.param(store, self.beta);
        t.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention with a post-norm residual.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub hidden: usize,
    pub num_heads: usize,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub norm: LayerNorm,
}

/// Output of an attention call.
pub struct AttentionOutput {
    pub out: Var,
    /// Head-averaged, row-stochastic scores (queries × keys), if requested.
    pub scores: Option<Matrix>,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, num_heads: usize, rng: &mut impl Rng) -> Result<Self, TensorError> {
        if num_heads == 0 || hidden % num_heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                msg: format!("hidden {hidden} is not divisible by {num_heads} heads"),
            });
        }
        let dh = hidden / num_heads;
        let mut mats = |kind: &str, rng: &mut _| -> Vec<ParamId> {
            (0..num_heads)
                .map(|i| store.add(format!("{name}.w{kind}.{i}"), uniform_init(hidden, dh, hidden, rng)))
                .collect()
        };
        let wq = mats("q", rng);
        let wk = mats("k", rng);
        let wv = mats("v", rng);
        let wo = store.add(format!("{name}.wo"), uniform_init(hidden, hidden, hidden, rng));
        let norm = LayerNorm::new(store, &format!("{name}.norm"), hidden);
        Ok(Self { hidden, num_heads, wq, wk, wv, wo, norm })
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    /// `concat_heads(softmax(QKᵀ/√d_head)·V)·W_O`, before the residual.
    pub fn mix(&self, t: &mut Tape, store: &ParamStore, hq: Var, hk: Var, capture: bool) -> Result<AttentionOutput, TensorError> {
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut avg: Option<Matrix> = None;
        for i in 0..self.num_heads {
            let wq = t.param(store, self.wq[i]);
            let wk = t.param(store, self.wk[i]);
            let wv = t.param(store, self.wv[i]);
            let q = t.matmul(hq, wq)?;
            let k = t.matmul(hk, wk)?;
            let v = t.matmul(hk, wv)?;
            let kt = t.transpose(k)?;
            let logits = t.matmul(q, kt)?;
            let logits = t.scale(logits, scale)?;
            let s = t.row_softmax(logits)?;
            if capture {
                match &mut avg {
                    Some(a) => a.add_assign(t.value(s)),
                    None => avg = Some(t.value(s).clone()),
                }
            }
            heads.push(t.matmul(s, v)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads)? };
        let wo = t.param(store, self.wo);
        let out = t.matmul(cat, wo)?;
        let scores = avg.map(|a| a.scaled(1.0 / self.num_heads as f64));
        Ok(AttentionOutput { out, scores })
    }

    /// `LayerNorm(H_q + dropout(mix))`.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        hq: Var,
        hk: Var,
        capture: bool,
        dropout: f64,
    ) -> Result<AttentionOutput, TensorError> {
        let AttentionOutput { out, scores } = self.mix(t, store, hq, hk, capture)?;
        let out = t.dropout(out, dropout)?;
        let res = t.add(hq, out)?;
        Ok(AttentionOutput { out: self.norm.forward(t, store, res)?, scores })
    }
}

/// `LayerNorm(H + Lin2(ReLU(Lin1 H)))` with a 4× inner width.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnBlock {
    pub lin1: Linear,
    pub lin2: Linear,
    pub norm: LayerNorm,
}

impl FfnBlock {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut impl Rng) -> Self {
        let lin1 = Linear::new(store, &format!("{name}.lin1"), hidden, 4 * hidden, true, rng);
        let lin2 = Linear::new(store, &format!("{name}.lin2"), 4 * hidden, hidden, true, rng);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), hidden);
        Self { lin1, lin2, norm }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, h: Var, dropout: f64) -> Result<Var, TensorError> {
        let a = self.lin1.forward(t, store, h)?;
        let a = t.relu(a)?;
        let b = self.lin2.forward(t, store, a)?;
        let b = t.dropout(b, dropout)?;
        let res = t.add(h, b)?;
        self.norm.forward(t, store, res)
    }
}

/// `Ã = D̃^{-1/2}(A + I)D̃^{-1/2}` with `d̃ = degree + 1`.
pub fn normalized_adjacency(graph: &Graph) -> Arc<SparseMatrix> {
    let n = graph.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n).map(|u| 1.0 / ((graph.degree(u) + 1) as f64).sqrt()).collect();
    let rows = (0..n)
        .map(|u| {
            let mut row: Vec<(usize, f64)> = graph.neighbors(u).iter().map(|&v| (v, inv_sqrt[u] * inv_sqrt[v])).collect();
            let at = row.partition_point(|&(v, _)| v < u);
            row.insert(at, (u, inv_sqrt[u] * inv_sqrt[u]));
            row
        })
        .collect();
    Arc::new(SparseMatrix::from_rows(n, rows).expect("CSR neighbour lists are sorted"))
}

/// One graph convolution `act(Ã · dropout(H) · W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub lin: Linear,
    pub activation: bool,
}

impl GcnLayer {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, activation: bool, rng: &mut impl Rng) -> Self {
        Self { lin: Linear::new(store, name, fan_in, fan_out, false, rng), activation }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, adj: &Arc<SparseMatrix>, h: Var, dropout: f64) -> Result<Var, TensorError> {
        if adj.cols() != t.shape(h).0 {
            return Err(TensorError::Shape { op: "gcn", lhs: adj.shape(), rhs: t.shape(h) });
        }
        let h = t.dropout(h, dropout)?;
        let hw = self.lin.forward(t, store, h)?;
        let out = t.spmm(adj, hw)?;
        if self.activation {
            t.relu(out)
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256StarStar;

    fn rng() -> Xoshiro256StarStar {
        Xoshiro256StarStar::seed_from_u64(11)
    }

    #[test]
    fn single_node_attention_scores() {
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "a", 4, 2, &mut rng()).unwrap();
        let mut t = Tape::new();
        let h = t.constant(Matrix::from_rows(&[vec![0.1, -0.4, 0.3, 0.9]]));
        let out = block.forward(&mut t, &store, h, h, true, 0.0).unwrap();
        assert_eq!(out.scores.unwrap(), Matrix::scalar(1.0));
        assert_eq!(t.shape(out.out), (1, 4));
    }

    fn scalar_block(store: &mut ParamStore, q: f64) -> AttentionBlock {
        let block = AttentionBlock::new(store, "a", 1, 1, &mut rng()).unwrap();
        *store.value_mut(block.wq[0]) = Matrix::scalar(q);
        *store.value_mut(block.wk[0]) = Matrix::scalar(1.0);
        *store.value_mut(block.wv[0]) = Matrix::scalar(1.0);
        *store.value_mut(block.wo) = Matrix::scalar(1.0);
        block
    }

    #[test]
    fn hand_computed_mixture() {
        let mut store = ParamStore::new();
        let block = scalar_block(&mut store, 1.0);
        let mut t = Tape::new();
        let (a, b, c) = (0.5, -1.0, 2.0);
        let h = t.constant(Matrix::from_rows(&[vec![a], vec![b], vec![c]]));
        let out = block.mix(&mut t, &store, h, h, true).unwrap();
        let vals = [a, b, c];
        for (i, &qi) in vals.iter().enumerate() {
            let w: Vec<f64> = vals.iter().map(|&kj| (qi * kj).exp()).collect();
            let z: f64 = w.iter().sum();
            let expect: f64 = w.iter().zip(vals).map(|(wj, vj)| wj / z * vj).sum();
            assert!((t.value(out.out).get(i, 0) - expect).abs() < 1e-14);
        }
        let scores = out.scores.unwrap();
        for r in scores.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_key_takes_all_mass() {
        let mut store = ParamStore::new();
        let mut last = 0.0;
        for q in [1.0, 10.0, 100.0] {
            let block = scalar_block(&mut store, q);
            let mut t = Tape::new();
            let h = t.constant(Matrix::from_rows(&[vec![1.0], vec![0.5], vec![0.1]]));
            let s = block.mix(&mut t, &store, h, h, true).unwrap().scores.unwrap();
            assert!(s.get(0, 0) > last);
            last = s.get(0, 0);
        }
        assert!(last > 1.0 - 1e-12);
    }

    #[test]
    fn heads_replicated_match_single_head() {
        let mut r = rng();
        let h = 4;
        let mut two = ParamStore::new();
        let b2 = AttentionBlock::new(&mut two, "a", h, 2, &mut r).unwrap();
        let (a, bm, c) = (uniform_init(h, 2, h, &mut r), uniform_init(h, 2, h, &mut r), uniform_init(h, 2, h, &mut r));
        for i in 0..2 {
            *two.value_mut(b2.wq[i]) = a.clone();
            *two.value_mut(b2.wk[i]) = bm.clone();
            *two.value_mut(b2.wv[i]) = c.clone();
        }
        let wo2 = two.value(b2.wo).clone();

        let mut one = ParamStore::new();
        let b1 = AttentionBlock::new(&mut one, "a", h, 1, &mut r).unwrap();
        let pad = |m: &Matrix, s: f64| Matrix::from_fn(h, h, |i, j| if j < 2 { m.get(i, j) * s } else { 0.0 });
        *one.value_mut(b1.wq[0]) = pad(&a, 2f64.sqrt());
        *one.value_mut(b1.wk[0]) = pad(&bm, 1.0);
        *one.value_mut(b1.wv[0]) = pad(&c, 1.0);
        *one.value_mut(b1.wo) = Matrix::from_fn(h, h, |i, j| if i < 2 { wo2.get(i, j) + wo2.get(i + 2, j) } else { 0.0 });

        let x = uniform_init(5, h, 1, &mut r);
        let run = |store: &ParamStore, block: &AttentionBlock| {
            let mut t = Tape::new();
            let hx = t.constant(x.clone());
            let o = block.forward(&mut t, store, hx, hx, true, 0.0).unwrap();
            (t.value(o.out).clone(), o.scores.unwrap())
        };
        let (o1, s1) = run(&one, &b1);
        let (o2, s2) = run(&two, &b2);
        assert!(o1.max_abs_diff(&o2) < 1e-12);
        assert!(s1.max_abs_diff(&s2) < 1e-12);
    }

    #[test]
    fn zero_ffn_is_layer_norm() {
        let mut store = ParamStore::new();
        let ffn = FfnBlock::new(&mut store, "f", 3, &mut rng());
        for id in [ffn.lin1.weight, ffn.lin2.weight] {
            let (r, c) = store.value(id).shape();
            *store.value_mut(id) = Matrix::zeros(r, c);
        }
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 4.0], vec![-1.0, 0.0, 3.0]]);
        let mut t = Tape::new();
        let hx = t.constant(x.clone());
        let y = ffn.forward(&mut t, &store, hx, 0.0).unwrap();
        let g = t.constant(Matrix::filled(1, 3, 1.0));
        let b = t.constant(Matrix::zeros(1, 3));
        let ln = t.layer_norm(hx, g, b, LAYER_NORM_EPS).unwrap();
        assert_eq!(t.shape(y), (2, 3));
        assert!(t.value(y).max_abs_diff(t.value(ln)) < 1e-15);
    }

    #[test]
    fn ffn_gradient_check() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let ffn = FfnBlock::new(&mut store, "f", 3, &mut r);
        for id in store.ids().collect::<Vec<_>>() {
            let (rows, cols) = store.value(id).shape();
            *store.value_mut(id) = uniform_init(rows, cols, 1, &mut r);
        }
        let x = uniform_init(4, 3, 1, &mut r);
        let rep = grad_check::<TensorError, _>(&mut store, DEFAULT_STEP, None, |t, s| {
            let hx = t.constant(x.clone());
            let y = ffn.forward(t, s, hx, 0.0)?;
            let w = t.constant(Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.5));
            let y = t.mul(y, w)?;
            t.sum(y)
        })
        .unwrap();
        assert!(rep.max_relative_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn adjacency_examples() {
        let iso = normalized_adjacency(&Graph::from_edges(1, []).unwrap().0);
        assert_eq!(iso.to_dense(), Matrix::scalar(1.0));
        let pair = normalized_adjacency(&Graph::from_edges(2, [(0, 1)]).unwrap().0).to_dense();
        assert!(pair.as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let star = Graph::from_edges(4, [(0, 1), (0, 2), (0, 3)]).unwrap().0;
        let a = normalized_adjacency(&star).to_dense();
        assert_eq!(a, a.transpose());
        let (c, l) = (1.0 / 4.0, 1.0 / 8f64.sqrt());
        assert!((a.get(0, 0) - c).abs() < 1e-15 && (a.get(0, 1) - l).abs() < 1e-15 && (a.get(1, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gcn_identity_on_star() {
        let star = Graph::from_edges(4, [(0, 1), (0, 2), (0, 3)]).unwrap().0;
        let adj = normalized_adjacency(&star);
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "g", 2, 2, false, &mut rng());
        *store.value_mut(layer.lin.weight) = Matrix::identity(2);
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![3.0, -1.0], vec![4.0, 2.0]]);
        let mut t = Tape::new();
        let hx = t.constant(x.clone());
        let y = layer.forward(&mut t, &store, &adj, hx, 0.0).unwrap();
        let s8 = 8f64.sqrt();
        let hub = [0.25 * 1.0 + (2.0 + 3.0 + 4.0) / s8, 0.25 * 0.0 + (1.0 - 1.0 + 2.0) / s8];
        assert!((t.value(y).get(0, 0) - hub[0]).abs() < 1e-14);
        assert!((t.value(y).get(0, 1) - hub[1]).abs() < 1e-14);
        let leaf = [0.5 * 2.0 + 1.0 / s8, 0.5 * 1.0];
        assert!((t.value(y).get(1, 0) - leaf[0]).abs() < 1e-14);
        assert!((t.value(y).get(1, 1) - leaf[1]).abs() < 1e-14);
    }

    #[test]
    fn gcn_rejects_wrong_rows() {
        let adj = normalized_adjacency(&Graph::from_edges(3, []).unwrap().0);
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "g", 2, 2, true, &mut rng());
        let mut t = Tape::new();
        let hx = t.constant(Matrix::zeros(2, 2));
        assert!(matches!(layer.forward(&mut t, &store, &adj, hx, 0.0), Err(TensorError::Shape { .. })));
    }
}
