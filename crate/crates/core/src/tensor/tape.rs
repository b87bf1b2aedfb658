use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::{Matrix, ParamId, ParamStore, SparseMatrix, TensorError};

/// Smallest argument passed to `ln` by [`Tape::log`].
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    MeanRows(Var, Arc<[Vec<usize>]>),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    Relu(Var),
    Dropout(Var, Vec<f64>),
    Log(Var),
    Sum(Var),
    Spmm(Arc<SparseMatrix>, Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in evaluation order so that one reverse
/// sweep can propagate gradients back to the parameters.
///
/// A value only gets a recorded op when at least one of its inputs requires
/// a gradient; everything else is stored as a constant.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
    grad_enabled: bool,
    dropout_seed: u64,
    dropout_counter: u64,
    consumed: bool,
    relu_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Evaluation-mode tape (dropout disabled) that tracks gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            grad_enabled: true,
            dropout_seed: 0,
            dropout_counter: 0,
            consumed: false,
            relu_margin: f64::INFINITY,
        }
    }

    /// Training-mode tape. Dropout masks are derived from `dropout_seed`
    /// and a per-call counter, so two tapes with the same seed draw the
    /// same masks in the same order.
    pub fn training(dropout_seed: u64) -> Self {
        Self { training: true, dropout_seed, ..Self::new() }
    }

    /// Evaluation-mode tape that records nothing.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Smallest `|x|` fed to any ReLU on this tape so far.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf(None), requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf(Some(id)),
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` that is cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf(None) };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape { op: name, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let mut value = self.value(a).clone();
        value.axpy(-1.0, self.value(b));
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Adds a `1 x c` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr != (1, sx.1) {
            return Err(TensorError::Shape { op: "add_row", lhs: sx, rhs: sr });
        }
        let mut value = self.value(x).clone();
        let b = self.value(row).as_slice().to_vec();
        for r in 0..sx.0 {
            for (v, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.push("add_row", value, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.value(x).scaled(c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = parts.first().map(|&p| self.shape(p).0).ok_or(TensorError::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(TensorError::Shape { op: "concat_cols", lhs: self.shape(parts[0]), rhs: self.shape(p) });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let out = value.row_mut(r);
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                out[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = parts.first().map(|&p| self.shape(p).1).ok_or(TensorError::InvalidArgument {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(TensorError::Shape { op: "concat_rows", lhs: self.shape(parts[0]), rhs: self.shape(p) });
            }
            data.extend_from_slice(self.value(p).as_slice());
        }
        let rows = data.len() / cols.max(1);
        let value = Matrix::from_vec(rows, cols, data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.shape(x);
        if start + len > rows {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {rows}", start + len),
            });
        }
        let data = self.value(x).as_slice()[start * cols..(start + len) * cols].to_vec();
        let value = Matrix::from_vec(len, cols, data)?;
        self.push("slice_rows", value, Op::SliceRows(x, start), &[x])
    }

    /// Output row `i` is row `indices[i]` of `x`; indices may repeat
    /// (broadcast-replication) and the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, indices: impl Into<Arc<[usize]>>) -> Result<Var, TensorError> {
        let indices: Arc<[usize]> = indices.into();
        let (rows, cols) = self.shape(x);
        let src = self.value(x);
        let mut value = Matrix::zeros(indices.len(), cols);
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= rows {
                return Err(TensorError::InvalidArgument {
                    op: "gather_rows",
                    msg: format!("row index {idx} out of {rows}"),
                });
            }
            value.row_mut(i).copy_from_slice(src.row(idx));
        }
        self.push("gather_rows", value, Op::GatherRows(x, indices), &[x])
    }

    /// Keeps the rows whose mask entry is true.
    pub fn row_select(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        if mask.len() != self.shape(x).0 {
            return Err(TensorError::Shape { op: "row_select", lhs: self.shape(x), rhs: (mask.len(), 1) });
        }
        let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        self.gather_rows(x, idx)
    }

    /// Output row `p` is the mean of the rows of `x` listed in `groups[p]`.
    pub fn mean_rows(&mut self, x: Var, groups: impl Into<Arc<[Vec<usize>]>>) -> Result<Var, TensorError> {
        let groups: Arc<[Vec<usize>]> = groups.into();
        let (rows, cols) = self.shape(x);
        let src = self.value(x);
        let mut value = Matrix::zeros(groups.len(), cols);
        for (p, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(TensorError::InvalidArgument { op: "mean_rows", msg: format!("group {p} is empty") });
            }
            let out = value.row_mut(p);
            for &m in members {
                if m >= rows {
                    return Err(TensorError::InvalidArgument {
                        op: "mean_rows",
                        msg: format!("row index {m} out of {rows}"),
                    });
                }
                for (o, s) in out.iter_mut().zip(src.row(m)) {
                    *o += s;
                }
            }
            let inv = 1.0 / members.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        self.push("mean_rows", value, Op::MeanRows(x, groups), &[x])
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push("row_softmax", value, Op::Softmax(x), &[x])
    }

    /// Normalises each row over the feature axis, then applies the affine
    /// `gamma`, `beta` (both `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument { op: "layer_norm", msg: format!("eps must be > 0, got {eps}") });
        }
        let (rows, cols) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, cols) {
                return Err(TensorError::Shape { op: "layer_norm", lhs: (rows, cols), rhs: self.shape(p) });
            }
        }
        let src = self.value(x);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in value.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let input = self.value(x);
        let margin = input.as_slice().iter().fold(self.relu_margin, |m, v| m.min(v.abs()));
        let value = input.map(|v| v.max(0.0));
        self.relu_margin = margin;
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Inverted dropout. A no-op outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument { op: "dropout", msg: format!("p must be in [0,1), got {p}") });
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        self.dropout_counter += 1;
        let mut rng = Xoshiro256StarStar::seed_from_u64(
            self.dropout_seed ^ self.dropout_counter.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let keep = 1.0 / (1.0 - p);
        let src = self.value(x);
        let mask: Vec<f64> = (0..src.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let data = src.as_slice().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Matrix::from_vec(src.rows(), src.cols(), data)?;
        self.push("dropout", value, Op::Dropout(x, mask), &[x])
    }

    /// Natural log with the argument clamped below at [`LOG_CLAMP`].
    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| v.max(LOG_CLAMP).ln());
        self.push("log", value, Op::Log(x), &[x])
    }

    /// Sum of all entries, as a `1 x 1` value.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = Matrix::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    /// `a · x` for a constant sparse `a`.
    pub fn spmm(&mut self, a: &Arc<SparseMatrix>, x: Var) -> Result<Var, TensorError> {
        let value = a.mul_dense(self.value(x))?;
        self.push("spmm", value, Op::Spmm(Arc::clone(a), x), &[x])
    }

    /// Reverse sweep from a `1 x 1` loss. Parameter gradients are added to
    /// whatever is already accumulated in `store`. A tape can be swept once.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: r, cols: c });
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, d: Matrix| {
                if nodes[v.0].requires_grad {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&d),
                        slot @ None => *slot = Some(d),
                    }
                }
            };
            match &node.op {
                Op::Leaf(Some(id)) => store.accumulate_grad(*id, &g),
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        send(*a, g.matmul_nt(vb)?);
                    }
                    if nodes[b.0].requires_grad {
                        send(*b, va.matmul_tn(&g)?);
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.scaled(-1.0));
                    send(*a, g);
                }
                Op::AddRow(x, row) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    send(*row, gb);
                    send(*x, g);
                }
                Op::Scale(x, c) => send(*x, g.scaled(*c)),
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    send(*a, hadamard(&g, vb));
                    send(*b, hadamard(&g, va));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.cols();
                        let d = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        offset += w;
                        send(p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (h, w) = nodes[p.0].value.shape();
                        let d = Matrix::from_vec(h, w, g.as_slice()[offset * w..(offset + h) * w].to_vec())?;
                        offset += h;
                        send(p, d);
                    }
                }
                Op::SliceRows(x, start) => {
                    let (rows, cols) = nodes[x.0].value.shape();
                    let mut d = Matrix::zeros(rows, cols);
                    d.as_mut_slice()[start * cols..start * cols + g.len()].copy_from_slice(g.as_slice());
                    send(*x, d);
                }
                Op::GatherRows(x, indices) => {
                    let (rows, cols) = nodes[x.0].value.shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for (i, &idx) in indices.iter().enumerate() {
                        for (o, v) in d.row_mut(idx).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    send(*x, d);
                }
                Op::MeanRows(x, groups) => {
                    let (rows, cols) = nodes[x.0].value.shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for (p, members) in groups.iter().enumerate() {
                        let inv = 1.0 / members.len() as f64;
                        for &m in members {
                            for (o, v) in d.row_mut(m).iter_mut().zip(g.row(p)) {
                                *o += v * inv;
                            }
                        }
                    }
                    send(*x, d);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yy), gg) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yy * (gg - dot);
                        }
                    }
                    send(*x, d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (rows, cols) = xhat.shape();
                    let gam = nodes[gamma.0].value.as_slice();
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..cols {
                            dgamma.as_mut_slice()[j] += gr[j] * xr[j];
                            dbeta.as_mut_slice()[j] += gr[j];
                            let dxh = gr[j] * gam[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xr[j];
                        }
                        let n = cols as f64;
                        let is = inv_std[r];
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            let dxh = gr[j] * gam[j];
                            *o = is / n * (n * dxh - sum_dxhat - xr[j] * sum_dxhat_xhat);
                        }
                    }
                    send(*gamma, dgamma);
                    send(*beta, dbeta);
                    send(*x, dx);
                }
                Op::Relu(x) => {
                    let vx = &nodes[x.0].value;
                    let data = g.as_slice().iter().zip(vx.as_slice()).map(|(gg, v)| if *v > 0.0 { *gg } else { 0.0 }).collect();
                    send(*x, Matrix::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::Dropout(x, mask) => {
                    let data = g.as_slice().iter().zip(mask).map(|(gg, m)| gg * m).collect();
                    send(*x, Matrix::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::Log(x) => {
                    let vx = &nodes[x.0].value;
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(vx.as_slice())
                        .map(|(gg, v)| if *v > LOG_CLAMP { gg / v } else { 0.0 })
                        .collect();
                    send(*x, Matrix::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::Sum(x) => {
                    let (rows, cols) = nodes[x.0].value.shape();
                    send(*x, Matrix::filled(rows, cols, g.item()));
                }
                Op::Spmm(a, x) => send(*x, a.transpose_mul_dense(&g)?),
            }
        }
        Ok(())
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise softmax of a plain matrix, outside any tape.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}
