use super::{Matrix, TensorError};

/// Constant sparse matrix in CSR layout, used as the left operand of
/// graph propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, value)` lists. Columns within a row
    /// must be strictly increasing.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self, TensorError> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for (r, row) in rows.iter().enumerate() {
            let mut prev = None;
            for &(c, v) in row {
                if c >= cols || prev.is_some_and(|p| p >= c) {
                    return Err(TensorError::InvalidArgument {
                        op: "sparse_from_rows",
                        msg: format!("row {r}: column {c} out of order or out of range"),
                    });
                }
                prev = Some(c);
                indices.push(c);
                values.push(v);
            }
            offsets.push(indices.len());
        }
        Ok(Self { rows: rows.len(), cols, offsets, indices, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzeros of row `r` as `(column, value)` pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    /// Entry lookup by binary search; zero when absent.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.offsets[r]..self.offsets[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(i) => self.values[span.start + i],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                m.set(r, c, v);
            }
        }
        m
    }

    /// `self · dense`.
    pub fn mul_dense(&self, dense: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != dense.rows() {
            return Err(TensorError::Shape { op: "spmm", lhs: self.shape(), rhs: dense.shape() });
        }
        let n = dense.cols();
        let mut out = Matrix::zeros(self.rows, n);
        for r in 0..self.rows {
            let span = self.offsets[r]..self.offsets[r + 1];
            let o_row = out.row_mut(r);
            for (&c, &v) in self.indices[span.clone()].iter().zip(&self.values[span]) {
                for (o, &d) in o_row.iter_mut().zip(dense.row(c)) {
                    *o += v * d;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · dense`, accumulated in row order of `self`.
    pub fn transpose_mul_dense(&self, dense: &Matrix) -> Result<Matrix, TensorError> {
        if self.rows != dense.rows() {
            return Err(TensorError::Shape { op: "spmm_t", lhs: self.shape(), rhs: dense.shape() });
        }
        let n = dense.cols();
        let mut out = Matrix::zeros(self.cols, n);
        for r in 0..self.rows {
            let d_row = dense.row(r);
            for (c, v) in self.row(r) {
                for (o, &d) in out.row_mut(c).iter_mut().zip(d_row) {
                    *o += v * d;
                }
            }
        }
        Ok(out)
    }
}
