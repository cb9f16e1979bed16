//! Normalized sparse propagation operators built from a dataset's adjacency.

use crate::error::{Error, Result};
use crate::graph::Csr;
use crate::tape::Tensor;

/// Square CSR matrix with real weights, used as the fixed aggregation
/// operator in message passing. Gradients never flow through it.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    pub dim: usize,
}

impl SparseOperator {
    /// S * X for dense X.
    pub fn matmul(&self, dense: &Tensor) -> Result<Tensor> {
        if dense.rows() != self.dim {
            return Err(Error::shape(
                "SparseOperator::matmul",
                format!("operator dim {} vs dense rows {}", self.dim, dense.rows()),
            ));
        }
        let cols = dense.cols();
        let mut out = Tensor::zeros(self.dim, cols);
        for u in 0..self.dim {
            let out_row = out.row_mut(u);
            for e in self.row_ptr[u]..self.row_ptr[u + 1] {
                let v = self.col_idx[e];
                let w = self.values[e];
                for (o, &x) in out_row.iter_mut().zip(dense.row(v)) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }

    /// S^T * X, computed by scattering from the same CSR storage. Iteration
    /// order is fixed, so accumulation is deterministic.
    pub fn transpose_matmul(&self, dense: &Tensor) -> Result<Tensor> {
        if dense.rows() != self.dim {
            return Err(Error::shape(
                "SparseOperator::transpose_matmul",
                format!("operator dim {} vs dense rows {}", self.dim, dense.rows()),
            ));
        }
        let cols = dense.cols();
        let mut out = Tensor::zeros(self.dim, cols);
        for u in 0..self.dim {
            let x_row: Vec<f64> = dense.row(u).to_vec();
            for e in self.row_ptr[u]..self.row_ptr[u + 1] {
                let v = self.col_idx[e];
                let w = self.values[e];
                let out_row = out.row_mut(v);
                for (o, &x) in out_row.iter_mut().zip(&x_row) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }

    pub fn entry(&self, u: usize, v: usize) -> f64 {
        for e in self.row_ptr[u]..self.row_ptr[u + 1] {
            if self.col_idx[e] == v {
                return self.values[e];
            }
        }
        0.0
    }
}

/// Symmetric GCN operator D^{-1/2} (A + I) D^{-1/2} with D the degree
/// diagonal of A + I. Isolated nodes keep a unit self-loop.
pub fn gcn_normalize(adjacency: &Csr) -> SparseOperator {
    let n = adjacency.num_nodes();
    let inv_sqrt_deg: Vec<f64> =
        (0..n).map(|u| 1.0 / ((adjacency.degree(u) + 1) as f64).sqrt()).collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for u in 0..n {
        let mut self_loop_written = false;
        for &v in adjacency.neighbors(u) {
            if !self_loop_written && v > u {
                col_idx.push(u);
                values.push(inv_sqrt_deg[u] * inv_sqrt_deg[u]);
                self_loop_written = true;
            }
            col_idx.push(v);
            values.push(inv_sqrt_deg[u] * inv_sqrt_deg[v]);
        }
        if !self_loop_written {
            col_idx.push(u);
            values.push(inv_sqrt_deg[u] * inv_sqrt_deg[u]);
        }
        row_ptr.push(col_idx.len());
    }
    SparseOperator { row_ptr, col_idx, values, dim: n }
}

/// Row-stochastic mean aggregator: entry (u, v) = 1/deg(u) for each neighbor
/// v of u. Rows of isolated nodes stay empty.
pub fn row_normalize(adjacency: &Csr) -> SparseOperator {
    let n = adjacency.num_nodes();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for u in 0..n {
        let deg = adjacency.degree(u);
        if deg > 0 {
            let w = 1.0 / deg as f64;
            for &v in adjacency.neighbors(u) {
                col_idx.push(v);
                values.push(w);
            }
        }
        row_ptr.push(col_idx.len());
    }
    SparseOperator { row_ptr, col_idx, values, dim: n }
}
