//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends one node holding its forward value; `backward`
//! walks the tape once in reverse and accumulates adjoints. The op set is
//! deliberately small — dense/sparse matmul, elementwise activations,
//! interval softmax, and a masked negative log-likelihood — which keeps each
//! adjoint an explicit, hand-derived formula rather than a composition.
//!
//! Determinism contract: forward evaluation is a pure function of leaf
//! values, so replaying a tape reproduces every node bit-for-bit, and
//! backward accumulates in fixed (reverse tape) order.

mod check;
mod optim;
mod tensor;

pub use check::{finite_difference_gradient, grad_check, max_relative_error, relative_error};
pub use optim::{glorot_uniform, AdamConfig, AdamState, ParamSet};
pub use tensor::{sigmoid, softplus, Tensor};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::SparseOperator;

/// Handle to a tape node. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

impl VarId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    MatMul { a: VarId, b: VarId },
    SpMatMul { operator: Arc<SparseOperator>, x: VarId },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    AddBias { x: VarId, bias: VarId },
    Relu { x: VarId },
    Softplus { x: VarId },
    Softmax { x: VarId },
    Scale { x: VarId, factor: f64 },
    ConcatCols { parts: Vec<VarId> },
    GatherRows { x: VarId, indices: Vec<usize> },
    MulMask { x: VarId, mask: Tensor },
    IntervalSoftmaxLower { lower: VarId, upper: VarId },
    IntervalSoftmaxUpper { lower: VarId, upper: VarId },
    MaskedNll { q: VarId, rows: Vec<usize>, labels: Vec<usize>, weights: Vec<f64> },
    WeightedSum { terms: Vec<(VarId, f64)> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by one backward pass, indexed by `VarId`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a node, if any was accumulated into it.
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn shape_of(&self, id: VarId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<VarId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} produced a non-finite value", op_name(&op))));
        }
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    /// Insert an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<VarId> {
        self.push(Op::Leaf { requires_grad }, value)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul { a, b }, value)
    }

    /// Sparse-dense product `S x`. The operator is a constant: no gradient
    /// flows into its values.
    pub fn sp_matmul(&mut self, operator: Arc<SparseOperator>, x: VarId) -> Result<VarId> {
        let value = operator.matmul(self.value(x))?;
        self.push(Op::SpMatMul { operator, x }, value)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).add(self.value(b))?;
        self.push(Op::Add { a, b }, value)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub { a, b }, value)
    }

    /// Broadcast a 1 x cols bias over every row of `x`.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (rows, cols) = self.shape_of(x);
        let (brows, bcols) = self.shape_of(bias);
        if brows != 1 || bcols != cols {
            return Err(Error::shape(
                "add_bias",
                format!("x is {rows}x{cols}, bias is {brows}x{bcols}, want 1x{cols}"),
            ));
        }
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut value = xv.clone();
        for r in 0..rows {
            let row = value.row_mut(r);
            for (c, out) in row.iter_mut().enumerate() {
                *out += bv.get(0, c);
            }
        }
        self.push(Op::AddBias { x, bias }, value)
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu { x }, value)
    }

    pub fn softplus(&mut self, x: VarId) -> Result<VarId> {
        let value = self.value(x).map(softplus);
        self.push(Op::Softplus { x }, value)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: VarId) -> Result<VarId> {
        let value = self.value(x).softmax_rows();
        self.push(Op::Softmax { x }, value)
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> Result<VarId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor is non-finite".into()));
        }
        let value = self.value(x).scale(factor);
        self.push(Op::Scale { x, factor }, value)
    }

    /// Concatenate tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        self.push(Op::ConcatCols { parts: parts.to_vec() }, value)
    }

    /// Select rows of `x` by index; indices may repeat.
    pub fn gather_rows(&mut self, x: VarId, indices: &[usize]) -> Result<VarId> {
        let value = self.value(x).gather_rows(indices)?;
        self.push(Op::GatherRows { x, indices: indices.to_vec() }, value)
    }

    /// Elementwise product with a constant mask of the same shape. The mask
    /// receives no gradient; this is how dropout enters the graph.
    pub fn mul_mask(&mut self, x: VarId, mask: &Tensor) -> Result<VarId> {
        let xs = self.shape_of(x);
        if xs != mask.shape() {
            return Err(Error::shape(
                "mul_mask",
                format!("x is {xs:?}, mask is {:?}", mask.shape()),
            ));
        }
        let mut value = self.value(x).clone();
        for (out, &m) in value.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *out *= m;
        }
        self.push(Op::MulMask { x, mask: mask.clone() }, value)
    }

    /// Interval softmax over per-class logit intervals `[lower, upper]`.
    /// Returns `(q_lower, q_upper)`: the tightest probability bounds across
    /// all softmax outputs consistent with the intervals.
    pub fn interval_softmax(&mut self, lower: VarId, upper: VarId) -> Result<(VarId, VarId)> {
        let (lshape, ushape) = (self.shape_of(lower), self.shape_of(upper));
        if lshape != ushape {
            return Err(Error::shape(
                "interval_softmax",
                format!("lower is {lshape:?}, upper is {ushape:?}"),
            ));
        }
        let ql = one_sided_interval_softmax(self.value(lower), self.value(upper));
        let qu = one_sided_interval_softmax(self.value(upper), self.value(lower));
        let ql_id = self.push(Op::IntervalSoftmaxLower { lower, upper }, ql)?;
        let qu_id = self.push(Op::IntervalSoftmaxUpper { lower, upper }, qu)?;
        Ok((ql_id, qu_id))
    }

    /// Weighted negative log-likelihood over selected (row, label) pairs:
    /// sum_j w_j * -ln(clamp(q[row_j, label_j], 1e-12, 1)). Returns a scalar.
    pub fn masked_nll(
        &mut self,
        q: VarId,
        rows: &[usize],
        labels: &[usize],
        weights: &[f64],
    ) -> Result<VarId> {
        if rows.len() != labels.len() || rows.len() != weights.len() {
            return Err(Error::shape(
                "masked_nll",
                format!("{} rows, {} labels, {} weights", rows.len(), labels.len(), weights.len()),
            ));
        }
        let qv = self.value(q);
        let (n, c) = qv.shape();
        let mut total = 0.0;
        for ((&r, &y), &w) in rows.iter().zip(labels).zip(weights) {
            if r >= n || y >= c {
                return Err(Error::shape(
                    "masked_nll",
                    format!("entry ({r},{y}) out of bounds for {n}x{c}"),
                ));
            }
            total += w * -clamp_prob(qv.get(r, y)).ln();
        }
        self.push(
            Op::MaskedNll {
                q,
                rows: rows.to_vec(),
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            Tensor::scalar(total),
        )
    }

    /// Weighted sum of scalar nodes; the usual way to combine loss terms.
    pub fn weighted_sum(&mut self, terms: &[(VarId, f64)]) -> Result<VarId> {
        let mut total = 0.0;
        for &(id, w) in terms {
            total += w * self.value(id).item()?;
        }
        self.push(Op::WeightedSum { terms: terms.to_vec() }, Tensor::scalar(total))
    }

    /// Recompute every non-leaf node from the leaves, in tape order. Used to
    /// check that forward evaluation is bit-for-bit reproducible.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf { .. } => node.value.clone(),
                op => eval_op(op, &values)?,
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Reverse pass from a scalar output. Accumulates adjoints for every node
    /// that influences `output`, skipping leaves with `requires_grad: false`.
    pub fn backward(&self, output: VarId) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", out_val.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[idx] = Some(g);
                    }
                    continue;
                }
                Op::MatMul { a, b } => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::SpMatMul { operator, x } => {
                    let dx = operator.transpose_matmul(&g)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::AddBias { x, bias } => {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (c, &v) in g.row(r).iter().enumerate() {
                            db.set(0, c, db.get(0, c) + v);
                        }
                    }
                    accumulate(&mut grads, *x, g)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::Relu { x } => {
                    // Subgradient 0 at the kink.
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (out, &inp) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        if inp <= 0.0 {
                            *out = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Softplus { x } => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (out, &inp) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        *out *= sigmoid(inp);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Softmax { x } => {
                    let y = &self.nodes[idx].value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let out = dx.row_mut(r);
                        for c in 0..yr.len() {
                            out[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, g.scale(*factor))?;
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape_of(p);
                        let mut dp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            let src = &g.row(r)[offset..offset + cols];
                            dp.row_mut(r).copy_from_slice(src);
                        }
                        offset += cols;
                        accumulate(&mut grads, p, dp)?;
                    }
                }
                Op::GatherRows { x, indices } => {
                    let (rows, cols) = self.shape_of(*x);
                    let mut dx = Tensor::zeros(rows, cols);
                    for (out_r, &src_r) in indices.iter().enumerate() {
                        let gr = g.row(out_r);
                        let dst = dx.row_mut(src_r);
                        for c in 0..cols {
                            dst[c] += gr[c];
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::MulMask { x, mask } => {
                    let mut dx = g;
                    for (out, &m) in dx.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *out *= m;
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::IntervalSoftmaxLower { lower, upper } => {
                    let (da, db) = one_sided_interval_softmax_backward(
                        self.value(*lower),
                        self.value(*upper),
                        &self.nodes[idx].value,
                        &g,
                    );
                    accumulate(&mut grads, *lower, da)?;
                    accumulate(&mut grads, *upper, db)?;
                }
                Op::IntervalSoftmaxUpper { lower, upper } => {
                    let (da, db) = one_sided_interval_softmax_backward(
                        self.value(*upper),
                        self.value(*lower),
                        &self.nodes[idx].value,
                        &g,
                    );
                    accumulate(&mut grads, *upper, da)?;
                    accumulate(&mut grads, *lower, db)?;
                }
                Op::MaskedNll { q, rows, labels, weights } => {
                    let gs = g.item()?;
                    let qv = self.value(*q);
                    let mut dq = Tensor::zeros(qv.rows(), qv.cols());
                    for ((&r, &y), &w) in rows.iter().zip(labels).zip(weights) {
                        let p = qv.get(r, y);
                        // Hard clamp: zero gradient once saturated.
                        if (1e-12..=1.0).contains(&p) {
                            dq.set(r, y, dq.get(r, y) - gs * w / p);
                        }
                    }
                    accumulate(&mut grads, *q, dq)?;
                }
                Op::WeightedSum { terms } => {
                    let gs = g.item()?;
                    for &(id, w) in terms {
                        accumulate(&mut grads, id, Tensor::scalar(gs * w))?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: VarId, delta: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => {
            if existing.shape() != delta.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("adjoint shape {:?} vs {:?}", existing.shape(), delta.shape()),
                ));
            }
            for (a, b) in existing.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *a += b;
            }
        }
        slot => *slot = Some(delta),
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-12, 1.0)
}

/// q_i = exp(a_i) / (exp(a_i) + sum_{k != i} exp(b_k)), row-wise, computed
/// with a shared per-row max subtraction so exponentials never overflow.
/// With (a, b) = (lower, upper) logits this is the lower probability bound;
/// swapped it is the upper bound.
pub(crate) fn one_sided_interval_softmax(a: &Tensor, b: &Tensor) -> Tensor {
    let (rows, cols) = a.shape();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let ar = a.row(r);
        let br = b.row(r);
        let m = ar.iter().chain(br).fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let eb: Vec<f64> = br.iter().map(|&v| (v - m).exp()).collect();
        let sb: f64 = eb.iter().sum();
        let o = out.row_mut(r);
        for i in 0..cols {
            let ea = (ar[i] - m).exp();
            o[i] = ea / (ea + sb - eb[i]);
        }
    }
    out
}

/// Adjoints for `one_sided_interval_softmax`. `q` is the forward output and
/// `g` the upstream gradient; returns `(da, db)`.
///
/// dq_i/da_i = q_i (1 - q_i), dq_i/db_j = -q_i e^{b_j} / D_i for j != i,
/// so db_j = -e^{b_j} (T - t_j) with t_i = g_i q_i / D_i and T = sum t_i,
/// which keeps each row O(C). The shared max subtraction cancels exactly.
fn one_sided_interval_softmax_backward(
    a: &Tensor,
    b: &Tensor,
    q: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor) {
    let (rows, cols) = a.shape();
    let mut da = Tensor::zeros(rows, cols);
    let mut db = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let ar = a.row(r);
        let br = b.row(r);
        let qr = q.row(r);
        let gr = g.row(r);
        let m = ar.iter().chain(br).fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let eb: Vec<f64> = br.iter().map(|&v| (v - m).exp()).collect();
        let sb: f64 = eb.iter().sum();
        let mut t = vec![0.0; cols];
        let mut total_t = 0.0;
        for i in 0..cols {
            let ea = (ar[i] - m).exp();
            let d = ea + sb - eb[i];
            t[i] = gr[i] * qr[i] / d;
            total_t += t[i];
        }
        let da_r = da.row_mut(r);
        for i in 0..cols {
            da_r[i] = gr[i] * qr[i] * (1.0 - qr[i]);
        }
        let db_r = db.row_mut(r);
        for j in 0..cols {
            db_r[j] = -eb[j] * (total_t - t[j]);
        }
    }
    (da, db)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::SpMatMul { .. } => "sp_matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::AddBias { .. } => "add_bias",
        Op::Relu { .. } => "relu",
        Op::Softplus { .. } => "softplus",
        Op::Softmax { .. } => "softmax",
        Op::Scale { .. } => "scale",
        Op::ConcatCols { .. } => "concat_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::MulMask { .. } => "mul_mask",
        Op::IntervalSoftmaxLower { .. } => "interval_softmax_lower",
        Op::IntervalSoftmaxUpper { .. } => "interval_softmax_upper",
        Op::MaskedNll { .. } => "masked_nll",
        Op::WeightedSum { .. } => "weighted_sum",
    }
}

fn eval_op(op: &Op, values: &[Tensor]) -> Result<Tensor> {
    let v = |id: &VarId| &values[id.0];
    match op {
        Op::Leaf { .. } => unreachable!("leaf values are never recomputed"),
        Op::MatMul { a, b } => v(a).matmul(v(b)),
        Op::SpMatMul { operator, x } => operator.matmul(v(x)),
        Op::Add { a, b } => v(a).add(v(b)),
        Op::Sub { a, b } => v(a).sub(v(b)),
        Op::AddBias { x, bias } => {
            let mut out = v(x).clone();
            let bv = v(bias);
            for r in 0..out.rows() {
                for (c, slot) in out.row_mut(r).iter_mut().enumerate() {
                    *slot += bv.get(0, c);
                }
            }
            Ok(out)
        }
        Op::Relu { x } => Ok(v(x).map(|t| t.max(0.0))),
        Op::Softplus { x } => Ok(v(x).map(softplus)),
        Op::Softmax { x } => Ok(v(x).softmax_rows()),
        Op::Scale { x, factor } => Ok(v(x).scale(*factor)),
        Op::ConcatCols { parts } => {
            let tensors: Vec<&Tensor> = parts.iter().map(|p| &values[p.0]).collect();
            Tensor::concat_cols(&tensors)
        }
        Op::GatherRows { x, indices } => v(x).gather_rows(indices),
        Op::MulMask { x, mask } => {
            let mut out = v(x).clone();
            for (slot, &m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *slot *= m;
            }
            Ok(out)
        }
        Op::IntervalSoftmaxLower { lower, upper } => {
            Ok(one_sided_interval_softmax(v(lower), v(upper)))
        }
        Op::IntervalSoftmaxUpper { lower, upper } => {
            Ok(one_sided_interval_softmax(v(upper), v(lower)))
        }
        Op::MaskedNll { q, rows, labels, weights } => {
            let qv = v(q);
            let mut total = 0.0;
            for ((&r, &y), &w) in rows.iter().zip(labels).zip(weights) {
                total += w * -clamp_prob(qv.get(r, y)).ln();
            }
            Ok(Tensor::scalar(total))
        }
        Op::WeightedSum { terms } => {
            let mut total = 0.0;
            for &(id, w) in terms {
                total += w * values[id.0].item()?;
            }
            Ok(Tensor::scalar(total))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gcn_normalize, Csr};

    /// Numeric gradient of a scalar-valued tape program with respect to one
    /// leaf, rebuilt from scratch for every perturbed entry.
    fn numeric_grad(
        build: impl Fn(&mut Tape, &Tensor) -> VarId,
        base: &Tensor,
        eps: f64,
    ) -> Tensor {
        let mut out = Tensor::zeros(base.rows(), base.cols());
        for i in 0..base.len() {
            let mut lo = base.clone();
            lo.as_mut_slice()[i] -= eps;
            let mut hi = base.clone();
            hi.as_mut_slice()[i] += eps;
            let mut tlo = Tape::new();
            let flo = build(&mut tlo, &lo);
            let mut thi = Tape::new();
            let fhi = build(&mut thi, &hi);
            out.as_mut_slice()[i] =
                (thi.value(fhi).item().unwrap() - tlo.value(flo).item().unwrap()) / (2.0 * eps);
        }
        out
    }

    fn assert_grad_close(analytic: &Tensor, numeric: &Tensor, tol: f64) {
        assert_eq!(analytic.shape(), numeric.shape());
        let err = max_relative_error(analytic, numeric);
        assert!(err < tol, "gradient mismatch: rel err {err}\n{analytic:?}\nvs\n{numeric:?}");
    }

    fn test_input(rows: usize, cols: usize, seed: f64) -> Tensor {
        // Deterministic, irrational-ish values away from relu kinks.
        Tensor::from_fn(rows, cols, |r, c| {
            let x = (r * cols + c) as f64;
            ((x * 0.7391 + seed).sin() * 1.3) + 0.11
        })
    }

    #[test]
    fn matmul_bias_relu_chain_matches_numeric_gradient() {
        let x = test_input(3, 4, 0.3);
        let w = test_input(4, 2, 1.1);
        let b = test_input(1, 2, 2.9);

        // d/dW of sum over relu(xW + b): check via masked_nll-free scalar.
        let build = |tape: &mut Tape, wt: &Tensor| {
            let xi = tape.constant(x.clone()).unwrap();
            let wi = tape.leaf(wt.clone(), true).unwrap();
            let bi = tape.constant(b.clone()).unwrap();
            let h = tape.matmul(xi, wi).unwrap();
            let h = tape.add_bias(h, bi).unwrap();
            let h = tape.relu(h).unwrap();
            let sm = tape.softmax(h).unwrap();
            let nll = tape
                .masked_nll(sm, &[0, 1, 2], &[0, 1, 0], &[1.0, 0.5, 2.0])
                .unwrap();
            tape.weighted_sum(&[(nll, 1.25)]).unwrap()
        };

        let mut tape = Tape::new();
        let xi = tape.constant(x.clone()).unwrap();
        let wi = tape.leaf(w.clone(), true).unwrap();
        let bi = tape.constant(b.clone()).unwrap();
        let h = tape.matmul(xi, wi).unwrap();
        let h = tape.add_bias(h, bi).unwrap();
        let h = tape.relu(h).unwrap();
        let sm = tape.softmax(h).unwrap();
        let nll = tape.masked_nll(sm, &[0, 1, 2], &[0, 1, 0], &[1.0, 0.5, 2.0]).unwrap();
        let loss = tape.weighted_sum(&[(nll, 1.25)]).unwrap();
        let grads = tape.backward(loss).unwrap();

        let numeric = numeric_grad(build, &w, 1e-6);
        assert_grad_close(grads.get(wi).unwrap(), &numeric, 1e-6);
    }

    #[test]
    fn bias_gradient_matches_numeric() {
        let x = test_input(3, 4, 0.3);
        let w = test_input(4, 2, 1.1);
        let b = test_input(1, 2, 2.9);
        let build = |tape: &mut Tape, bt: &Tensor| {
            let xi = tape.constant(x.clone()).unwrap();
            let wi = tape.constant(w.clone()).unwrap();
            let bi = tape.leaf(bt.clone(), true).unwrap();
            let h = tape.matmul(xi, wi).unwrap();
            let h = tape.add_bias(h, bi).unwrap();
            let h = tape.softplus(h).unwrap();
            let sm = tape.softmax(h).unwrap();
            tape.masked_nll(sm, &[0, 2], &[1, 0], &[1.0, 1.0]).unwrap()
        };
        let mut tape = Tape::new();
        let out = build(&mut tape, &b);
        let grads = tape.backward(out).unwrap();
        let bi = VarId(2);
        let numeric = numeric_grad(build, &b, 1e-6);
        assert_grad_close(grads.get(bi).unwrap(), &numeric, 1e-6);
    }

    #[test]
    fn sparse_matmul_routes_gradient_through_transpose() {
        // Path graph 0-1-2 with GCN normalization; asymmetric check done via
        // gather on a strict subset of rows.
        let csr = Csr::from_edge_list(3, &[(0, 1), (1, 2)]).unwrap();
        let op = Arc::new(gcn_normalize(&csr));
        let x = test_input(3, 3, 0.7);
        let build = |tape: &mut Tape, xt: &Tensor| {
            let xi = tape.leaf(xt.clone(), true).unwrap();
            let h = tape.sp_matmul(op.clone(), xi).unwrap();
            let h = tape.gather_rows(h, &[0, 2, 2]).unwrap();
            let sm = tape.softmax(h).unwrap();
            tape.masked_nll(sm, &[0, 1, 2], &[2, 0, 1], &[1.0, 1.0, 0.25]).unwrap()
        };
        let mut tape = Tape::new();
        let out = build(&mut tape, &x);
        let grads = tape.backward(out).unwrap();
        let numeric = numeric_grad(build, &x, 1e-6);
        assert_grad_close(grads.get(VarId(0)).unwrap(), &numeric, 1e-6);
    }

    #[test]
    fn interval_softmax_gradients_match_numeric() {
        let lower = test_input(4, 3, 0.2);
        let upper = lower.map(|v| v + 0.9);

        // Perturb the lower logits.
        let build_l = |tape: &mut Tape, lt: &Tensor| {
            let li = tape.leaf(lt.clone(), true).unwrap();
            let ui = tape.constant(upper.clone()).unwrap();
            let (ql, qu) = tape.interval_softmax(li, ui).unwrap();
            let a = tape.masked_nll(ql, &[0, 1, 3], &[0, 2, 1], &[1.0, 0.7, 1.0]).unwrap();
            let b = tape.masked_nll(qu, &[2, 3], &[1, 0], &[0.5, 1.0]).unwrap();
            tape.weighted_sum(&[(a, 1.0), (b, 0.8)]).unwrap()
        };
        let mut tape = Tape::new();
        let out = build_l(&mut tape, &lower);
        let grads = tape.backward(out).unwrap();
        let numeric = numeric_grad(build_l, &lower, 1e-6);
        assert_grad_close(grads.get(VarId(0)).unwrap(), &numeric, 1e-6);

        // Perturb the upper logits.
        let build_u = |tape: &mut Tape, ut: &Tensor| {
            let li = tape.constant(lower.clone()).unwrap();
            let ui = tape.leaf(ut.clone(), true).unwrap();
            let (ql, qu) = tape.interval_softmax(li, ui).unwrap();
            let a = tape.masked_nll(ql, &[0, 1, 3], &[0, 2, 1], &[1.0, 0.7, 1.0]).unwrap();
            let b = tape.masked_nll(qu, &[2, 3], &[1, 0], &[0.5, 1.0]).unwrap();
            tape.weighted_sum(&[(a, 1.0), (b, 0.8)]).unwrap()
        };
        let mut tape = Tape::new();
        let out = build_u(&mut tape, &upper);
        let grads = tape.backward(out).unwrap();
        let numeric = numeric_grad(build_u, &upper, 1e-6);
        assert_grad_close(grads.get(VarId(1)).unwrap(), &numeric, 1e-6);
    }

    #[test]
    fn interval_softmax_is_stable_at_extreme_logits() {
        let lower = Tensor::from_rows(&[vec![700.0, -700.0, 0.0]]).unwrap();
        let upper = Tensor::from_rows(&[vec![701.0, -699.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let li = tape.constant(lower).unwrap();
        let ui = tape.constant(upper).unwrap();
        let (ql, qu) = tape.interval_softmax(li, ui).unwrap();
        assert!(tape.value(ql).is_finite());
        assert!(tape.value(qu).is_finite());
        for i in 0..3 {
            let l = tape.value(ql).get(0, i);
            let u = tape.value(qu).get(0, i);
            assert!(l <= u + 1e-15, "bound ordering violated at {i}: {l} > {u}");
        }
    }

    #[test]
    fn concat_cols_splits_gradient_by_block() {
        let a = test_input(2, 2, 0.1);
        let b = test_input(2, 3, 1.7);
        let build = |tape: &mut Tape, at: &Tensor| {
            let ai = tape.leaf(at.clone(), true).unwrap();
            let bi = tape.constant(b.clone()).unwrap();
            let cat = tape.concat_cols(&[ai, bi]).unwrap();
            let sm = tape.softmax(cat).unwrap();
            tape.masked_nll(sm, &[0, 1], &[0, 4], &[1.0, 1.0]).unwrap()
        };
        let mut tape = Tape::new();
        let out = build(&mut tape, &a);
        let grads = tape.backward(out).unwrap();
        let numeric = numeric_grad(build, &a, 1e-6);
        assert_grad_close(grads.get(VarId(0)).unwrap(), &numeric, 1e-6);
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let x = test_input(3, 2, 0.5);
        let build = |tape: &mut Tape, xt: &Tensor| {
            let xi = tape.leaf(xt.clone(), true).unwrap();
            let gathered = tape.gather_rows(xi, &[1, 1, 0]).unwrap();
            let sm = tape.softmax(gathered).unwrap();
            tape.masked_nll(sm, &[0, 1, 2], &[0, 1, 0], &[1.0, 2.0, 1.0]).unwrap()
        };
        let mut tape = Tape::new();
        let out = build(&mut tape, &x);
        let grads = tape.backward(out).unwrap();
        let numeric = numeric_grad(build, &x, 1e-6);
        assert_grad_close(grads.get(VarId(0)).unwrap(), &numeric, 1e-6);
    }

    #[test]
    fn mul_mask_gradient_matches_numeric_and_zeroes_dropped_entries() {
        let x = test_input(3, 3, 0.8);
        // Inverted-dropout style mask: kept entries scaled by 2, dropped zero.
        let mask = Tensor::from_rows(&[
            vec![2.0, 0.0, 2.0],
            vec![0.0, 2.0, 2.0],
            vec![2.0, 2.0, 0.0],
        ])
        .unwrap();
        let build = |tape: &mut Tape, xt: &Tensor| {
            let xi = tape.leaf(xt.clone(), true).unwrap();
            let masked = tape.mul_mask(xi, &mask).unwrap();
            let sm = tape.softmax(masked).unwrap();
            tape.masked_nll(sm, &[0, 1, 2], &[1, 2, 0], &[1.0, 1.0, 0.5]).unwrap()
        };
        let mut tape = Tape::new();
        let out = build(&mut tape, &x);
        let grads = tape.backward(out).unwrap();
        let numeric = numeric_grad(build, &x, 1e-6);
        let analytic = grads.get(VarId(0)).unwrap();
        assert_grad_close(analytic, &numeric, 1e-6);
        // A dropped coordinate cannot influence the loss.
        assert_eq!(analytic.get(0, 1), 0.0);
        assert_eq!(analytic.get(1, 0), 0.0);
        assert_eq!(analytic.get(2, 2), 0.0);
    }

    #[test]
    fn mul_mask_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(test_input(2, 3, 0.1), true).unwrap();
        let mask = Tensor::zeros(3, 2);
        assert!(tape.mul_mask(x, &mask).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(test_input(2, 2, 0.4)).unwrap();
        let b = tape.leaf(test_input(2, 2, 0.9), true).unwrap();
        let s = tape.add(a, b).unwrap();
        let sm = tape.softmax(s).unwrap();
        let loss = tape.masked_nll(sm, &[0], &[1], &[1.0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn replay_reproduces_values_bit_for_bit() {
        let x = test_input(5, 4, 0.6);
        let w = test_input(4, 3, 1.9);
        let csr = Csr::from_edge_list(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]).unwrap();
        let op = Arc::new(gcn_normalize(&csr));
        let mut tape = Tape::new();
        let xi = tape.leaf(x, true).unwrap();
        let wi = tape.leaf(w, true).unwrap();
        let h = tape.matmul(xi, wi).unwrap();
        let h = tape.sp_matmul(op, h).unwrap();
        let h = tape.relu(h).unwrap();
        let lo = tape.scale(h, 0.5).unwrap();
        let (ql, _qu) = tape.interval_softmax(lo, h).unwrap();
        let _loss = tape.masked_nll(ql, &[0, 4], &[0, 2], &[1.0, 1.0]).unwrap();

        let replayed = tape.replay().unwrap();
        assert_eq!(replayed.len(), tape.len());
        for (i, value) in replayed.iter().enumerate() {
            let orig = tape.value(VarId(i));
            assert_eq!(orig.as_slice(), value.as_slice(), "node {i} not bit-identical");
        }
    }

    #[test]
    fn non_finite_leaf_is_rejected() {
        let mut tape = Tape::new();
        let bad = Tensor::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(tape.leaf(bad, false), Err(Error::NonFinite(_))));
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::new();
        let a = tape.leaf(test_input(2, 2, 0.0), true).unwrap();
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn masked_nll_clamps_tiny_probabilities() {
        let mut tape = Tape::new();
        // Probability 0 at the target: loss must clamp to -ln(1e-12).
        let q = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let qi = tape.constant(q).unwrap();
        let loss = tape.masked_nll(qi, &[0], &[0], &[1.0]).unwrap();
        let expected = -(1e-12f64).ln();
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-9);
    }
}
