//! Dense tensors with reverse-mode differentiation on a Wengert tape.
//!
//! The tape records user-level primitives eagerly (values are computed at
//! record time) and replays them in exact reverse order for gradients.
//! There is no fusion and no reordering: reductions accumulate in ascending
//! index order, so a fixed (seed, precision) pair gives bit-identical runs.

mod backward;
mod gradcheck;
pub(crate) mod ops;

pub use gradcheck::{grad_check, relative_error, GradEntry, GradReport, ParamSpec};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ops::Op;
use std::rc::Rc;

/// Handle to a node on one tape. Ids are tape-scoped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// A value node: flat row-major storage plus an optional gradient
/// accumulator that exists iff the node was created with `requires_grad`.
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub values: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Tensor<S>>,
    ops: Vec<Op>,
    /// Whether the node is the output of a recorded op (vs. a leaf).
    produced: Vec<bool>,
    /// Gradient closure: true for requires_grad leaves and anything
    /// computed from one. Backward skips everything else.
    needs: Vec<bool>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), produced: Vec::new(), needs: Vec::new() }
    }

    // ── node construction ────────────────────────────────────────

    pub fn leaf(&mut self, shape: &[usize], values: Vec<S>, requires_grad: bool) -> Result<TensorId> {
        let count: usize = shape.iter().product();
        if values.len() != count {
            return Err(Error::Shape(format!(
                "leaf shape {:?} wants {} values, got {}",
                shape,
                count,
                values.len()
            )));
        }
        let grad = requires_grad.then(|| vec![S::zero(); count]);
        self.nodes.push(Tensor { shape: shape.to_vec(), values, requires_grad, grad });
        self.produced.push(false);
        self.needs.push(requires_grad);
        Ok(TensorId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<S>) -> Result<TensorId> {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, value: S) -> TensorId {
        self.leaf(&[1], vec![value], false).expect("scalar leaf")
    }

    fn push_output(&mut self, shape: Vec<usize>, values: Vec<S>, op: Op, inputs: &[TensorId]) -> TensorId {
        let needs = inputs.iter().any(|i| self.needs[i.0]);
        self.nodes.push(Tensor { shape, values, requires_grad: false, grad: None });
        self.produced.push(true);
        self.needs.push(needs);
        self.ops.push(op);
        TensorId(self.nodes.len() - 1)
    }

    // ── accessors ────────────────────────────────────────────────

    pub fn node(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0]
    }

    pub fn values(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn n_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn rows_cols(&self, id: TensorId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("expected 1-D or 2-D tensor, got {s:?}"),
        }
    }

    fn want_matrix(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(Error::Shape(format!("{what} expects a matrix, got shape {s:?}")))
        }
    }

    fn want_vector(&self, id: TensorId, what: &str) -> Result<usize> {
        let s = &self.nodes[id.0].shape;
        if s.len() == 1 {
            Ok(s[0])
        } else {
            Err(Error::Shape(format!("{what} expects a vector, got shape {s:?}")))
        }
    }

    // ── primitives ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.want_matrix(a, "matmul lhs")?;
        let (k2, n) = self.want_matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let values = ops::matmul(self.values(a), self.values(b), m, k, n);
        Ok(self.push_output(vec![m, n], values, Op::MatMul { a, b, out: TensorId(self.nodes.len()) }, &[a, b]))
    }

    pub fn matmul_bt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.want_matrix(a, "matmul_bt lhs")?;
        let (n, k2) = self.want_matrix(b, "matmul_bt rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_bt inner dims {k} vs {k2}")));
        }
        let values = ops::matmul_bt(self.values(a), self.values(b), m, k, n);
        Ok(self.push_output(vec![m, n], values, Op::MatMulBt { a, b, out: TensorId(self.nodes.len()) }, &[a, b]))
    }

    pub fn vecmat(&mut self, v: TensorId, m: TensorId) -> Result<TensorId> {
        let k = self.want_vector(v, "vecmat lhs")?;
        let (k2, n) = self.want_matrix(m, "vecmat rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("vecmat dims {k} vs {k2}")));
        }
        let values = ops::matmul(self.values(v), self.values(m), 1, k, n);
        Ok(self.push_output(vec![n], values, Op::VecMat { v, m, out: TensorId(self.nodes.len()) }, &[v, m]))
    }

    fn elementwise_pair(&mut self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "{what} shapes differ: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(a, b, "add")?;
        let values: Vec<S> =
            self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push_output(shape, values, Op::Add { a, b, out: TensorId(self.nodes.len()) }, &[a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(a, b, "mul")?;
        let values: Vec<S> =
            self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push_output(shape, values, Op::Mul { a, b, out: TensorId(self.nodes.len()) }, &[a, b]))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(a, b, "div")?;
        let values: Vec<S> =
            self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| x / y).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push_output(shape, values, Op::Div { a, b, out: TensorId(self.nodes.len()) }, &[a, b]))
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> TensorId {
        let values: Vec<S> = self.values(a).iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_output(shape, values, Op::Scale { a, c: c.f64(), out: TensorId(self.nodes.len()) }, &[a])
    }

    pub fn add_const(&mut self, a: TensorId, c: S) -> TensorId {
        let values: Vec<S> = self.values(a).iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_output(shape, values, Op::AddConst { a, c: c.f64(), out: TensorId(self.nodes.len()) }, &[a])
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let values: Vec<S> = self.values(a).iter().map(|&x| x.max(S::zero())).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_output(shape, values, Op::Relu { a, out: TensorId(self.nodes.len()) }, &[a])
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let values: Vec<S> = self.values(a).iter().map(|&x| ops::gelu_value(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_output(shape, values, Op::Gelu { a, out: TensorId(self.nodes.len()) }, &[a])
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let values: Vec<S> = self.values(a).iter().map(|&x| x.sqrt()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_output(shape, values, Op::Sqrt { a, out: TensorId(self.nodes.len()) }, &[a])
    }

    /// Row-wise layer normalization: y = (x - mean) / sqrt(var + eps) * gain + bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(x);
        if self.want_vector(gain, "layer_norm gain")? != cols
            || self.want_vector(bias, "layer_norm bias")? != cols
        {
            return Err(Error::Shape("layer_norm gain/bias width mismatch".into()));
        }
        let eps = S::c(backward::LAYER_NORM_EPS);
        let xv = self.values(x);
        let g = self.values(gain);
        let b = self.values(bias);
        let mut values = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let (mean, inv) = backward::row_stats(row, eps);
            for j in 0..cols {
                values[r * cols + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push_output(
            shape,
            values,
            Op::LayerNorm { x, gain, bias, out: TensorId(self.nodes.len()) },
            &[x, gain, bias],
        ))
    }

    /// Softmax per row over positions where `mask` is true; exact zeros
    /// elsewhere. Rows with no allowed position are rejected.
    pub fn masked_softmax(&mut self, scores: TensorId, mask: Rc<Vec<bool>>) -> Result<TensorId> {
        let (rows, cols) = self.want_matrix(scores, "masked_softmax")?;
        if mask.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask has {} entries for a {rows}x{cols} score matrix",
                mask.len()
            )));
        }
        for r in 0..rows {
            if !mask[r * cols..(r + 1) * cols].iter().any(|&m| m) {
                return Err(Error::Shape(format!("softmax row {r} has no allowed position")));
            }
        }
        let values = ops::masked_softmax_rows(self.values(scores), &mask, rows, cols);
        Ok(self.push_output(
            vec![rows, cols],
            values,
            Op::MaskedSoftmax { scores, mask, out: TensorId(self.nodes.len()) },
            &[scores],
        ))
    }

    pub fn embed_gather(&mut self, table: TensorId, ids: Rc<Vec<usize>>) -> Result<TensorId> {
        let (v, d) = self.want_matrix(table, "embed_gather table")?;
        for &i in ids.iter() {
            if i >= v {
                return Err(Error::Shape(format!("embedding id {i} out of range {v}")));
            }
        }
        let tv = self.values(table);
        let mut values = Vec::with_capacity(ids.len() * d);
        for &i in ids.iter() {
            values.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rows = ids.len();
        Ok(self.push_output(
            vec![rows, d],
            values,
            Op::EmbedGather { table, ids, out: TensorId(self.nodes.len()) },
            &[table],
        ))
    }

    /// Stack parts vertically. 1-D parts count as single rows.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of nothing".into()));
        }
        let (_, cols) = self.rows_cols(parts[0]);
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(Error::Shape(format!("concat_rows widths {cols} vs {c}")));
            }
            rows += r;
            values.extend_from_slice(self.values(p));
        }
        Ok(self.push_output(
            vec![rows, cols],
            values,
            Op::ConcatRows { parts: parts.to_vec(), out: TensorId(self.nodes.len()) },
            parts,
        ))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.want_matrix(a, "slice_rows")?;
        if start + len > rows {
            return Err(Error::Shape(format!("slice_rows {start}+{len} > {rows}")));
        }
        let values = self.values(a)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push_output(
            vec![len, cols],
            values,
            Op::SliceRows { a, start, out: TensorId(self.nodes.len()) },
            &[a],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let (rows, _) = self.want_matrix(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.want_matrix(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Shape(format!("concat_cols row counts {rows} vs {r}")));
            }
            widths.push(c);
            cols += c;
        }
        let mut values = vec![S::zero(); rows * cols];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.values(p);
            for r in 0..rows {
                values[r * cols + offset..r * cols + offset + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push_output(
            vec![rows, cols],
            values,
            Op::ConcatCols { parts: parts.to_vec(), out: TensorId(self.nodes.len()) },
            parts,
        ))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.want_matrix(a, "slice_cols")?;
        if start + len > cols {
            return Err(Error::Shape(format!("slice_cols {start}+{len} > {cols}")));
        }
        let av = self.values(a);
        let mut values = vec![S::zero(); rows * len];
        for r in 0..rows {
            values[r * len..(r + 1) * len]
                .copy_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push_output(
            vec![rows, len],
            values,
            Op::SliceCols { a, start, out: TensorId(self.nodes.len()) },
            &[a],
        ))
    }

    /// Column means over rows: [m,n] -> [n], ascending row order.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.want_matrix(a, "mean_rows")?;
        let av = self.values(a);
        let mut values = vec![S::zero(); cols];
        for r in 0..rows {
            for j in 0..cols {
                values[j] = values[j] + av[r * cols + j];
            }
        }
        let inv = S::one() / S::c(rows as f64);
        for v in values.iter_mut() {
            *v = *v * inv;
        }
        Ok(self.push_output(
            vec![cols],
            values,
            Op::MeanRows { a, out: TensorId(self.nodes.len()) },
            &[a],
        ))
    }

    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(a, b, "dot")?;
        let mut acc = S::zero();
        for (&x, &y) in self.values(a).iter().zip(self.values(b)) {
            acc = acc + x * y;
        }
        Ok(self.push_output(vec![1], vec![acc], Op::Dot { a, b, out: TensorId(self.nodes.len()) }, &[a, b]))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut acc = S::zero();
        for &x in self.values(a) {
            acc = acc + x;
        }
        self.push_output(vec![1], vec![acc], Op::Sum { a, out: TensorId(self.nodes.len()) }, &[a])
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.values(a).len();
        let mut acc = S::zero();
        for &x in self.values(a) {
            acc = acc + x;
        }
        let v = acc / S::c(n as f64);
        self.push_output(vec![1], vec![v], Op::Mean { a, out: TensorId(self.nodes.len()) }, &[a])
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let count: usize = shape.iter().product();
        if count != self.values(a).len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.nodes[a.0].shape, shape
            )));
        }
        let values = self.values(a).to_vec();
        Ok(self.push_output(
            shape.to_vec(),
            values,
            Op::Reshape { a, out: TensorId(self.nodes.len()) },
            &[a],
        ))
    }

    /// Mean negative log-likelihood of the target class over rows that have
    /// one. Rows with `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: Rc<Vec<Option<usize>>>) -> Result<TensorId> {
        let (rows, cols) = self.want_matrix(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy has {rows} rows but {} targets",
                targets.len()
            )));
        }
        for t in targets.iter().flatten() {
            if *t >= cols {
                return Err(Error::Shape(format!("target class {t} out of range {cols}")));
            }
        }
        let (loss, n) = ops::cross_entropy_rows(self.values(logits), &targets, cols);
        if n == 0 {
            return Err(Error::EmptyLoss);
        }
        Ok(self.push_output(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets, out: TensorId(self.nodes.len()) },
            &[logits],
        ))
    }

    // ── gradients ────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Accumulates into the persistent
    /// grad of every requires_grad leaf (calling twice doubles them).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if loss.0 >= self.nodes.len() || !self.produced[loss.0] {
            return Err(Error::NotOnTape(loss.0));
        }
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Shape(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut flow: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        flow[loss.0] = Some(vec![S::one()]);
        for op in self.ops.iter().rev() {
            let out = op.output();
            let Some(d_out) = flow[out.0].take() else { continue };
            backward::op_vjp(&self.nodes, &self.needs, op, &d_out, &mut flow);
            flow[out.0] = Some(d_out);
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad {
                if let Some(f) = &flow[i] {
                    let g = self.nodes[i].grad.as_mut().expect("grad allocated at creation");
                    for (gi, fi) in g.iter_mut().zip(f) {
                        *gi = *gi + *fi;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for node in self.nodes.iter_mut() {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = S::zero());
            }
        }
    }

    /// Recompute every op output from its recorded inputs and compare
    /// bitwise against what the tape stored. The replay uses the same
    /// kernels as recording, so any divergence means the tape was mutated.
    pub fn replay_matches(&self) -> bool {
        for op in &self.ops {
            let out = op.output();
            let fresh = backward::eval_op(&self.nodes, op);
            let stored = &self.nodes[out.0].values;
            if fresh.len() != stored.len() {
                return false;
            }
            for (a, b) in fresh.iter().zip(stored) {
                if a.f64().to_bits() != b.f64().to_bits() {
                    return false;
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, standard_normal, Stream};

    fn randn(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = derive(seed, Stream::GradCheck, 17);
        (0..n).map(|_| standard_normal(&mut rng)).collect()
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[1], vec![3.0], true).unwrap();
        let loss = tape.mul(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_matrix_vector_product_gradient_is_v_per_row() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&[3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5], true).unwrap();
        let v = tape.leaf(&[2, 1], vec![4.0, -3.0], false).unwrap();
        let wv = tape.matmul(w, v).unwrap();
        let loss = tape.sum(wv);
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap();
        for row in 0..3 {
            assert_eq!(g[row * 2], 4.0);
            assert_eq!(g[row * 2 + 1], -3.0);
        }
    }

    #[test]
    fn two_layer_perceptron_cross_entropy_matches_central_differences() {
        let inputs = randn(0, 4 * 3);
        let targets: Vec<Option<usize>> = vec![Some(1), Some(3), Some(0), Some(2)];
        let params = vec![
            ParamSpec::new("w1", &[3, 8], randn(1, 24)),
            ParamSpec::new("b1", &[8], randn(2, 8)),
            ParamSpec::new("w2", &[8, 4], randn(3, 32)),
            ParamSpec::new("b2", &[4], randn(4, 4)),
        ];
        let report = grad_check(
            |tape, ids| {
                let x = tape.constant(&[4, 3], inputs.clone())?;
                let h = tape.matmul(x, ids[0])?;
                let b1 = tape.concat_rows(&[ids[1]; 4])?;
                let h = tape.add(h, b1)?;
                let h = tape.relu(h);
                let logits = tape.matmul(h, ids[2])?;
                let b2 = tape.concat_rows(&[ids[3]; 4])?;
                let logits = tape.add(logits, b2)?;
                tape.cross_entropy(logits, std::rc::Rc::new(targets.clone()))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn softmax_cross_entropy_over_five_logits_gradcheck() {
        let params = vec![ParamSpec::new("logits", &[1, 5], randn(7, 5))];
        let report = grad_check(
            |tape, ids| tape.cross_entropy(ids[0], std::rc::Rc::new(vec![Some(2)])),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn constant_function_has_exactly_zero_error() {
        let params = vec![ParamSpec::new("p", &[3], vec![1.0, -2.0, 0.5])];
        let report = grad_check(
            |tape, _ids| {
                let c = tape.constant(&[1], vec![4.25])?;
                Ok(tape.scale(c, 1.0))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_err(), 0.0);
    }

    #[test]
    fn every_primitive_passes_gradcheck_on_five_seeds() {
        for seed in 0..5u64 {
            let params = vec![
                ParamSpec::new("a", &[2, 3], randn(seed * 11 + 1, 6)),
                ParamSpec::new("b", &[3, 4], randn(seed * 11 + 2, 12)),
                ParamSpec::new("table", &[5, 4], randn(seed * 11 + 3, 20)),
                ParamSpec::new("gain", &[4], randn(seed * 11 + 4, 4)),
                ParamSpec::new("bias", &[4], randn(seed * 11 + 5, 4)),
                ParamSpec::new("vec", &[3], randn(seed * 11 + 6, 3)),
            ];
            let report = grad_check(
                |tape, ids| {
                    let (a, b, table, gain, bias, v) =
                        (ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]);
                    let mm = tape.matmul(a, b)?; // [2,4]
                    let gathered = tape.embed_gather(table, std::rc::Rc::new(vec![0, 3]))?;
                    let x = tape.add(mm, gathered)?;
                    let x = tape.layer_norm(x, gain, bias)?;
                    let sm = {
                        let mask = std::rc::Rc::new(vec![
                            true, false, false, false, //
                            true, true, true, false,
                        ]);
                        tape.masked_softmax(x, mask)?
                    };
                    let bt = tape.matmul_bt(sm, x)?; // [2,2]
                    let g = tape.gelu(bt);
                    let r = tape.relu(g);
                    let cols = tape.slice_cols(r, 0, 1)?;
                    let rows = tape.slice_rows(cols, 0, 2)?;
                    let joined = tape.concat_cols(&[rows, rows])?;
                    let stacked = tape.concat_rows(&[joined, joined])?;
                    let mr = tape.mean_rows(stacked)?; // [2]
                    let vm = tape.vecmat(v, b)?; // [4]
                    let vm_rows = tape_reshape_rows(tape, vm)?;
                    let half = tape.slice_rows(vm_rows, 0, 2)?;
                    let half = tape.reshape(half, &[2])?;
                    let dot = tape.dot(mr, half)?;
                    let sq = tape.mul(dot, dot)?;
                    let pos = tape.add_const(sq, 1.0);
                    let root = tape.sqrt(pos);
                    let scaled = tape.scale(root, 0.75);
                    let summed = tape.sum(scaled);
                    let m = tape.mean(stacked);
                    let ratio = tape.div(summed, m)?;
                    let total = tape.add(ratio, dot)?;
                    Ok(tape.mean(total))
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(
                report.passes(1e-6),
                "seed {seed}: max rel err {}",
                report.max_rel_err()
            );
        }
    }

    fn tape_reshape_rows(tape: &mut Tape<f64>, v: TensorId) -> Result<TensorId> {
        let n = tape.values(v).len();
        tape.reshape(v, &[n, 1])
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(crate::error::Error::Shape(_))));
    }

    #[test]
    fn backward_rejects_tensors_the_tape_did_not_produce() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[1], vec![1.0], true).unwrap();
        // A leaf is not produced by any recorded op.
        assert!(matches!(tape.backward(x), Err(crate::error::Error::NotOnTape(_))));
        // Nor is an id from some other tape.
        assert!(matches!(tape.backward(TensorId(941)), Err(crate::error::Error::NotOnTape(_))));
    }

    #[test]
    fn backward_twice_doubles_every_gradient_exactly() {
        let run = |times: usize| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(&[3], randn(5, 3), true).unwrap();
            let y = tape.gelu(x);
            let loss = tape.sum(y);
            for _ in 0..times {
                tape.backward(loss).unwrap();
            }
            tape.grad(x).unwrap().to_vec()
        };
        let once = run(1);
        let twice = run(2);
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!((a * 2.0).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic() {
        let run = || -> (Vec<u64>, Vec<u64>) {
            let mut tape = Tape::<f32>::new();
            let a = tape
                .leaf(&[2, 2], randn(9, 4).into_iter().map(|x| x as f32).collect(), true)
                .unwrap();
            let b = tape
                .leaf(&[2, 2], randn(10, 4).into_iter().map(|x| x as f32).collect(), true)
                .unwrap();
            let m = tape.matmul(a, b).unwrap();
            let g = tape.gelu(m);
            let loss = tape.mean(g);
            tape.backward(loss).unwrap();
            (
                tape.values(loss).iter().map(|v| v.to_bits() as u64).collect(),
                tape.grad(a).unwrap().iter().map(|v| v.to_bits() as u64).collect(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn replay_reproduces_recorded_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&[2, 3], randn(11, 6), true).unwrap();
        let b = tape.leaf(&[3, 2], randn(12, 6), false).unwrap();
        let m = tape.matmul(a, b).unwrap();
        let s = tape.scale(m, -2.5);
        let _ = tape.mean(s);
        assert!(tape.replay_matches());
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_zero_out_masked_entries() {
        let mut tape = Tape::<f64>::new();
        let scores = tape.leaf(&[3, 3], randn(13, 9), false).unwrap();
        let mask = std::rc::Rc::new(vec![
            true, false, false, //
            true, true, false, //
            true, true, true,
        ]);
        let probs = tape.masked_softmax(scores, mask.clone()).unwrap();
        let p = tape.values(probs);
        for r in 0..3 {
            let sum: f64 = p[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            for c in 0..3 {
                if !mask[r * 3 + c] {
                    assert_eq!(p[r * 3 + c], 0.0);
                }
            }
        }
    }

    #[test]
    fn grads_off_the_loss_path_stay_zero() {
        let mut tape = Tape::<f64>::new();
        let used = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let unused = tape.leaf(&[2], vec![3.0, 4.0], true).unwrap();
        let y = tape.mul(used, used).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
        assert_ne!(tape.grad(used).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn gradcheck_reports_non_finite_probes_as_failures() {
        let params = vec![ParamSpec::new("p", &[1], vec![0.0])];
        let report = grad_check(
            |tape, ids| {
                // ln at 0 blows up once the probe crosses to negative.
                let shifted = tape.add_const(ids[0], -1.0);
                let r = tape.sqrt(shifted);
                Ok(tape.sum(r))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.entries[0].non_finite);
        assert!(!report.passes(1e-6));
    }
}
