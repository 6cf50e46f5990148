//! Primitive operations and their forward kernels.
//!
//! Every kernel accumulates in a fixed sequential index order so that a
//! given (seed, precision) pair always reproduces bit-identical values.

use super::TensorId;
use crate::scalar::Scalar;

/// A recorded primitive. Input and output ids refer to tape nodes.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    /// out = A·B, A:[m,k] B:[k,n]
    MatMul { a: TensorId, b: TensorId, out: TensorId },
    /// out = A·Bᵀ, A:[m,k] B:[n,k]
    MatMulBt { a: TensorId, b: TensorId, out: TensorId },
    /// out = vᵀM, v:[k] M:[k,n]
    VecMat { v: TensorId, m: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Div { a: TensorId, b: TensorId, out: TensorId },
    /// Constants live in the op as f64 (exact for either precision).
    Scale { a: TensorId, c: f64, out: TensorId },
    AddConst { a: TensorId, c: f64, out: TensorId },
    Relu { a: TensorId, out: TensorId },
    Gelu { a: TensorId, out: TensorId },
    Sqrt { a: TensorId, out: TensorId },
    /// Row-wise layer norm with learned gain and bias.
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, out: TensorId },
    /// Row-wise softmax over the positions the mask allows; zeros elsewhere.
    MaskedSoftmax { scores: TensorId, mask: std::rc::Rc<Vec<bool>>, out: TensorId },
    /// Row gather from an embedding table.
    EmbedGather { table: TensorId, ids: std::rc::Rc<Vec<usize>>, out: TensorId },
    ConcatRows { parts: Vec<TensorId>, out: TensorId },
    SliceRows { a: TensorId, start: usize, out: TensorId },
    ConcatCols { parts: Vec<TensorId>, out: TensorId },
    SliceCols { a: TensorId, start: usize, out: TensorId },
    /// Column-wise mean over rows: [m,n] -> [n].
    MeanRows { a: TensorId, out: TensorId },
    Dot { a: TensorId, b: TensorId, out: TensorId },
    Sum { a: TensorId, out: TensorId },
    Mean { a: TensorId, out: TensorId },
    Reshape { a: TensorId, out: TensorId },
    /// Mean negative log-softmax of the target class over rows with a target.
    CrossEntropy { logits: TensorId, targets: std::rc::Rc<Vec<Option<usize>>>, out: TensorId },
}

impl Op {
    pub(crate) fn output(&self) -> TensorId {
        match *self {
            Op::MatMul { out, .. }
            | Op::MatMulBt { out, .. }
            | Op::VecMat { out, .. }
            | Op::Add { out, .. }
            | Op::Mul { out, .. }
            | Op::Div { out, .. }
            | Op::Scale { out, .. }
            | Op::AddConst { out, .. }
            | Op::Relu { out, .. }
            | Op::Gelu { out, .. }
            | Op::Sqrt { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::MaskedSoftmax { out, .. }
            | Op::EmbedGather { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::SliceRows { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::SliceCols { out, .. }
            | Op::MeanRows { out, .. }
            | Op::Dot { out, .. }
            | Op::Sum { out, .. }
            | Op::Mean { out, .. }
            | Op::Reshape { out, .. }
            | Op::CrossEntropy { out, .. } => out,
        }
    }
}

// ── forward kernels ─────────────────────────────────────────────────

/// C[m,n] = A[m,k]·B[k,n], ikj loop order (inner j is vectorizable while
/// each output's accumulation stays in ascending-k order).
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// C[m,n] = A[m,k]·B[n,k]ᵀ — row-by-row dot products.
pub(crate) fn matmul_bt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Aᵀ for a row-major [m,n] matrix.
pub(crate) fn transpose<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn gelu_value<S: Scalar>(x: S) -> S {
    let c = S::c(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::c(0.044715);
    let u = c * (x + a * x * x * x);
    S::c(0.5) * x * (S::one() + u.tanh())
}

pub(crate) fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::c(0.797_884_560_802_865_4);
    let a = S::c(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    let du = c * (S::one() + S::c(3.0) * a * x * x);
    S::c(0.5) * (S::one() + t) + S::c(0.5) * x * sech2 * du
}

/// Row-wise softmax restricted to allowed positions; disallowed entries are
/// exactly zero. Max-shifted for stability; ascending index order throughout.
pub(crate) fn masked_softmax_rows<S: Scalar>(
    scores: &[S],
    mask: &[bool],
    rows: usize,
    cols: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let row = &scores[r * cols..(r + 1) * cols];
        let mrow = &mask[r * cols..(r + 1) * cols];
        let mut max = S::neg_infinity();
        for (j, &s) in row.iter().enumerate() {
            if mrow[j] && s > max {
                max = s;
            }
        }
        let mut denom = S::zero();
        for j in 0..cols {
            if mrow[j] {
                let e = (row[j] - max).exp();
                out[r * cols + j] = e;
                denom = denom + e;
            }
        }
        for j in 0..cols {
            if mrow[j] {
                out[r * cols + j] = out[r * cols + j] / denom;
            }
        }
    }
    out
}

/// Per-row -log softmax(logits)[target], averaged over rows with a target.
/// Returns (loss, n_targets).
pub(crate) fn cross_entropy_rows<S: Scalar>(
    logits: &[S],
    targets: &[Option<usize>],
    cols: usize,
) -> (S, usize) {
    let mut total = S::zero();
    let mut n = 0usize;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        let row = &logits[r * cols..(r + 1) * cols];
        let mut max = S::neg_infinity();
        for &x in row {
            if x > max {
                max = x;
            }
        }
        let mut denom = S::zero();
        for &x in row {
            denom = denom + (x - max).exp();
        }
        total = total + (denom.ln() + max - row[*t]);
        n += 1;
    }
    let loss = if n == 0 { S::zero() } else { total / S::c(n as f64) };
    (loss, n)
}
