//! Vector-Jacobian products for every primitive, applied in exact reverse
//! recording order by `Tape::backward`.

use super::ops::{self, Op};
use super::{Tensor, TensorId};
use crate::scalar::Scalar;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Row mean and inverse standard deviation used by layer norm.
pub(crate) fn row_stats<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::c(row.len() as f64);
    let mut mean = S::zero();
    for &x in row {
        mean = mean + x;
    }
    mean = mean / n;
    let mut var = S::zero();
    for &x in row {
        let d = x - mean;
        var = var + d * d;
    }
    var = var / n;
    (mean, S::one() / (var + eps).sqrt())
}

fn accumulate<S: Scalar>(
    flow: &mut [Option<Vec<S>>],
    needs: &[bool],
    id: TensorId,
    contrib: impl FnOnce() -> Vec<S>,
) {
    if !needs[id.0] {
        return;
    }
    let c = contrib();
    match &mut flow[id.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&c) {
                *e = *e + *x;
            }
        }
        None => flow[id.0] = Some(c),
    }
}

fn rows_cols(nodes: &[Tensor<impl Scalar>], id: TensorId) -> (usize, usize) {
    let s = &nodes[id.0].shape;
    match s.len() {
        1 => (1, s[0]),
        2 => (s[0], s[1]),
        _ => unreachable!("ops only produce 1-D/2-D tensors"),
    }
}

pub(crate) fn op_vjp<S: Scalar>(
    nodes: &[Tensor<S>],
    needs: &[bool],
    op: &Op,
    d_out: &[S],
    flow: &mut [Option<Vec<S>>],
) {
    match op {
        Op::MatMul { a, b, out: _ } => {
            let (m, k) = rows_cols(nodes, *a);
            let (_, n) = rows_cols(nodes, *b);
            accumulate(flow, needs, *a, || ops::matmul_bt(d_out, &nodes[b.0].values, m, n, k));
            accumulate(flow, needs, *b, || {
                let a_t = ops::transpose(&nodes[a.0].values, m, k);
                ops::matmul(&a_t, d_out, k, m, n)
            });
        }
        Op::MatMulBt { a, b, out: _ } => {
            let (m, k) = rows_cols(nodes, *a);
            let (n, _) = rows_cols(nodes, *b);
            accumulate(flow, needs, *a, || ops::matmul(d_out, &nodes[b.0].values, m, n, k));
            accumulate(flow, needs, *b, || {
                let d_t = ops::transpose(d_out, m, n);
                ops::matmul(&d_t, &nodes[a.0].values, n, m, k)
            });
        }
        Op::VecMat { v, m, out: _ } => {
            let k = nodes[v.0].values.len();
            let n = d_out.len();
            let mv = &nodes[m.0].values;
            accumulate(flow, needs, *v, || {
                let mut d = vec![S::zero(); k];
                for (i, di) in d.iter_mut().enumerate() {
                    let row = &mv[i * n..(i + 1) * n];
                    let mut acc = S::zero();
                    for (&g, &w) in d_out.iter().zip(row) {
                        acc = acc + g * w;
                    }
                    *di = acc;
                }
                d
            });
            accumulate(flow, needs, *m, || {
                let vv = &nodes[v.0].values;
                let mut d = vec![S::zero(); k * n];
                for i in 0..k {
                    for j in 0..n {
                        d[i * n + j] = vv[i] * d_out[j];
                    }
                }
                d
            });
        }
        Op::Add { a, b, out: _ } => {
            accumulate(flow, needs, *a, || d_out.to_vec());
            accumulate(flow, needs, *b, || d_out.to_vec());
        }
        Op::Mul { a, b, out: _ } => {
            accumulate(flow, needs, *a, || {
                d_out.iter().zip(&nodes[b.0].values).map(|(&g, &y)| g * y).collect()
            });
            accumulate(flow, needs, *b, || {
                d_out.iter().zip(&nodes[a.0].values).map(|(&g, &x)| g * x).collect()
            });
        }
        Op::Div { a, b, out: _ } => {
            accumulate(flow, needs, *a, || {
                d_out.iter().zip(&nodes[b.0].values).map(|(&g, &y)| g / y).collect()
            });
            accumulate(flow, needs, *b, || {
                d_out
                    .iter()
                    .zip(nodes[a.0].values.iter().zip(&nodes[b.0].values))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect()
            });
        }
        Op::Scale { a, c, out: _ } => {
            let c = S::c(*c);
            accumulate(flow, needs, *a, || d_out.iter().map(|&g| g * c).collect());
        }
        Op::AddConst { a, c: _, out: _ } => {
            accumulate(flow, needs, *a, || d_out.to_vec());
        }
        Op::Relu { a, out: _ } => {
            accumulate(flow, needs, *a, || {
                d_out
                    .iter()
                    .zip(&nodes[a.0].values)
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect()
            });
        }
        Op::Gelu { a, out: _ } => {
            accumulate(flow, needs, *a, || {
                d_out
                    .iter()
                    .zip(&nodes[a.0].values)
                    .map(|(&g, &x)| g * ops::gelu_derivative(x))
                    .collect()
            });
        }
        Op::Sqrt { a, out } => {
            accumulate(flow, needs, *a, || {
                d_out
                    .iter()
                    .zip(&nodes[out.0].values)
                    .map(|(&g, &y)| g * S::c(0.5) / y)
                    .collect()
            });
        }
        Op::LayerNorm { x, gain, bias, out: _ } => {
            let (rows, cols) = rows_cols(nodes, *x);
            let eps = S::c(LAYER_NORM_EPS);
            let xv = &nodes[x.0].values;
            let gv = &nodes[gain.0].values;
            accumulate(flow, needs, *bias, || {
                let mut d = vec![S::zero(); cols];
                for r in 0..rows {
                    for j in 0..cols {
                        d[j] = d[j] + d_out[r * cols + j];
                    }
                }
                d
            });
            accumulate(flow, needs, *gain, || {
                let mut d = vec![S::zero(); cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let (mean, inv) = row_stats(row, eps);
                    for j in 0..cols {
                        d[j] = d[j] + d_out[r * cols + j] * (row[j] - mean) * inv;
                    }
                }
                d
            });
            accumulate(flow, needs, *x, || {
                let n = S::c(cols as f64);
                let mut d = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let (mean, inv) = row_stats(row, eps);
                    // h = dy * gain; dx = inv * (h - mean(h) - xhat * mean(h*xhat))
                    let mut h_mean = S::zero();
                    let mut hx_mean = S::zero();
                    for j in 0..cols {
                        let h = d_out[r * cols + j] * gv[j];
                        let xhat = (row[j] - mean) * inv;
                        h_mean = h_mean + h;
                        hx_mean = hx_mean + h * xhat;
                    }
                    h_mean = h_mean / n;
                    hx_mean = hx_mean / n;
                    for j in 0..cols {
                        let h = d_out[r * cols + j] * gv[j];
                        let xhat = (row[j] - mean) * inv;
                        d[r * cols + j] = inv * (h - h_mean - xhat * hx_mean);
                    }
                }
                d
            });
        }
        Op::MaskedSoftmax { scores, mask, out } => {
            let (rows, cols) = rows_cols(nodes, *scores);
            let p = &nodes[out.0].values;
            accumulate(flow, needs, *scores, || {
                let mut d = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    let mut inner = S::zero();
                    for j in 0..cols {
                        if mask[r * cols + j] {
                            inner = inner + d_out[r * cols + j] * p[r * cols + j];
                        }
                    }
                    for j in 0..cols {
                        if mask[r * cols + j] {
                            d[r * cols + j] = p[r * cols + j] * (d_out[r * cols + j] - inner);
                        }
                    }
                }
                d
            });
        }
        Op::EmbedGather { table, ids, out: _ } => {
            let (v, d_width) = rows_cols(nodes, *table);
            accumulate(flow, needs, *table, || {
                let mut d = vec![S::zero(); v * d_width];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d_width {
                        d[id * d_width + j] = d[id * d_width + j] + d_out[r * d_width + j];
                    }
                }
                d
            });
        }
        Op::ConcatRows { parts, out: _ } => {
            let mut offset = 0;
            for &p in parts {
                let count = nodes[p.0].values.len();
                let slice = &d_out[offset..offset + count];
                accumulate(flow, needs, p, || slice.to_vec());
                offset += count;
            }
        }
        Op::SliceRows { a, start, out } => {
            let (_, cols) = rows_cols(nodes, *a);
            let (len, _) = rows_cols(nodes, *out);
            accumulate(flow, needs, *a, || {
                let mut d = vec![S::zero(); nodes[a.0].values.len()];
                d[start * cols..(start + len) * cols].copy_from_slice(d_out);
                d
            });
        }
        Op::ConcatCols { parts, out } => {
            let (rows, cols) = rows_cols(nodes, *out);
            let mut offset = 0;
            for &p in parts {
                let (_, w) = rows_cols(nodes, p);
                accumulate(flow, needs, p, || {
                    let mut d = vec![S::zero(); rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w]
                            .copy_from_slice(&d_out[r * cols + offset..r * cols + offset + w]);
                    }
                    d
                });
                offset += w;
            }
        }
        Op::SliceCols { a, start, out } => {
            let (rows, cols) = rows_cols(nodes, *a);
            let (_, len) = rows_cols(nodes, *out);
            accumulate(flow, needs, *a, || {
                let mut d = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&d_out[r * len..(r + 1) * len]);
                }
                d
            });
        }
        Op::MeanRows { a, out: _ } => {
            let (rows, cols) = rows_cols(nodes, *a);
            let inv = S::one() / S::c(rows as f64);
            accumulate(flow, needs, *a, || {
                let mut d = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    for j in 0..cols {
                        d[r * cols + j] = d_out[j] * inv;
                    }
                }
                d
            });
        }
        Op::Dot { a, b, out: _ } => {
            let g = d_out[0];
            accumulate(flow, needs, *a, || nodes[b.0].values.iter().map(|&y| g * y).collect());
            accumulate(flow, needs, *b, || nodes[a.0].values.iter().map(|&x| g * x).collect());
        }
        Op::Sum { a, out: _ } => {
            let g = d_out[0];
            accumulate(flow, needs, *a, || vec![g; nodes[a.0].values.len()]);
        }
        Op::Mean { a, out: _ } => {
            let n = nodes[a.0].values.len();
            let g = d_out[0] / S::c(n as f64);
            accumulate(flow, needs, *a, || vec![g; n]);
        }
        Op::Reshape { a, out: _ } => {
            accumulate(flow, needs, *a, || d_out.to_vec());
        }
        Op::CrossEntropy { logits, targets, out: _ } => {
            let (rows, cols) = rows_cols(nodes, *logits);
            let lv = &nodes[logits.0].values;
            let n_tgt = targets.iter().filter(|t| t.is_some()).count();
            let g = d_out[0] / S::c(n_tgt as f64);
            accumulate(flow, needs, *logits, || {
                let mut d = vec![S::zero(); rows * cols];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let row = &lv[r * cols..(r + 1) * cols];
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
                    for j in 0..cols {
                        let p = (row[j] - max).exp() / denom;
                        let y = if j == *t { S::one() } else { S::zero() };
                        d[r * cols + j] = (p - y) * g;
                    }
                }
                d
            });
        }
    }
}

/// Recompute one op's output from the recorded inputs — used by the replay
/// oracle to certify the tape was not mutated after recording.
pub(crate) fn eval_op<S: Scalar>(nodes: &[Tensor<S>], op: &Op) -> Vec<S> {
    match op {
        Op::MatMul { a, b, out: _ } => {
            let (m, k) = rows_cols(nodes, *a);
            let (_, n) = rows_cols(nodes, *b);
            ops::matmul(&nodes[a.0].values, &nodes[b.0].values, m, k, n)
        }
        Op::MatMulBt { a, b, out: _ } => {
            let (m, k) = rows_cols(nodes, *a);
            let (n, _) = rows_cols(nodes, *b);
            ops::matmul_bt(&nodes[a.0].values, &nodes[b.0].values, m, k, n)
        }
        Op::VecMat { v, m, out: _ } => {
            let k = nodes[v.0].values.len();
            let (_, n) = rows_cols(nodes, *m);
            ops::matmul(&nodes[v.0].values, &nodes[m.0].values, 1, k, n)
        }
        Op::Add { a, b, out: _ } => {
            nodes[a.0].values.iter().zip(&nodes[b.0].values).map(|(&x, &y)| x + y).collect()
        }
        Op::Mul { a, b, out: _ } => {
            nodes[a.0].values.iter().zip(&nodes[b.0].values).map(|(&x, &y)| x * y).collect()
        }
        Op::Div { a, b, out: _ } => {
            nodes[a.0].values.iter().zip(&nodes[b.0].values).map(|(&x, &y)| x / y).collect()
        }
        Op::Scale { a, c, out: _ } => {
            let c = S::c(*c);
            nodes[a.0].values.iter().map(|&x| x * c).collect()
        }
        Op::AddConst { a, c, out: _ } => {
            let c = S::c(*c);
            nodes[a.0].values.iter().map(|&x| x + c).collect()
        }
        Op::Relu { a, out: _ } => {
            nodes[a.0].values.iter().map(|&x| x.max(S::zero())).collect()
        }
        Op::Gelu { a, out: _ } => {
            nodes[a.0].values.iter().map(|&x| ops::gelu_value(x)).collect()
        }
        Op::Sqrt { a, out: _ } => nodes[a.0].values.iter().map(|&x| x.sqrt()).collect(),
        Op::LayerNorm { x, gain, bias, out: _ } => {
            let (rows, cols) = rows_cols(nodes, *x);
            let eps = S::c(LAYER_NORM_EPS);
            let xv = &nodes[x.0].values;
            let g = &nodes[gain.0].values;
            let b = &nodes[bias.0].values;
            let mut values = vec![S::zero(); rows * cols];
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let (mean, inv) = row_stats(row, eps);
                for j in 0..cols {
                    values[r * cols + j] = (row[j] - mean) * inv * g[j] + b[j];
                }
            }
            values
        }
        Op::MaskedSoftmax { scores, mask, out: _ } => {
            let (rows, cols) = rows_cols(nodes, *scores);
            ops::masked_softmax_rows(&nodes[scores.0].values, mask, rows, cols)
        }
        Op::EmbedGather { table, ids, out: _ } => {
            let (_, d) = rows_cols(nodes, *table);
            let tv = &nodes[table.0].values;
            let mut values = Vec::with_capacity(ids.len() * d);
            for &i in ids.iter() {
                values.extend_from_slice(&tv[i * d..(i + 1) * d]);
            }
            values
        }
        Op::ConcatRows { parts, out: _ } => {
            let mut values = Vec::new();
            for &p in parts {
                values.extend_from_slice(&nodes[p.0].values);
            }
            values
        }
        Op::SliceRows { a, start, out } => {
            let (_, cols) = rows_cols(nodes, *a);
            let (len, _) = rows_cols(nodes, *out);
            nodes[a.0].values[start * cols..(start + len) * cols].to_vec()
        }
        Op::ConcatCols { parts, out } => {
            let (rows, cols) = rows_cols(nodes, *out);
            let mut values = vec![S::zero(); rows * cols];
            let mut offset = 0;
            for &p in parts {
                let (_, w) = rows_cols(nodes, p);
                let pv = &nodes[p.0].values;
                for r in 0..rows {
                    values[r * cols + offset..r * cols + offset + w]
                        .copy_from_slice(&pv[r * w..(r + 1) * w]);
                }
                offset += w;
            }
            values
        }
        Op::SliceCols { a, start, out } => {
            let (rows, cols) = rows_cols(nodes, *a);
            let (_, len) = rows_cols(nodes, *out);
            let av = &nodes[a.0].values;
            let mut values = vec![S::zero(); rows * len];
            for r in 0..rows {
                values[r * len..(r + 1) * len]
                    .copy_from_slice(&av[r * cols + start..r * cols + start + len]);
            }
            values
        }
        Op::MeanRows { a, out: _ } => {
            let (rows, cols) = rows_cols(nodes, *a);
            let av = &nodes[a.0].values;
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
            values
        }
        Op::Dot { a, b, out: _ } => {
            let mut acc = S::zero();
            for (&x, &y) in nodes[a.0].values.iter().zip(&nodes[b.0].values) {
                acc = acc + x * y;
            }
            vec![acc]
        }
        Op::Sum { a, out: _ } => {
            let mut acc = S::zero();
            for &x in &nodes[a.0].values {
                acc = acc + x;
            }
            vec![acc]
        }
        Op::Mean { a, out: _ } => {
            let mut acc = S::zero();
            for &x in &nodes[a.0].values {
                acc = acc + x;
            }
            vec![acc / S::c(nodes[a.0].values.len() as f64)]
        }
        Op::Reshape { a, out: _ } => nodes[a.0].values.clone(),
        Op::CrossEntropy { logits, targets, out: _ } => {
            let (_, cols) = rows_cols(nodes, *logits);
            let (loss, _) = ops::cross_entropy_rows(&nodes[logits.0].values, targets, cols);
            vec![loss]
        }
    }
}
