//! Executable oracle for the prompt-placement claims.
//!
//! Appending a graph prompt must leave every text-token hidden state
//! bit-identical to the promptless run, and the appended position's
//! attention output must be a convex combination of the text values and
//! the prompt value. Prepending must perturb the text states and receive
//! a nonzero gradient. The convex-combination check recomputes attention
//! from raw parameters in straight-line code, independent of the tape
//! kernels, and compares within 1e-10.

use super::{clm_loss, forward, LmParams, PromptPlacement, SeqLayout};
use crate::error::Result;
use crate::model::params::Binder;
use crate::tensor::Tape;

pub const RECONSTRUCTION_TOL: f64 = 1e-10;
const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct TheoremReport {
    /// Text hidden states bit-identical between append and no-prompt runs.
    pub append_invariant: bool,
    /// Some text hidden state differs once the prompt is prepended.
    pub prepend_changes: bool,
    /// d(loss)/d(z) has nonzero norm in prepend mode.
    pub prepend_grad_nonzero: bool,
    /// Appended-position attention matches the independent reconstruction
    /// and its weights form a convex combination.
    pub append_is_convex_mix: bool,
    pub max_reconstruction_err: f64,
}

impl TheoremReport {
    pub fn all_hold(&self) -> bool {
        self.append_invariant
            && self.prepend_changes
            && self.prepend_grad_nonzero
            && self.append_is_convex_mix
    }
}

/// Run the three-mode comparison on the given parameters, tokens, and
/// prompt vector. 64-bit only: the invariance checks are bitwise.
pub fn theorem_check(params: &LmParams<f64>, tokens: &[u16], z: &[f64]) -> Result<TheoremReport> {
    let cfg = &params.cfg;

    // Reference run without a prompt.
    let (plain_states, _) = {
        let mut tape = Tape::<f64>::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder, false)?;
        let layout = SeqLayout::new(tokens.to_vec(), PromptPlacement::None, 0, false);
        let trace = forward(&mut tape, cfg, &bound, &layout, None, None)?;
        (collect_rows(&tape, &trace.layer_inputs, 0, tokens.len()), trace)
    };

    // Append run: text rows keep indices 0..k, prompt sits at row k.
    let mut append_tape = Tape::<f64>::new();
    let append_trace = {
        let mut binder = Binder::new(&mut append_tape);
        let bound = params.bind(&mut binder, false)?;
        let layout = SeqLayout::new(tokens.to_vec(), PromptPlacement::Append, 1, false);
        let prompt = append_tape.leaf(&[1, cfg.d_model], z.to_vec(), false)?;
        forward(&mut append_tape, cfg, &bound, &layout, Some(prompt), None)?
    };
    let append_states = collect_rows(&append_tape, &append_trace.layer_inputs, 0, tokens.len());
    let append_invariant = bits_equal(&plain_states, &append_states);

    // Prepend run: text rows shift by one; z takes position 0 and must
    // both perturb the text states and receive gradient from the loss.
    let (prepend_changes, prepend_grad_nonzero) = {
        let mut tape = Tape::<f64>::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder, false)?;
        let layout = SeqLayout::new(tokens.to_vec(), PromptPlacement::Prepend, 1, false);
        let prompt = tape.leaf(&[1, cfg.d_model], z.to_vec(), true)?;
        let trace = forward(&mut tape, cfg, &bound, &layout, Some(prompt), None)?;
        let states = collect_rows(&tape, &trace.layer_inputs, 1, tokens.len());
        let changes = !bits_equal(&plain_states, &states);
        let grad_nonzero = if tokens.len() >= 2 {
            let loss = clm_loss(&mut tape, &trace, false)?;
            tape.backward(loss)?;
            let g = tape.grad(prompt).unwrap();
            g.iter().any(|&x| x != 0.0)
        } else {
            false
        };
        (changes, grad_nonzero)
    };

    // Convex-combination reconstruction at the appended position, every
    // layer and head, from raw parameters.
    let mut max_err = 0.0f64;
    let mut convex = true;
    let prompt_row = tokens.len();
    let d_head = cfg.d_head();
    for (li, layer) in params.layers.iter().enumerate() {
        let h_in = append_tape.values(append_trace.layer_inputs[li]).to_vec();
        let cols = cfg.d_model;
        let normed = layer_norm_rows(&h_in, prompt_row + 1, cols, &layer.ln1_gain.data, &layer.ln1_bias.data);
        for head in 0..cfg.n_heads {
            // Projections restricted to this head's column block.
            let col0 = head * d_head;
            let project = |w: &crate::model::params::Mat<f64>, row: &[f64]| -> Vec<f64> {
                (0..d_head)
                    .map(|j| (0..cols).map(|i| row[i] * w.data[i * w.cols + col0 + j]).sum())
                    .collect()
            };
            let q = project(&layer.wq, &normed[prompt_row * cols..(prompt_row + 1) * cols]);
            let keys: Vec<Vec<f64>> = (0..=prompt_row)
                .map(|r| project(&layer.wk, &normed[r * cols..(r + 1) * cols]))
                .collect();
            let values: Vec<Vec<f64>> = (0..=prompt_row)
                .map(|r| project(&layer.wv, &normed[r * cols..(r + 1) * cols]))
                .collect();
            let scale = 1.0 / (d_head as f64).sqrt();
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let denom: f64 = scores.iter().map(|s| s.exp()).sum();
            let weights: Vec<f64> = scores.iter().map(|s| s.exp() / denom).collect();
            let mut recon = vec![0.0f64; d_head];
            for (a, v) in weights.iter().zip(&values) {
                for (r, x) in recon.iter_mut().zip(v) {
                    *r += a * x;
                }
            }

            let trace = &append_trace.attention[li][head];
            let total = prompt_row + 1;
            let model_probs = &append_tape.values(trace.probs)
                [prompt_row * total..(prompt_row + 1) * total];
            let model_ctx = &append_tape.values(trace.context)
                [prompt_row * d_head..(prompt_row + 1) * d_head];

            let prob_sum: f64 = model_probs.iter().sum();
            if (prob_sum - 1.0).abs() > PROB_SUM_TOL || model_probs.iter().any(|&p| p < 0.0) {
                convex = false;
            }
            for (a, b) in model_probs.iter().zip(&weights) {
                max_err = max_err.max((a - b).abs());
            }
            for (a, b) in model_ctx.iter().zip(&recon) {
                max_err = max_err.max((a - b).abs());
            }
        }
    }
    let append_is_convex_mix = convex && max_err <= RECONSTRUCTION_TOL;

    Ok(TheoremReport {
        append_invariant,
        prepend_changes,
        prepend_grad_nonzero,
        append_is_convex_mix,
        max_reconstruction_err: max_err,
    })
}

fn collect_rows(
    tape: &Tape<f64>,
    matrices: &[crate::tensor::TensorId],
    first_row: usize,
    n_rows: usize,
) -> Vec<Vec<f64>> {
    matrices
        .iter()
        .map(|&id| {
            let cols = tape.shape(id)[1];
            tape.values(id)[first_row * cols..(first_row + n_rows) * cols].to_vec()
        })
        .collect()
}

fn bits_equal(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.len() == y.len()
                && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn layer_norm_rows(
    x: &[f64],
    rows: usize,
    cols: usize,
    gain: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean: f64 = row.iter().sum::<f64>() / cols as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..cols {
            out[r * cols + j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    out
}
