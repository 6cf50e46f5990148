//! Miniature decoder-only causal transformer with a graph-prompt position.
//!
//! Pre-norm blocks, learned absolute positions, strict causal masking. The
//! prompt occupies position 0 when prepended and the position after the
//! text when appended; the [GRL] token is always last (before padding).
//! Attention softmax rows are logged on the tape so the prompt-placement
//! oracle can reconstruct them independently.

mod theorem;

pub use theorem::{theorem_check, TheoremReport};

use crate::error::{Error, Result};
use crate::model::params::{Binder, Mat, Partition, TensorRef, Vect, VisitParams};
use crate::peft::LoraLayerBinding;
use crate::rng::{derive, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};
use std::rc::Rc;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionEncoding {
    LearnedAbsolute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    /// Includes the two reserved specials: [GRL] = vocab-2, pad = vocab-1.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Token budget; the prompt position and [GRL] sit on top of this.
    pub max_seq: usize,
    pub pos_encoding: PositionEncoding,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 258,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            max_seq: 64,
            pos_encoding: PositionEncoding::LearnedAbsolute,
        }
    }
}

impl LmConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Total positions: tokens + prompt + [GRL].
    pub fn capacity(&self) -> usize {
        self.max_seq + 2
    }

    pub fn grl_id(&self) -> u16 {
        (self.vocab_size - 2) as u16
    }

    pub fn pad_id(&self) -> u16 {
        (self.vocab_size - 1) as u16
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab must hold [GRL], pad, and one token".into()));
        }
        Ok(())
    }
}

// ── parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LmLayer<S> {
    pub ln1_gain: Vect<S>,
    pub ln1_bias: Vect<S>,
    pub wq: Mat<S>,
    pub wk: Mat<S>,
    pub wv: Mat<S>,
    pub wo: Mat<S>,
    pub ln2_gain: Vect<S>,
    pub ln2_bias: Vect<S>,
    pub w1: Mat<S>,
    pub w2: Mat<S>,
}

#[derive(Debug, Clone)]
pub struct LmParams<S> {
    pub cfg: LmConfig,
    pub tok_emb: Mat<S>,
    pub pos_emb: Mat<S>,
    pub layers: Vec<LmLayer<S>>,
    pub final_gain: Vect<S>,
    pub final_bias: Vect<S>,
    pub lm_head: Mat<S>,
}

impl<S: Scalar> LmParams<S> {
    pub fn init(cfg: &LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive(seed, Stream::ParamInit, 0);
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| LmLayer {
                ln1_gain: Vect::ones(d),
                ln1_bias: Vect::zeros(d),
                wq: Mat::normal(d, d, INIT_STD, &mut rng),
                wk: Mat::normal(d, d, INIT_STD, &mut rng),
                wv: Mat::normal(d, d, INIT_STD, &mut rng),
                wo: Mat::normal(d, d, INIT_STD, &mut rng),
                ln2_gain: Vect::ones(d),
                ln2_bias: Vect::zeros(d),
                w1: Mat::normal(d, cfg.d_ff(), INIT_STD, &mut rng),
                w2: Mat::normal(cfg.d_ff(), d, INIT_STD, &mut rng),
            })
            .collect();
        Ok(LmParams {
            cfg: cfg.clone(),
            tok_emb: Mat::normal(cfg.vocab_size, d, INIT_STD, &mut rng),
            pos_emb: Mat::normal(cfg.capacity(), d, INIT_STD, &mut rng),
            layers,
            final_gain: Vect::ones(d),
            final_bias: Vect::zeros(d),
            lm_head: Mat::normal(d, cfg.vocab_size, INIT_STD, &mut rng),
        })
    }

    pub fn bind(&self, binder: &mut Binder<'_, S>, trainable: bool) -> Result<LmBinding> {
        let p = Partition::Pre;
        let mut layers = Vec::with_capacity(self.layers.len());
        let tok_emb = binder.mat("lm.tok_emb", &self.tok_emb, p, trainable)?;
        let pos_emb = binder.mat("lm.pos_emb", &self.pos_emb, p, trainable)?;
        for (i, l) in self.layers.iter().enumerate() {
            let n = |field: &str| format!("lm.layer{i}.{field}");
            layers.push(LmLayerBinding {
                ln1_gain: binder.vect(&n("ln1_gain"), &l.ln1_gain, p, trainable)?,
                ln1_bias: binder.vect(&n("ln1_bias"), &l.ln1_bias, p, trainable)?,
                wq: binder.mat(&n("wq"), &l.wq, p, trainable)?,
                wk: binder.mat(&n("wk"), &l.wk, p, trainable)?,
                wv: binder.mat(&n("wv"), &l.wv, p, trainable)?,
                wo: binder.mat(&n("wo"), &l.wo, p, trainable)?,
                ln2_gain: binder.vect(&n("ln2_gain"), &l.ln2_gain, p, trainable)?,
                ln2_bias: binder.vect(&n("ln2_bias"), &l.ln2_bias, p, trainable)?,
                w1: binder.mat(&n("w1"), &l.w1, p, trainable)?,
                w2: binder.mat(&n("w2"), &l.w2, p, trainable)?,
            });
        }
        Ok(LmBinding {
            tok_emb,
            pos_emb,
            layers,
            final_gain: binder.vect("lm.final_gain", &self.final_gain, p, trainable)?,
            final_bias: binder.vect("lm.final_bias", &self.final_bias, p, trainable)?,
            lm_head: binder.mat("lm.head", &self.lm_head, p, trainable)?,
        })
    }
}

impl<S: Scalar> VisitParams<S> for LmParams<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, Partition, TensorRef<'_, S>)) {
        let p = Partition::Pre;
        f("lm.tok_emb", p, TensorRef::Mat(&self.tok_emb));
        f("lm.pos_emb", p, TensorRef::Mat(&self.pos_emb));
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("lm.layer{i}.ln1_gain"), p, TensorRef::Vect(&l.ln1_gain));
            f(&format!("lm.layer{i}.ln1_bias"), p, TensorRef::Vect(&l.ln1_bias));
            f(&format!("lm.layer{i}.wq"), p, TensorRef::Mat(&l.wq));
            f(&format!("lm.layer{i}.wk"), p, TensorRef::Mat(&l.wk));
            f(&format!("lm.layer{i}.wv"), p, TensorRef::Mat(&l.wv));
            f(&format!("lm.layer{i}.wo"), p, TensorRef::Mat(&l.wo));
            f(&format!("lm.layer{i}.ln2_gain"), p, TensorRef::Vect(&l.ln2_gain));
            f(&format!("lm.layer{i}.ln2_bias"), p, TensorRef::Vect(&l.ln2_bias));
            f(&format!("lm.layer{i}.w1"), p, TensorRef::Mat(&l.w1));
            f(&format!("lm.layer{i}.w2"), p, TensorRef::Mat(&l.w2));
        }
        f("lm.final_gain", p, TensorRef::Vect(&self.final_gain));
        f("lm.final_bias", p, TensorRef::Vect(&self.final_bias));
        f("lm.head", p, TensorRef::Mat(&self.lm_head));
    }

    fn visit_values_mut(&mut self, f: &mut dyn FnMut(&str, Partition, &mut Vec<S>)) {
        let p = Partition::Pre;
        f("lm.tok_emb", p, &mut self.tok_emb.data);
        f("lm.pos_emb", p, &mut self.pos_emb.data);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("lm.layer{i}.ln1_gain"), p, &mut l.ln1_gain.data);
            f(&format!("lm.layer{i}.ln1_bias"), p, &mut l.ln1_bias.data);
            f(&format!("lm.layer{i}.wq"), p, &mut l.wq.data);
            f(&format!("lm.layer{i}.wk"), p, &mut l.wk.data);
            f(&format!("lm.layer{i}.wv"), p, &mut l.wv.data);
            f(&format!("lm.layer{i}.wo"), p, &mut l.wo.data);
            f(&format!("lm.layer{i}.ln2_gain"), p, &mut l.ln2_gain.data);
            f(&format!("lm.layer{i}.ln2_bias"), p, &mut l.ln2_bias.data);
            f(&format!("lm.layer{i}.w1"), p, &mut l.w1.data);
            f(&format!("lm.layer{i}.w2"), p, &mut l.w2.data);
        }
        f("lm.final_gain", p, &mut self.final_gain.data);
        f("lm.final_bias", p, &mut self.final_bias.data);
        f("lm.head", p, &mut self.lm_head.data);
    }
}

#[derive(Debug, Clone)]
pub struct LmLayerBinding {
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
    pub w1: TensorId,
    pub w2: TensorId,
}

#[derive(Debug, Clone)]
pub struct LmBinding {
    pub tok_emb: TensorId,
    pub pos_emb: TensorId,
    pub layers: Vec<LmLayerBinding>,
    pub final_gain: TensorId,
    pub final_bias: TensorId,
    pub lm_head: TensorId,
}

// ── sequence layout ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptPlacement {
    None,
    Prepend,
    Append,
}

/// Row assignment for one prompted sequence:
/// prepend — [prompt; tokens; grl?; pads], append — [tokens; prompt; grl?;
/// pads], none — [tokens; grl?; pads].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub tokens: Vec<u16>,
    pub placement: PromptPlacement,
    pub n_prompt: usize,
    pub grl: bool,
    pub n_pad: usize,
}

impl SeqLayout {
    pub fn new(tokens: Vec<u16>, placement: PromptPlacement, n_prompt: usize, grl: bool) -> Self {
        let n_prompt = if placement == PromptPlacement::None { 0 } else { n_prompt };
        SeqLayout { tokens, placement, n_prompt, grl, n_pad: 0 }
    }

    pub fn total(&self) -> usize {
        self.n_prompt + self.tokens.len() + usize::from(self.grl) + self.n_pad
    }

    /// Row of text token `idx`.
    pub fn token_row(&self, idx: usize) -> usize {
        match self.placement {
            PromptPlacement::Prepend => self.n_prompt + idx,
            _ => idx,
        }
    }

    pub fn text_rows(&self) -> std::ops::Range<usize> {
        let start = self.token_row(0);
        start..start + self.tokens.len()
    }

    pub fn grl_row(&self) -> Option<usize> {
        self.grl.then(|| self.total() - self.n_pad - 1)
    }

    pub fn prompt_rows(&self) -> Option<std::ops::Range<usize>> {
        if self.n_prompt == 0 {
            return None;
        }
        Some(match self.placement {
            PromptPlacement::Prepend => 0..self.n_prompt,
            PromptPlacement::Append => self.tokens.len()..self.tokens.len() + self.n_prompt,
            PromptPlacement::None => unreachable!("n_prompt forced to 0"),
        })
    }

    pub fn is_pad(&self, row: usize) -> bool {
        row >= self.total() - self.n_pad
    }

    pub fn validate(&self, cfg: &LmConfig) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Shape("sequence has no text tokens".into()));
        }
        if self.tokens.len() > cfg.max_seq {
            return Err(Error::Capacity { needed: self.tokens.len(), capacity: cfg.max_seq });
        }
        if self.total() > cfg.capacity() + self.n_pad {
            return Err(Error::Capacity { needed: self.total(), capacity: cfg.capacity() });
        }
        if self.placement != PromptPlacement::None && self.n_prompt == 0 {
            return Err(Error::Shape("prompt placement set but no prompt rows".into()));
        }
        for &t in &self.tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::Shape(format!(
                    "token id {t} out of vocab {}",
                    cfg.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Strict causal mask with pad keys removed.
    pub fn attention_mask(&self) -> Rc<Vec<bool>> {
        let p = self.total();
        let mut mask = vec![false; p * p];
        for r in 0..p {
            for c in 0..=r {
                mask[r * p + c] = !self.is_pad(c);
            }
        }
        Rc::new(mask)
    }
}

// ── forward pass ─────────────────────────────────────────────────────

/// Logged attention for one head: the softmax rows, the per-position
/// value vectors, and the mixed context they produced.
#[derive(Debug, Clone, Copy)]
pub struct HeadTrace {
    pub probs: TensorId,
    pub values: TensorId,
    pub context: TensorId,
}

/// Everything a forward pass exposes: per-layer hidden-state matrices
/// (entry 0 is the embedding output, the last entry is the post-final-norm
/// representation), attention traces, and logits.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layout: SeqLayout,
    pub layer_inputs: Vec<TensorId>,
    pub attention: Vec<Vec<HeadTrace>>,
    pub logits: TensorId,
}

/// Per-layer LoRA adapters handed into the forward pass; `None` runs the
/// plain backbone.
pub type LoraLayers<'a> = Option<&'a [LoraLayerBinding]>;

pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &LmConfig,
    bound: &LmBinding,
    layout: &SeqLayout,
    prompt: Option<TensorId>,
    lora: LoraLayers<'_>,
) -> Result<ForwardTrace> {
    layout.validate(cfg)?;
    match (layout.n_prompt, prompt) {
        (0, None) => {}
        (n, Some(p)) => {
            let shape = tape.shape(p);
            if shape != [n, cfg.d_model] {
                return Err(Error::Shape(format!(
                    "prompt shape {shape:?}, layout wants [{n}, {}]",
                    cfg.d_model
                )));
            }
        }
        (n, None) => {
            return Err(Error::Shape(format!("layout wants {n} prompt rows, none given")));
        }
    }
    if let Some(l) = lora {
        if l.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "{} LoRA layers for {} transformer layers",
                l.len(),
                cfg.n_layers
            )));
        }
    }

    let total = layout.total();
    // Embedding rows in sequence order; the prompt matrix drops in as-is.
    let tail_ids: Vec<usize> = {
        let mut ids = Vec::new();
        if layout.grl {
            ids.push(cfg.grl_id() as usize);
        }
        ids.extend(std::iter::repeat(cfg.pad_id() as usize).take(layout.n_pad));
        ids
    };
    let token_ids: Vec<usize> = layout.tokens.iter().map(|&t| t as usize).collect();
    let mut parts: Vec<TensorId> = Vec::new();
    match layout.placement {
        PromptPlacement::Prepend => {
            parts.push(prompt.unwrap());
            let mut ids = token_ids;
            ids.extend(&tail_ids);
            parts.push(tape.embed_gather(bound.tok_emb, Rc::new(ids))?);
        }
        PromptPlacement::Append => {
            parts.push(tape.embed_gather(bound.tok_emb, Rc::new(token_ids))?);
            parts.push(prompt.unwrap());
            if !tail_ids.is_empty() {
                parts.push(tape.embed_gather(bound.tok_emb, Rc::new(tail_ids))?);
            }
        }
        PromptPlacement::None => {
            let mut ids = token_ids;
            ids.extend(&tail_ids);
            parts.push(tape.embed_gather(bound.tok_emb, Rc::new(ids))?);
        }
    }
    let embedded = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let positions = tape.embed_gather(bound.pos_emb, Rc::new((0..total).collect()))?;
    let mut x = tape.add(embedded, positions)?;

    let mask = layout.attention_mask();
    let d_head = cfg.d_head();
    let attn_scale = S::c(1.0 / (d_head as f64).sqrt());

    let mut layer_inputs = vec![x];
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for (li, layer) in bound.layers.iter().enumerate() {
        let adapters = lora.map(|l| &l[li]);
        let project = |tape: &mut Tape<S>, x: TensorId, w: TensorId, which: usize| {
            match adapters {
                Some(a) => crate::peft::lora_apply(tape, w, a.target(which), x),
                None => tape.matmul(x, w),
            }
        };

        let normed = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
        let q = project(tape, normed, layer.wq, 0)?;
        let k = project(tape, normed, layer.wk, 1)?;
        let v = project(tape, normed, layer.wv, 2)?;

        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut traces = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * d_head, d_head)?;
            let kh = tape.slice_cols(k, h * d_head, d_head)?;
            let vh = tape.slice_cols(v, h * d_head, d_head)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scaled = tape.scale(scores, attn_scale);
            let probs = tape.masked_softmax(scaled, mask.clone())?;
            let ctx = tape.matmul(probs, vh)?;
            heads.push(ctx);
            traces.push(HeadTrace { probs, values: vh, context: ctx });
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn_out = project(tape, ctx, layer.wo, 3)?;
        x = tape.add(x, attn_out)?;

        let normed2 = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
        let ff = tape.matmul(normed2, layer.w1)?;
        let act = tape.gelu(ff);
        let ff2 = tape.matmul(act, layer.w2)?;
        x = tape.add(x, ff2)?;

        layer_inputs.push(x);
        attention.push(traces);
    }

    // Entries 0..=L are the block-boundary residual streams; the final
    // entry is the post-norm representation the head and [GRL] read.
    let representation = tape.layer_norm(x, bound.final_gain, bound.final_bias)?;
    layer_inputs.push(representation);
    let logits = tape.matmul(representation, bound.lm_head)?;

    Ok(ForwardTrace { layout: layout.clone(), layer_inputs, attention, logits })
}

/// Next-token loss: text position j (j < k) is scored against token j+1;
/// the prompt, [GRL], and pads carry no target. With
/// `predict_first_from_prompt`, the prompt row adjacent to the text also
/// predicts token 0.
pub fn clm_loss<S: Scalar>(
    tape: &mut Tape<S>,
    trace: &ForwardTrace,
    predict_first_from_prompt: bool,
) -> Result<TensorId> {
    let layout = &trace.layout;
    let mut targets: Vec<Option<usize>> = vec![None; layout.total()];
    for idx in 0..layout.tokens.len().saturating_sub(1) {
        targets[layout.token_row(idx)] = Some(layout.tokens[idx + 1] as usize);
    }
    if predict_first_from_prompt
        && layout.placement == PromptPlacement::Prepend
        && layout.n_prompt > 0
    {
        targets[layout.n_prompt - 1] = Some(layout.tokens[0] as usize);
    }
    tape.cross_entropy(trace.logits, Rc::new(targets))
}

/// The node representation: final hidden state at the [GRL] position.
pub fn grl_embedding<S: Scalar>(tape: &mut Tape<S>, trace: &ForwardTrace) -> Result<TensorId> {
    let row = trace
        .layout
        .grl_row()
        .ok_or_else(|| Error::Shape("sequence has no [GRL] token".into()))?;
    let picked = tape.slice_rows(*trace.layer_inputs.last().unwrap(), row, 1)?;
    let d = tape.shape(picked)[1];
    tape.reshape(picked, &[d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::Binder;
    use crate::rng::{derive, standard_normal, Stream};
    use crate::tensor::Tape;

    fn tiny_cfg() -> LmConfig {
        LmConfig {
            vocab_size: 12,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq: 16,
            pos_encoding: PositionEncoding::LearnedAbsolute,
        }
    }

    fn randn(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = derive(seed, Stream::GradCheck, 23);
        (0..n).map(|_| standard_normal(&mut rng)).collect()
    }

    fn run_forward(
        params: &LmParams<f64>,
        layout: &SeqLayout,
        prompt: Option<Vec<f64>>,
    ) -> (Tape<f64>, ForwardTrace) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder, false).unwrap();
        let prompt_id = prompt.map(|z| {
            let rows = z.len() / params.cfg.d_model;
            tape.leaf(&[rows, params.cfg.d_model], z, false).unwrap()
        });
        let trace = forward(&mut tape, &params.cfg, &bound, layout, prompt_id, None).unwrap();
        (tape, trace)
    }

    #[test]
    fn perturbing_a_later_token_leaves_earlier_logits_bit_identical() {
        let cfg = tiny_cfg();
        let params = LmParams::<f64>::init(&cfg, 0).unwrap();
        let base = vec![1u16, 4, 2, 7, 3];
        let mut changed = base.clone();
        changed[3] = 9; // position t+1 = 3

        let (tape_a, trace_a) =
            run_forward(&params, &SeqLayout::new(base, PromptPlacement::None, 0, false), None);
        let (tape_b, trace_b) =
            run_forward(&params, &SeqLayout::new(changed, PromptPlacement::None, 0, false), None);
        let la = tape_a.values(trace_a.logits);
        let lb = tape_b.values(trace_b.logits);
        let v = cfg.vocab_size;
        for pos in 0..3 {
            for c in 0..v {
                assert_eq!(
                    la[pos * v + c].to_bits(),
                    lb[pos * v + c].to_bits(),
                    "logit at position {pos} changed"
                );
            }
        }
        assert_ne!(la[3 * v..4 * v], lb[3 * v..4 * v]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny_cfg();
        let params = LmParams::<f64>::init(&cfg, 1).unwrap();
        let layout = SeqLayout::new(vec![1, 2, 3, 4, 5, 6], PromptPlacement::None, 0, true);
        let (tape, trace) = run_forward(&params, &layout, None);
        for layer in &trace.attention {
            for head in layer {
                let p = tape.values(head.probs);
                let total = layout.total();
                for r in 0..total {
                    let sum: f64 = p[r * total..(r + 1) * total].iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        // Direct oracle on the loss op: byte vocab of 256.
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(&[3, 256], vec![0.25; 3 * 256]).unwrap();
        let targets = std::rc::Rc::new(vec![Some(5), Some(200), None]);
        let loss = tape.cross_entropy(logits, targets).unwrap();
        let expected = (256.0f64).ln();
        assert!((tape.values(loss)[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn certain_predictions_give_zero_loss() {
        let mut tape = Tape::<f64>::new();
        let mut values = vec![-2000.0; 2 * 8];
        values[0 * 8 + 3] = 2000.0;
        values[1 * 8 + 6] = 2000.0;
        let logits = tape.constant(&[2, 8], values).unwrap();
        let loss = tape.cross_entropy(logits, std::rc::Rc::new(vec![Some(3), Some(6)])).unwrap();
        assert_eq!(tape.values(loss)[0], 0.0);
    }

    #[test]
    fn clm_loss_matches_per_position_softmax_oracle() {
        let cfg = tiny_cfg();
        let params = LmParams::<f64>::init(&cfg, 2).unwrap();
        let tokens = vec![3u16, 8, 1];
        let layout = SeqLayout::new(tokens.clone(), PromptPlacement::None, 0, false);
        let (mut tape, trace) = run_forward(&params, &layout, None);
        let loss = clm_loss(&mut tape, &trace, false).unwrap();

        // Independent route: plain softmax at each predicting position.
        let logits = tape.values(trace.logits);
        let v = cfg.vocab_size;
        let mut expected = 0.0;
        for pos in 0..2 {
            let row = &logits[pos * v..(pos + 1) * v];
            let denom: f64 = row.iter().map(|x| x.exp()).sum();
            let p = row[tokens[pos + 1] as usize].exp() / denom;
            expected += -p.ln();
        }
        expected /= 2.0;
        assert!((tape.values(loss)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn single_token_sequence_has_no_loss_targets() {
        let cfg = tiny_cfg();
        let params = LmParams::<f64>::init(&cfg, 3).unwrap();
        let layout = SeqLayout::new(vec![5], PromptPlacement::None, 0, false);
        let (mut tape, trace) = run_forward(&params, &layout, None);
        assert!(matches!(clm_loss(&mut tape, &trace, false), Err(crate::error::Error::EmptyLoss)));
    }

    #[test]
    fn grl_embedding_is_the_final_row_and_padding_is_inert() {
        let cfg = tiny_cfg();
        let params = LmParams::<f64>::init(&cfg, 4).unwrap();
        let tokens = vec![2u16, 9, 4];
        let layout = SeqLayout::new(tokens.clone(), PromptPlacement::None, 0, true);
        let (mut tape, trace) = run_forward(&params, &layout, None);
        let v = grl_embedding(&mut tape, &trace).unwrap();
        let d = cfg.d_model;
        let last = tape.values(*trace.layer_inputs.last().unwrap())
            [3 * d..4 * d]
            .to_vec();
        assert_eq!(tape.values(v), &last[..]);

        // Masked pads after [GRL] change nothing.
        let mut padded = SeqLayout::new(tokens, PromptPlacement::None, 0, true);
        padded.n_pad = 3;
        let (mut tape_p, trace_p) = run_forward(&params, &padded, None);
        let vp = grl_embedding(&mut tape_p, &trace_p).unwrap();
        let a: Vec<u64> = tape.values(v).iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = tape_p.values(vp).iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);

        // No [GRL] -> rejected.
        let bare = SeqLayout::new(vec![1, 2], PromptPlacement::None, 0, false);
        let (mut tape_b, trace_b) = run_forward(&params, &bare, None);
        assert!(grl_embedding(&mut tape_b, &trace_b).is_err());
    }

    #[test]
    fn prepending_a_token_embedding_equals_prepending_the_token() {
        let cfg = tiny_cfg();
        let params = LmParams::<f64>::init(&cfg, 5).unwrap();
        let w = 7u16;
        let tokens = vec![3u16, 1, 8];

        let z = params.tok_emb.row(w as usize).to_vec();
        let layout = SeqLayout::new(tokens.clone(), PromptPlacement::Prepend, 1, false);
        let (tape_a, trace_a) = run_forward(&params, &layout, Some(z));

        let mut with_token = vec![w];
        with_token.extend(&tokens);
        let layout_b = SeqLayout::new(with_token, PromptPlacement::None, 0, false);
        let (tape_b, trace_b) = run_forward(&params, &layout_b, None);

        let a = tape_a.values(trace_a.logits);
        let b = tape_b.values(trace_b.logits);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn oversized_sequences_are_rejected() {
        let cfg = tiny_cfg();
        let params = LmParams::<f64>::init(&cfg, 6).unwrap();
        let layout = SeqLayout::new(vec![1; cfg.max_seq + 1], PromptPlacement::None, 0, false);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder, false).unwrap();
        assert!(matches!(
            forward(&mut tape, &cfg, &bound, &layout, None, None),
            Err(crate::error::Error::Capacity { .. })
        ));
    }

    #[test]
    fn theorem_oracle_holds_on_five_seeds() {
        let cfg = tiny_cfg();
        for seed in 0..5 {
            let params = LmParams::<f64>::init(&cfg, seed).unwrap();
            let tokens = vec![1u16, 5, 9, 2];
            let z = randn(seed + 100, cfg.d_model);
            let report = theorem_check(&params, &tokens, &z).unwrap();
            assert!(report.append_invariant, "seed {seed}: append changed text states");
            assert!(report.prepend_changes, "seed {seed}: prepend left text states alone");
            assert!(report.prepend_grad_nonzero, "seed {seed}: prompt got no gradient");
            assert!(
                report.append_is_convex_mix,
                "seed {seed}: reconstruction err {}",
                report.max_reconstruction_err
            );
        }
    }

    #[test]
    fn theorem_oracle_single_layer_single_head_reconstruction() {
        let cfg = LmConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 1,
            n_heads: 1,
            max_seq: 8,
            pos_encoding: PositionEncoding::LearnedAbsolute,
        };
        let params = LmParams::<f64>::init(&cfg, 11).unwrap();
        let report = theorem_check(&params, &[4, 2, 7], &randn(12, 8)).unwrap();
        assert!(report.append_is_convex_mix);
        assert!(report.max_reconstruction_err <= 1e-10);
    }

    #[test]
    fn clm_gradcheck_over_all_model_parameters() {
        use crate::gnn::GnnConfig;
        use crate::model::{GpeftModel, PeftSpec, PromptMode};
        use crate::peft::LoraConfig;

        let cfg = LmConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq: 8,
            pos_encoding: PositionEncoding::LearnedAbsolute,
        };
        let gnn_cfg =
            GnnConfig { d_gnn: 4, k_layers: 1, n_rel: 1, d_feat: 4, d_model: 8 };
        let mut model = GpeftModel::<f64>::init(
            &cfg,
            &gnn_cfg,
            &PeftSpec::Lora(LoraConfig { rank: 2, alpha: 2.0 }),
            3,
        )
        .unwrap();
        let _ = PromptMode::None;
        crate::model::randomize_params(&mut model, 19, 0.4);
        let report = crate::train::grad_check_model(
            &mut model,
            (true, false, false),
            |bound| {
                let layout = SeqLayout::new(vec![1, 7, 3, 2], PromptPlacement::None, 0, false);
                let trace = forward(bound.tape, &cfg, &bound.lm, &layout, None, None)?;
                clm_loss(bound.tape, &trace, false)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err());
    }

}
