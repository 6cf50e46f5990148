//! Two-phase optimization: prompted next-token pre-training of the GNN
//! against the frozen LM, then contrastive fine-tuning of GNN + adapters,
//! with per-epoch validation ranking and best-checkpoint selection.

mod optim;

pub use optim::{lr_at, AdamW};

use crate::error::{Error, Result};
use crate::eval::{self, RankReport};
use crate::gnn::GnnConfig;
use crate::graph::{Adjacency, Edge, EdgeSplit, NegativeSampler, TextRichGraph};
use crate::lm::{clm_loss, LmConfig};
use crate::model::{
    GpeftModel, NodeContext, Partition, PeftSpec, Phase, PromptMode, VisitParams,
};
use crate::rng::{derive, step_seed, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};
use rand::seq::SliceRandom;
use std::collections::HashMap;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Applied to both phases.
    pub epochs: usize,
    pub pretrain_batch: usize,
    pub finetune_batch: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub warmup_epochs: usize,
    pub max_grad_norm: f64,
    /// Contrastive margin τ.
    pub margin: f64,
    pub fanouts: Vec<usize>,
    pub prompt_mode: PromptMode,
    pub skip_pretrain: bool,
    /// Keep one negative per positive across epochs instead of redrawing.
    pub fixed_negatives: bool,
    /// Let the prompt position predict the first token.
    pub predict_first_from_prompt: bool,
    /// Append [GRL] already during pre-training.
    pub grl_in_pretrain: bool,
    pub val_max_edges: usize,
    pub val_n_neg: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            pretrain_batch: 8,
            finetune_batch: 4,
            pretrain_lr: 1e-3,
            finetune_lr: 1e-4,
            warmup_epochs: 1,
            max_grad_norm: 1.0,
            margin: 0.5,
            fanouts: vec![5, 5],
            prompt_mode: PromptMode::Prepend,
            skip_pretrain: false,
            fixed_negatives: false,
            predict_first_from_prompt: false,
            grl_in_pretrain: false,
            val_max_edges: 100,
            val_n_neg: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin < 2.0) {
            return Err(Error::Config(format!("margin {} outside (0, 2)", self.margin)));
        }
        if self.pretrain_lr <= 0.0 || self.finetune_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.pretrain_batch == 0 || self.finetune_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.fanouts.is_empty() {
            return Err(Error::Config("fanouts must not be empty".into()));
        }
        Ok(())
    }
}

/// d² + max(τ − d', 0)² over cosine distances of the positive and
/// negative pairs. Node ids ride along for the zero-norm diagnostic.
pub fn contrastive_loss<S: Scalar>(
    tape: &mut Tape<S>,
    positive_anchor: (usize, TensorId),
    positive_other: (usize, TensorId),
    negative: (usize, TensorId),
    margin: f64,
) -> Result<TensorId> {
    for (node, v) in [positive_anchor, positive_other, negative] {
        let norm: f64 = tape.values(v).iter().map(|x| x.f64() * x.f64()).sum();
        if norm == 0.0 {
            return Err(Error::ZeroNorm(node));
        }
    }
    let d_pos = cosine_distance(tape, positive_anchor.1, positive_other.1)?;
    let d_neg = cosine_distance(tape, positive_anchor.1, negative.1)?;
    let pos_sq = tape.mul(d_pos, d_pos)?;
    let neg_flip = tape.scale(d_neg, S::c(-1.0));
    let hinge_arg = tape.add_const(neg_flip, S::c(margin));
    let hinge = tape.relu(hinge_arg);
    let hinge_sq = tape.mul(hinge, hinge)?;
    tape.add(pos_sq, hinge_sq)
}

/// 1 − cos(a, b) as a scalar tape node.
pub fn cosine_distance<S: Scalar>(
    tape: &mut Tape<S>,
    a: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let ab = tape.dot(a, b)?;
    let aa = tape.dot(a, a)?;
    let bb = tape.dot(b, b)?;
    let na = tape.sqrt(aa);
    let nb = tape.sqrt(bb);
    let norms = tape.mul(na, nb)?;
    let cos = tape.div(ab, norms)?;
    let neg = tape.scale(cos, S::c(-1.0));
    Ok(tape.add_const(neg, S::one()))
}

/// Global L2 norm over the gradients of every trainable bound parameter.
pub fn global_grad_norm<S: Scalar>(
    tape: &Tape<S>,
    table: &[(String, Partition, TensorId)],
) -> f64 {
    let mut sq = 0.0f64;
    for (_, _, id) in table {
        if let Some(g) = tape.grad(*id) {
            for &x in g {
                let v = x.f64();
                sq += v * v;
            }
        }
    }
    sq.sqrt()
}

fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

fn apply_updates<S: Scalar>(
    model: &mut GpeftModel<S>,
    tape: &Tape<S>,
    table: &[(String, Partition, TensorId)],
    opt: &mut AdamW<S>,
    lr: f64,
    max_grad_norm: f64,
) {
    let scale = clip_scale(global_grad_norm(tape, table), max_grad_norm);
    let ids: HashMap<&str, TensorId> = table
        .iter()
        .filter(|(_, _, id)| tape.grad(*id).is_some())
        .map(|(name, _, id)| (name.as_str(), *id))
        .collect();
    opt.begin_step();
    model.visit_values_mut(&mut |name, _, values| {
        if let Some(id) = ids.get(name) {
            let grad = tape.grad(*id).expect("trainable grads allocated");
            opt.update(name, values, grad, lr, scale);
        }
    });
}

/// Central-difference check of d(loss)/d(θ) for every parameter the
/// trainable flags select, where the loss is an arbitrary model-level
/// construction (a clm batch loss, a contrastive step loss, ...). The
/// loss builder must be deterministic: it is re-run on a fresh tape for
/// every probe.
pub fn grad_check_model<S: Scalar, F>(
    model: &mut GpeftModel<S>,
    trainable: (bool, bool, bool),
    mut loss_fn: F,
    eps: f64,
) -> Result<crate::tensor::GradReport>
where
    F: FnMut(&mut crate::model::BoundModel<'_, S>) -> Result<crate::tensor::TensorId>,
{
    use crate::tensor::{relative_error, GradEntry, GradReport};

    let (lm_t, gnn_t, peft_t) = trainable;
    let mut tape = Tape::new();
    let table = {
        let mut bound = model.bind_with(&mut tape, lm_t, gnn_t, peft_t)?;
        let loss = loss_fn(&mut bound)?;
        bound.tape.backward(loss)?;
        bound.table
    };
    let analytic: Vec<(String, Vec<f64>)> = table
        .iter()
        .filter(|(_, _, id)| tape.grad(*id).is_some())
        .map(|(name, _, id)| {
            (name.clone(), tape.grad(*id).unwrap().iter().map(|g| g.f64()).collect())
        })
        .collect();

    let mut set = |model: &mut GpeftModel<S>, name: &str, idx: usize, value: S| {
        model.visit_values_mut(&mut |n, _, values| {
            if n == name {
                values[idx] = value;
            }
        });
    };
    let mut eval = |model: &mut GpeftModel<S>, loss_fn: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let mut bound = model.bind_with(&mut tape, false, false, false)?;
        let loss = loss_fn(&mut bound)?;
        Ok(bound.tape.values(loss)[0].f64())
    };

    let mut entries = Vec::with_capacity(analytic.len());
    for (name, grads) in &analytic {
        let mut values = Vec::new();
        model.visit(&mut |n, _, t| {
            if n == name {
                values = t.values().iter().map(|v| v.f64()).collect();
            }
        });
        let mut max_rel_err = 0.0f64;
        let mut worst_index = 0usize;
        let mut non_finite = false;
        for (idx, (&orig, &g)) in values.iter().zip(grads).enumerate() {
            set(model, name, idx, S::c(orig + eps));
            let plus = eval(model, &mut loss_fn)?;
            set(model, name, idx, S::c(orig - eps));
            let minus = eval(model, &mut loss_fn)?;
            set(model, name, idx, S::c(orig));
            if !plus.is_finite() || !minus.is_finite() {
                non_finite = true;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(g, numeric);
            if err > max_rel_err {
                max_rel_err = err;
                worst_index = idx;
            }
        }
        entries.push(GradEntry { name: name.clone(), max_rel_err, worst_index, non_finite });
    }
    Ok(GradReport { entries })
}

const PHASE_PRETRAIN: u64 = 1;
const PHASE_FINETUNE: u64 = 2;
const PHASE_VAL: u64 = 3;

/// One prompted next-token step over a node batch; updates Θ_g only.
pub fn pretrain_step<S: Scalar>(
    model: &mut GpeftModel<S>,
    ctx: &NodeContext<'_>,
    cfg: &TrainConfig,
    nodes: &[usize],
    opt: &mut AdamW<S>,
    lr: f64,
    epoch: usize,
    step: usize,
) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Config("empty pre-training batch".into()));
    }
    if !matches!(cfg.prompt_mode, PromptMode::Prepend | PromptMode::Prefix) {
        return Err(Error::Config(format!(
            "pre-training needs a prompt the text can attend to; mode {} has none",
            cfg.prompt_mode.as_str()
        )));
    }
    let lm_cfg = model.lm.cfg.clone();
    let gnn_cfg = model.gnn.cfg.clone();
    let mut tape = Tape::new();
    let (loss_value, table) = {
        let mut bound = model.bind(&mut tape, Phase::Pretrain)?;
        let mut total: Option<TensorId> = None;
        for (item, &node) in nodes.iter().enumerate() {
            let seed = step_seed(cfg.seed, PHASE_PRETRAIN, epoch as u64, step as u64, item as u64);
            let trace = bound.node_forward(
                &lm_cfg,
                &gnn_cfg,
                ctx,
                node,
                cfg.prompt_mode,
                cfg.grl_in_pretrain,
                seed,
            )?;
            let loss = clm_loss(bound.tape, &trace, cfg.predict_first_from_prompt)?;
            total = Some(match total {
                Some(t) => bound.tape.add(t, loss)?,
                None => loss,
            });
        }
        let mean = bound.tape.scale(total.unwrap(), S::c(1.0 / nodes.len() as f64));
        bound.tape.backward(mean)?;
        (bound.tape.values(mean)[0].f64(), bound.table)
    };
    apply_updates(model, &tape, &table, opt, lr, cfg.max_grad_norm);
    Ok(loss_value)
}

/// One contrastive step over an edge batch; updates Θ_g and Θ_peft.
pub fn finetune_step<S: Scalar>(
    model: &mut GpeftModel<S>,
    ctx: &NodeContext<'_>,
    sampler: &NegativeSampler,
    cfg: &TrainConfig,
    edges: &[Edge],
    opt: &mut AdamW<S>,
    lr: f64,
    epoch: usize,
    step: usize,
) -> Result<f64> {
    if edges.is_empty() {
        return Err(Error::Config("empty fine-tuning batch".into()));
    }
    let lm_cfg = model.lm.cfg.clone();
    let gnn_cfg = model.gnn.cfg.clone();
    let mut tape = Tape::new();
    let (loss_value, table) = {
        let mut bound = model.bind(&mut tape, Phase::Finetune)?;
        let mut total: Option<TensorId> = None;
        for (item, &(i, j)) in edges.iter().enumerate() {
            let neg_seed = if cfg.fixed_negatives {
                cfg.seed
            } else {
                step_seed(cfg.seed, PHASE_FINETUNE, epoch as u64, step as u64, item as u64)
            };
            let neg = sampler.draw(i, j, neg_seed)?;
            let embed = |role: u64, node: usize, bound: &mut crate::model::BoundModel<'_, S>| {
                let seed = step_seed(
                    cfg.seed,
                    PHASE_FINETUNE,
                    epoch as u64,
                    step as u64,
                    (item as u64) * 4 + role + 1,
                );
                bound.node_embedding(&lm_cfg, &gnn_cfg, ctx, node, cfg.prompt_mode, seed)
            };
            let v_i = embed(0, i, &mut bound)?;
            let v_j = embed(1, j, &mut bound)?;
            let v_neg = embed(2, neg, &mut bound)?;
            let loss =
                contrastive_loss(bound.tape, (i, v_i), (j, v_j), (neg, v_neg), cfg.margin)?;
            total = Some(match total {
                Some(t) => bound.tape.add(t, loss)?,
                None => loss,
            });
        }
        let mean = bound.tape.scale(total.unwrap(), S::c(1.0 / edges.len() as f64));
        bound.tape.backward(mean)?;
        (bound.tape.values(mean)[0].f64(), bound.table)
    };
    apply_updates(model, &tape, &table, opt, lr, cfg.max_grad_norm);
    Ok(loss_value)
}

/// One metrics-log line; wall time is informational and excluded from
/// determinism comparisons.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub phase: &'static str,
    pub epoch: usize,
    pub loss: f64,
    pub val_hit1: f64,
    pub val_mrr: f64,
    pub wall_s: f64,
}

impl EpochRecord {
    pub fn to_kv(&self) -> String {
        format!(
            "phase={} epoch={} loss={} val_hit1={} val_mrr={} wall_s={:.3}",
            self.phase, self.epoch, self.loss, self.val_hit1, self.val_mrr, self.wall_s
        )
    }

    /// The deterministic fields only.
    pub fn to_kv_stable(&self) -> String {
        format!(
            "phase={} epoch={} loss={} val_hit1={} val_mrr={}",
            self.phase, self.epoch, self.loss, self.val_hit1, self.val_mrr
        )
    }
}

pub struct RunSetup<'a> {
    pub graph: &'a TextRichGraph,
    pub split: &'a EdgeSplit,
    pub lm_cfg: LmConfig,
    pub gnn_cfg: GnnConfig,
    pub peft: PeftSpec,
    pub train: TrainConfig,
}

pub struct RunOutput<S: Scalar> {
    pub model: GpeftModel<S>,
    pub log: Vec<EpochRecord>,
    pub best_val_mrr: f64,
    pub best_epoch: Option<usize>,
    /// Final test-set ranking with the selected checkpoint.
    pub report: RankReport,
    pub inference_forwards: usize,
}

fn validate_setup(setup: &RunSetup<'_>) -> Result<()> {
    setup.train.validate()?;
    let g = setup.graph;
    if setup.gnn_cfg.d_feat != g.d_feat {
        return Err(Error::Config(format!(
            "gnn d_feat {} != graph d_feat {}",
            setup.gnn_cfg.d_feat, g.d_feat
        )));
    }
    if setup.gnn_cfg.n_rel != g.edge_types.len() {
        return Err(Error::Config(format!(
            "gnn n_rel {} != graph edge types {}",
            setup.gnn_cfg.n_rel,
            g.edge_types.len()
        )));
    }
    if setup.train.fanouts.len() != setup.gnn_cfg.k_layers {
        return Err(Error::Config(format!(
            "{} fanouts for a {}-layer GNN",
            setup.train.fanouts.len(),
            setup.gnn_cfg.k_layers
        )));
    }
    let longest = g.texts.iter().map(Vec::len).max().unwrap_or(0);
    if longest > setup.lm_cfg.max_seq {
        return Err(Error::Capacity { needed: longest, capacity: setup.lm_cfg.max_seq });
    }
    Ok(())
}

/// The full optimization loop: pre-training epochs, fine-tuning epochs
/// with per-epoch validation and best-MRR selection, then test-set
/// evaluation with the selected parameters.
///
/// Pre-training requires a prompt the text can attend to, so it runs only
/// in prepend/prefix mode; append/none configurations skip straight to
/// fine-tuning (an appended prompt receives no next-token gradient).
pub fn run<S: Scalar>(setup: &RunSetup<'_>) -> Result<RunOutput<S>> {
    validate_setup(setup)?;
    let cfg = &setup.train;
    let mut model: GpeftModel<S> =
        GpeftModel::init(&setup.lm_cfg, &setup.gnn_cfg, &setup.peft, cfg.seed)?;
    model.check_mode(cfg.prompt_mode)?;

    let adjacency = Adjacency::observed(setup.graph, setup.split);
    let sampler = NegativeSampler::new(setup.graph, setup.split);
    let ctx = NodeContext { graph: setup.graph, adjacency: &adjacency, fanouts: &cfg.fanouts };
    let mut log = Vec::new();

    // Phase 1.
    let pretrain_runs = !cfg.skip_pretrain
        && matches!(cfg.prompt_mode, PromptMode::Prepend | PromptMode::Prefix);
    if pretrain_runs {
        let mut opt = AdamW::new();
        let nodes: Vec<usize> = (0..setup.graph.n_nodes).collect();
        let steps_per_epoch = nodes.len().div_ceil(cfg.pretrain_batch);
        let warmup = cfg.warmup_epochs * steps_per_epoch;
        let mut global_step = 0usize;
        for epoch in 0..cfg.epochs {
            let start = Instant::now();
            let mut order = nodes.clone();
            order.shuffle(&mut derive(cfg.seed, Stream::EpochShuffle, PHASE_PRETRAIN << 32 | epoch as u64));
            let mut losses = Vec::new();
            for (step, batch) in order.chunks(cfg.pretrain_batch).enumerate() {
                let lr = lr_at(cfg.pretrain_lr, warmup, global_step);
                losses.push(pretrain_step(&mut model, &ctx, cfg, batch, &mut opt, lr, epoch, step)?);
                global_step += 1;
            }
            let loss = losses.iter().sum::<f64>() / losses.len() as f64;
            let (val_hit1, val_mrr) = validate(&model, setup, &adjacency, &sampler, epoch)?;
            log.push(EpochRecord {
                phase: "pretrain",
                epoch,
                loss,
                val_hit1,
                val_mrr,
                wall_s: start.elapsed().as_secs_f64(),
            });
        }
    }

    // Phase 2.
    let mut opt = AdamW::new();
    let steps_per_epoch = setup.split.train.len().div_ceil(cfg.finetune_batch);
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut global_step = 0usize;
    let mut best: Option<(f64, usize, Vec<u8>)> = None;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order = setup.split.train.clone();
        order.shuffle(&mut derive(cfg.seed, Stream::EpochShuffle, PHASE_FINETUNE << 32 | epoch as u64));
        let mut losses = Vec::new();
        for (step, batch) in order.chunks(cfg.finetune_batch).enumerate() {
            let lr = lr_at(cfg.finetune_lr, warmup, global_step);
            losses.push(finetune_step(
                &mut model, &ctx, &sampler, cfg, batch, &mut opt, lr, epoch, step,
            )?);
            global_step += 1;
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let (val_hit1, val_mrr) = validate(&model, setup, &adjacency, &sampler, epoch)?;
        if best.as_ref().is_none_or(|(m, _, _)| val_mrr > *m) {
            best = Some((val_mrr, epoch, snapshot_adapters(&model)));
        }
        log.push(EpochRecord {
            phase: "finetune",
            epoch,
            loss,
            val_hit1,
            val_mrr,
            wall_s: start.elapsed().as_secs_f64(),
        });
    }

    // Selection + final evaluation (test edges are read only here).
    let (best_val_mrr, best_epoch) = match best {
        Some((mrr, epoch, bytes)) => {
            restore_adapters(&mut model, &bytes);
            (mrr, Some(epoch))
        }
        None => (f64::NAN, None),
    };
    let nodes: Vec<usize> = (0..setup.graph.n_nodes).collect();
    let (emb, forwards) =
        eval::infer_embeddings(&model, setup.graph, &adjacency, &nodes, &cfg.fanouts, cfg.prompt_mode, cfg.seed)?;
    let report = eval::rank_metrics(setup.graph, setup.split, &emb, cfg.val_n_neg, cfg.seed)?;

    Ok(RunOutput { model, log, best_val_mrr, best_epoch, report, inference_forwards: forwards })
}

fn validate<S: Scalar>(
    model: &GpeftModel<S>,
    setup: &RunSetup<'_>,
    adjacency: &Adjacency,
    sampler: &NegativeSampler,
    epoch: usize,
) -> Result<(f64, f64)> {
    let cfg = &setup.train;
    if setup.split.val.is_empty() || cfg.val_max_edges == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    let nodes: Vec<usize> = (0..setup.graph.n_nodes).collect();
    let seed = step_seed(cfg.seed, PHASE_VAL, epoch as u64, 0, 0);
    let (emb, _) = eval::infer_embeddings(
        model,
        setup.graph,
        adjacency,
        &nodes,
        &cfg.fanouts,
        cfg.prompt_mode,
        seed,
    )?;
    let n = cfg.val_max_edges.min(setup.split.val.len());
    let report = eval::rank_edges(&setup.split.val[..n], sampler, &emb, cfg.val_n_neg, seed)?;
    Ok((report.hit1, report.mrr))
}

fn snapshot_adapters<S: Scalar>(model: &GpeftModel<S>) -> Vec<u8> {
    let mut bytes = Vec::new();
    model.visit(&mut |_, partition, t| {
        if partition != Partition::Pre {
            for &v in t.values() {
                v.write_le(&mut bytes);
            }
        }
    });
    bytes
}

fn restore_adapters<S: Scalar>(model: &mut GpeftModel<S>, bytes: &[u8]) {
    let width = S::PRECISION.bytes();
    let mut offset = 0usize;
    model.visit_values_mut(&mut |_, partition, values| {
        if partition != Partition::Pre {
            for v in values.iter_mut() {
                *v = S::read_le(&bytes[offset..offset + width]);
                offset += width;
            }
        }
    });
    assert_eq!(offset, bytes.len(), "adapter snapshot size drifted");
}
