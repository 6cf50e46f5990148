//! Parameter-efficient adapters: LoRA on the four attention projections
//! and prefix tuning with the graph-modified prefix P' = P + Z.

use crate::error::{Error, Result};
use crate::model::params::{Binder, Mat, Partition, TensorRef, VisitParams};
use crate::rng::{derive, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

pub const LORA_TARGETS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    /// Update scale is alpha / rank; alpha defaults to rank (scale 1).
    pub alpha: f64,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// One adapted projection: effective weight W + (alpha/r) * A * B^T.
/// B starts at zero, so a fresh adapter is exactly the identity update.
#[derive(Debug, Clone)]
pub struct LoraTarget<S> {
    pub a: Mat<S>,
    pub b: Mat<S>,
}

#[derive(Debug, Clone)]
pub struct LoraLayerParams<S> {
    pub targets: [LoraTarget<S>; 4],
}

#[derive(Debug, Clone)]
pub struct LoraParams<S> {
    pub cfg: LoraConfig,
    pub d_model: usize,
    pub layers: Vec<LoraLayerParams<S>>,
}

impl<S: Scalar> LoraParams<S> {
    pub fn init(cfg: &LoraConfig, n_layers: usize, d_model: usize, seed: u64) -> Result<Self> {
        if cfg.rank == 0 || cfg.rank >= d_model {
            return Err(Error::Shape(format!(
                "LoRA rank {} must be in 1..{d_model}",
                cfg.rank
            )));
        }
        let mut rng = derive(seed, Stream::ParamInit, 1);
        let layers = (0..n_layers)
            .map(|_| {
                let mut target = || LoraTarget {
                    a: Mat::normal(d_model, cfg.rank, crate::lm::INIT_STD, &mut rng),
                    b: Mat::zeros(d_model, cfg.rank),
                };
                LoraLayerParams { targets: [target(), target(), target(), target()] }
            })
            .collect();
        Ok(LoraParams { cfg: cfg.clone(), d_model, layers })
    }

    pub fn bind(&self, binder: &mut Binder<'_, S>, trainable: bool) -> Result<Vec<LoraLayerBinding>> {
        let scale = self.cfg.scale();
        self.layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let mut bound = Vec::with_capacity(4);
                for (t, target) in layer.targets.iter().enumerate() {
                    let name = format!("peft.layer{i}.{}", LORA_TARGETS[t]);
                    bound.push(LoraTargetBinding {
                        a: binder.mat(&format!("{name}.a"), &target.a, Partition::Peft, trainable)?,
                        b: binder.mat(&format!("{name}.b"), &target.b, Partition::Peft, trainable)?,
                        scale,
                    });
                }
                Ok(LoraLayerBinding { targets: [bound[0], bound[1], bound[2], bound[3]] })
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.len());
        n
    }
}

impl<S: Scalar> VisitParams<S> for LoraParams<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, Partition, TensorRef<'_, S>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            for (t, target) in layer.targets.iter().enumerate() {
                let name = format!("peft.layer{i}.{}", LORA_TARGETS[t]);
                f(&format!("{name}.a"), Partition::Peft, TensorRef::Mat(&target.a));
                f(&format!("{name}.b"), Partition::Peft, TensorRef::Mat(&target.b));
            }
        }
    }

    fn visit_values_mut(&mut self, f: &mut dyn FnMut(&str, Partition, &mut Vec<S>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (t, target) in layer.targets.iter_mut().enumerate() {
                let name = format!("peft.layer{i}.{}", LORA_TARGETS[t]);
                f(&format!("{name}.a"), Partition::Peft, &mut target.a.data);
                f(&format!("{name}.b"), Partition::Peft, &mut target.b.data);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoraTargetBinding {
    pub a: TensorId,
    pub b: TensorId,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LoraLayerBinding {
    /// q, k, v, o in that order.
    pub targets: [LoraTargetBinding; 4],
}

impl LoraLayerBinding {
    pub fn target(&self, which: usize) -> LoraTargetBinding {
        self.targets[which]
    }
}

/// x·Ŵ computed on the factored path x·W + (alpha/r)·(x·A)·Bᵀ. The frozen
/// weight participates as a constant; gradients reach only A and B.
pub fn lora_apply<S: Scalar>(
    tape: &mut Tape<S>,
    w: TensorId,
    adapter: LoraTargetBinding,
    x: TensorId,
) -> Result<TensorId> {
    let base = tape.matmul(x, w)?;
    let xa = tape.matmul(x, adapter.a)?;
    let update = tape.matmul_bt(xa, adapter.b)?;
    let scaled = tape.scale(update, S::c(adapter.scale));
    tape.add(base, scaled)
}

/// The merged weight W + (alpha/r)·A·Bᵀ — the reference route the factored
/// path is checked against.
pub fn merged_weight<S: Scalar>(w: &Mat<S>, target: &LoraTarget<S>, scale: f64) -> Mat<S> {
    let d = w.rows;
    let r = target.a.cols;
    let s = S::c(scale);
    let mut out = w.clone();
    for i in 0..d {
        for j in 0..d {
            let mut acc = S::zero();
            for t in 0..r {
                acc = acc + target.a.data[i * r + t] * target.b.data[j * r + t];
            }
            out.data[i * w.cols + j] = out.data[i * w.cols + j] + s * acc;
        }
    }
    out
}

// ── prefix tuning ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixConfig {
    pub n_prefix: usize,
}

/// Learned virtual rows injected at the input; starts at zero so the
/// initial P' = P + Z is exactly the graph prompt broadcast.
#[derive(Debug, Clone)]
pub struct PrefixParams<S> {
    pub p: Mat<S>,
}

impl<S: Scalar> PrefixParams<S> {
    pub fn init(cfg: &PrefixConfig, d_model: usize) -> Result<Self> {
        if cfg.n_prefix == 0 {
            return Err(Error::Shape("prefix needs at least one row".into()));
        }
        Ok(PrefixParams { p: Mat::zeros(cfg.n_prefix, d_model) })
    }

    pub fn bind(&self, binder: &mut Binder<'_, S>, trainable: bool) -> Result<TensorId> {
        binder.mat("peft.prefix", &self.p, Partition::Peft, trainable)
    }

    pub fn n_params(&self) -> usize {
        self.p.data.len()
    }
}

impl<S: Scalar> VisitParams<S> for PrefixParams<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, Partition, TensorRef<'_, S>)) {
        f("peft.prefix", Partition::Peft, TensorRef::Mat(&self.p));
    }

    fn visit_values_mut(&mut self, f: &mut dyn FnMut(&str, Partition, &mut Vec<S>)) {
        f("peft.prefix", Partition::Peft, &mut self.p.data);
    }
}

/// P' = P + Z with the graph prompt broadcast onto every prefix row.
/// Gradients flow to P directly and through Z into the GNN.
pub fn prefix_with_graph<S: Scalar>(
    tape: &mut Tape<S>,
    p: TensorId,
    z: TensorId,
) -> Result<TensorId> {
    let n_prefix = tape.shape(p)[0];
    let z_width = tape.values(z).len();
    if tape.shape(p)[1] != z_width {
        return Err(Error::Shape(format!(
            "prefix width {} vs graph prompt width {z_width}",
            tape.shape(p)[1]
        )));
    }
    let replicated = tape.concat_rows(&vec![z; n_prefix])?;
    tape.add(p, replicated)
}

// ── parameter counting ───────────────────────────────────────────────

/// Exact enumeration vs. the conventional L·4·r·d count (which misses the
/// factor of two for the A/B pair). Enumeration is authoritative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraCount {
    pub enumerated: usize,
    pub formula: usize,
}

pub fn count_lora_params(n_layers: usize, rank: usize, d_model: usize) -> LoraCount {
    LoraCount {
        enumerated: n_layers * 4 * 2 * d_model * rank,
        formula: n_layers * 4 * rank * d_model,
    }
}
