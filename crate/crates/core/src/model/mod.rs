//! Assembly of the prompted model: backbone LM, GNN prompt encoder, and
//! one PEFT flavor, with the Θ_pre / Θ_peft / Θ_g partition and the
//! per-phase trainable sets.

pub mod params;

pub use params::{Binder, Mat, Partition, TensorRef, Vect, VisitParams};

use crate::error::{Error, Result};
use crate::gnn::{self, GnnBinding, GnnConfig, GnnParams};
use crate::graph::{Adjacency, TextRichGraph};
use crate::lm::{
    forward, grl_embedding, ForwardTrace, LmBinding, LmConfig, LmParams, PromptPlacement,
    SeqLayout,
};
use crate::peft::{
    prefix_with_graph, LoraConfig, LoraLayerBinding, LoraParams, PrefixConfig, PrefixParams,
};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

/// How the graph prompt enters the sequence. `Prefix` routes it through
/// the prefix adapter (P' = P + Z); the other prompted modes pair with
/// LoRA adapters; `None` is the promptless PEFT ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    None,
    Prepend,
    Append,
    Prefix,
}

impl PromptMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PromptMode::None),
            "prepend" => Ok(PromptMode::Prepend),
            "append" => Ok(PromptMode::Append),
            "prefix" => Ok(PromptMode::Prefix),
            _ => Err(Error::Config(format!("unknown prompt mode {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::None => "none",
            PromptMode::Prepend => "prepend",
            PromptMode::Append => "append",
            PromptMode::Prefix => "prefix",
        }
    }

    pub fn uses_prompt(self) -> bool {
        self != PromptMode::None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeftSpec {
    Lora(LoraConfig),
    Prefix(PrefixConfig),
}

#[derive(Debug, Clone)]
pub enum PeftParams<S> {
    Lora(LoraParams<S>),
    Prefix(PrefixParams<S>),
}

impl<S: Scalar> PeftParams<S> {
    pub fn n_params(&self) -> usize {
        match self {
            PeftParams::Lora(p) => p.n_params(),
            PeftParams::Prefix(p) => p.n_params(),
        }
    }
}

impl<S: Scalar> VisitParams<S> for PeftParams<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, Partition, TensorRef<'_, S>)) {
        match self {
            PeftParams::Lora(p) => p.visit(f),
            PeftParams::Prefix(p) => p.visit(f),
        }
    }

    fn visit_values_mut(&mut self, f: &mut dyn FnMut(&str, Partition, &mut Vec<S>)) {
        match self {
            PeftParams::Lora(p) => p.visit_values_mut(f),
            PeftParams::Prefix(p) => p.visit_values_mut(f),
        }
    }
}

/// Which parameter sets train: phase 1 updates Θ_g only, phase 2 updates
/// Θ_g and Θ_peft. Θ_pre never trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
    Inference,
}

impl Phase {
    fn gnn_trainable(self) -> bool {
        matches!(self, Phase::Pretrain | Phase::Finetune)
    }

    fn peft_trainable(self) -> bool {
        matches!(self, Phase::Finetune)
    }
}

#[derive(Debug, Clone)]
pub struct GpeftModel<S> {
    pub lm: LmParams<S>,
    pub gnn: GnnParams<S>,
    pub peft: PeftParams<S>,
}

impl<S: Scalar> GpeftModel<S> {
    pub fn init(
        lm_cfg: &LmConfig,
        gnn_cfg: &GnnConfig,
        peft: &PeftSpec,
        seed: u64,
    ) -> Result<Self> {
        if gnn_cfg.d_model != lm_cfg.d_model {
            return Err(Error::Config(format!(
                "GNN projects into width {} but the LM is {}",
                gnn_cfg.d_model, lm_cfg.d_model
            )));
        }
        let peft = match peft {
            PeftSpec::Lora(cfg) => {
                PeftParams::Lora(LoraParams::init(cfg, lm_cfg.n_layers, lm_cfg.d_model, seed)?)
            }
            PeftSpec::Prefix(cfg) => PeftParams::Prefix(PrefixParams::init(cfg, lm_cfg.d_model)?),
        };
        Ok(GpeftModel {
            lm: LmParams::init(lm_cfg, seed)?,
            gnn: GnnParams::init(gnn_cfg, seed)?,
            peft,
        })
    }

    pub fn bind<'t>(&self, tape: &'t mut Tape<S>, phase: Phase) -> Result<BoundModel<'t, S>> {
        self.bind_with(tape, false, phase.gnn_trainable(), phase.peft_trainable())
    }

    /// Explicit trainability per partition; the phases are shorthands,
    /// the gradient-check oracles pick their own sets.
    pub fn bind_with<'t>(
        &self,
        tape: &'t mut Tape<S>,
        lm_trainable: bool,
        gnn_trainable: bool,
        peft_trainable: bool,
    ) -> Result<BoundModel<'t, S>> {
        let mut binder = Binder::new(tape);
        let lm = self.lm.bind(&mut binder, lm_trainable)?;
        let gnn = self.gnn.bind(&mut binder, gnn_trainable)?;
        let peft = match &self.peft {
            PeftParams::Lora(p) => PeftBinding::Lora(p.bind(&mut binder, peft_trainable)?),
            PeftParams::Prefix(p) => PeftBinding::Prefix(p.bind(&mut binder, peft_trainable)?),
        };
        let Binder { tape, table } = binder;
        Ok(BoundModel { tape, lm, gnn, peft, table })
    }

    /// Consistency between the prompt mode and the adapter flavor.
    pub fn check_mode(&self, mode: PromptMode) -> Result<()> {
        match (&self.peft, mode) {
            (PeftParams::Prefix(_), PromptMode::Prefix) => Ok(()),
            (PeftParams::Prefix(_), m) => Err(Error::Config(format!(
                "prefix adapters require prompt mode prefix, got {}",
                m.as_str()
            ))),
            (PeftParams::Lora(_), PromptMode::Prefix) => {
                Err(Error::Config("prompt mode prefix requires prefix adapters".into()))
            }
            (PeftParams::Lora(_), _) => Ok(()),
        }
    }
}

impl<S: Scalar> VisitParams<S> for GpeftModel<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, Partition, TensorRef<'_, S>)) {
        self.lm.visit(f);
        self.gnn.visit(f);
        self.peft.visit(f);
    }

    fn visit_values_mut(&mut self, f: &mut dyn FnMut(&str, Partition, &mut Vec<S>)) {
        self.lm.visit_values_mut(f);
        self.gnn.visit_values_mut(f);
        self.peft.visit_values_mut(f);
    }
}

/// Overwrite every parameter with N(0, std²) draws. Gradient checks use
/// this to put the network in a regime where activations are O(1) and
/// central differences are well conditioned; tiny init-scale gradients
/// drown in FD cancellation noise otherwise.
pub fn randomize_params<S: Scalar>(params: &mut dyn VisitParams<S>, seed: u64, std: f64) {
    let mut rng = crate::rng::derive(seed, crate::rng::Stream::GradCheck, 0);
    params.visit_values_mut(&mut |_, _, values| {
        for v in values.iter_mut() {
            *v = S::c(crate::rng::standard_normal(&mut rng) * std);
        }
    });
}

#[derive(Debug, Clone)]
pub enum PeftBinding {
    Lora(Vec<LoraLayerBinding>),
    Prefix(TensorId),
}

/// Everything bound onto one tape: typed ids for the forward pass plus
/// the (name, partition, id) table for gradient readback.
pub struct BoundModel<'t, S: Scalar> {
    pub tape: &'t mut Tape<S>,
    pub lm: LmBinding,
    pub gnn: GnnBinding,
    pub peft: PeftBinding,
    pub table: Vec<(String, Partition, TensorId)>,
}

/// Graph-side inputs a forward pass needs.
#[derive(Clone, Copy)]
pub struct NodeContext<'a> {
    pub graph: &'a TextRichGraph,
    pub adjacency: &'a Adjacency,
    pub fanouts: &'a [usize],
}

impl<'t, S: Scalar> BoundModel<'t, S> {
    /// Sample the node's neighborhood and encode it into a graph prompt.
    pub fn node_prompt(
        &mut self,
        gnn_cfg: &GnnConfig,
        ctx: &NodeContext<'_>,
        node: usize,
        seed: u64,
    ) -> Result<TensorId> {
        let sample = ctx.adjacency.sample_neighbors(node, ctx.fanouts, seed);
        let graph = ctx.graph;
        gnn::encode(self.tape, gnn_cfg, &self.gnn, &sample, &|n| graph.features[n].clone())
    }

    /// Full prompted forward for one node under the configured mode.
    pub fn node_forward(
        &mut self,
        lm_cfg: &LmConfig,
        gnn_cfg: &GnnConfig,
        ctx: &NodeContext<'_>,
        node: usize,
        mode: PromptMode,
        grl: bool,
        seed: u64,
    ) -> Result<ForwardTrace> {
        let tokens = ctx.graph.texts[node].clone();
        let lora = match &self.peft {
            PeftBinding::Lora(layers) => Some(layers.clone()),
            PeftBinding::Prefix(_) => None,
        };
        let (layout, prompt) = match mode {
            PromptMode::None => {
                (SeqLayout::new(tokens, PromptPlacement::None, 0, grl), None)
            }
            PromptMode::Prepend | PromptMode::Append => {
                let z = self.node_prompt(gnn_cfg, ctx, node, seed)?;
                let row = self.tape.reshape(z, &[1, lm_cfg.d_model])?;
                let placement = if mode == PromptMode::Prepend {
                    PromptPlacement::Prepend
                } else {
                    PromptPlacement::Append
                };
                (SeqLayout::new(tokens, placement, 1, grl), Some(row))
            }
            PromptMode::Prefix => {
                let PeftBinding::Prefix(p) = self.peft else {
                    return Err(Error::Config("prefix mode without prefix adapters".into()));
                };
                let z = self.node_prompt(gnn_cfg, ctx, node, seed)?;
                let rows = prefix_with_graph(self.tape, p, z)?;
                let n_prefix = self.tape.shape(rows)[0];
                (SeqLayout::new(tokens, PromptPlacement::Prepend, n_prefix, grl), Some(rows))
            }
        };
        forward(self.tape, lm_cfg, &self.lm, &layout, prompt, lora.as_deref())
    }

    /// The node representation v: prompted forward ending in [GRL].
    pub fn node_embedding(
        &mut self,
        lm_cfg: &LmConfig,
        gnn_cfg: &GnnConfig,
        ctx: &NodeContext<'_>,
        node: usize,
        mode: PromptMode,
        seed: u64,
    ) -> Result<TensorId> {
        let trace = self.node_forward(lm_cfg, gnn_cfg, ctx, node, mode, true, seed)?;
        grl_embedding(self.tape, &trace)
    }
}
