//! Relation-aware mean-aggregation prompt encoder.
//!
//! Message passing runs bottom-up over a fan-out-sampled tree: at each
//! layer a node's update is ReLU(self + sum over relations of
//! W_t · mean(children under t) + bias), with children sorted by node id
//! before the mean so neighbor order never changes a bit. The final hidden
//! state maps into LM space through the projection M.
//!
//! The self path is a parameter-free residual; features enter through an
//! input projection only when d_feat differs from d_gnn. Weight tensors
//! therefore enumerate to exactly k·d_gnn²·n_rel + d_gnn·d_model, with
//! biases (and the input projection, when present) reported separately.

use crate::error::{Error, Result};
use crate::graph::NeighborSample;
use crate::model::params::{Binder, Mat, Partition, TensorRef, Vect, VisitParams};
use crate::rng::{derive, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct GnnConfig {
    pub d_gnn: usize,
    pub k_layers: usize,
    pub n_rel: usize,
    pub d_feat: usize,
    pub d_model: usize,
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_gnn == 0 || self.k_layers == 0 || self.n_rel == 0 {
            return Err(Error::Config(format!(
                "GNN dims must be positive: d_gnn={} k={} n_rel={}",
                self.d_gnn, self.k_layers, self.n_rel
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GnnLayer<S> {
    /// One weight matrix per relation, d_gnn x d_gnn.
    pub rel: Vec<Mat<S>>,
    pub bias: Vect<S>,
}

#[derive(Debug, Clone)]
pub struct GnnParams<S> {
    pub cfg: GnnConfig,
    /// Present iff d_feat != d_gnn.
    pub input_proj: Option<Mat<S>>,
    pub layers: Vec<GnnLayer<S>>,
    /// The mapping M into LM embedding space.
    pub proj: Mat<S>,
}

impl<S: Scalar> GnnParams<S> {
    pub fn init(cfg: &GnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive(seed, Stream::ParamInit, 2);
        let std = crate::lm::INIT_STD;
        let input_proj = (cfg.d_feat != cfg.d_gnn)
            .then(|| Mat::normal(cfg.d_feat, cfg.d_gnn, std, &mut rng));
        let layers = (0..cfg.k_layers)
            .map(|_| GnnLayer {
                rel: (0..cfg.n_rel).map(|_| Mat::normal(cfg.d_gnn, cfg.d_gnn, std, &mut rng)).collect(),
                bias: Vect::zeros(cfg.d_gnn),
            })
            .collect();
        Ok(GnnParams {
            cfg: cfg.clone(),
            input_proj,
            layers,
            proj: Mat::normal(cfg.d_gnn, cfg.d_model, std, &mut rng),
        })
    }

    pub fn bind(&self, binder: &mut Binder<'_, S>, trainable: bool) -> Result<GnnBinding> {
        let p = Partition::Gnn;
        let input_proj = match &self.input_proj {
            Some(m) => Some(binder.mat("gnn.input_proj", m, p, trainable)?),
            None => None,
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut rel = Vec::with_capacity(layer.rel.len());
            for (t, w) in layer.rel.iter().enumerate() {
                rel.push(binder.mat(&format!("gnn.layer{i}.rel{t}"), w, p, trainable)?);
            }
            layers.push(GnnLayerBinding {
                rel,
                bias: binder.vect(&format!("gnn.layer{i}.bias"), &layer.bias, p, trainable)?,
            });
        }
        Ok(GnnBinding { input_proj, layers, proj: binder.mat("gnn.proj", &self.proj, p, trainable)? })
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.len());
        n
    }
}

impl<S: Scalar> VisitParams<S> for GnnParams<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, Partition, TensorRef<'_, S>)) {
        let p = Partition::Gnn;
        if let Some(m) = &self.input_proj {
            f("gnn.input_proj", p, TensorRef::Mat(m));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (t, w) in layer.rel.iter().enumerate() {
                f(&format!("gnn.layer{i}.rel{t}"), p, TensorRef::Mat(w));
            }
            f(&format!("gnn.layer{i}.bias"), p, TensorRef::Vect(&layer.bias));
        }
        f("gnn.proj", p, TensorRef::Mat(&self.proj));
    }

    fn visit_values_mut(&mut self, f: &mut dyn FnMut(&str, Partition, &mut Vec<S>)) {
        let p = Partition::Gnn;
        if let Some(m) = &mut self.input_proj {
            f("gnn.input_proj", p, &mut m.data);
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (t, w) in layer.rel.iter_mut().enumerate() {
                f(&format!("gnn.layer{i}.rel{t}"), p, &mut w.data);
            }
            f(&format!("gnn.layer{i}.bias"), p, &mut layer.bias.data);
        }
        f("gnn.proj", p, &mut self.proj.data);
    }
}

#[derive(Debug, Clone)]
pub struct GnnLayerBinding {
    pub rel: Vec<TensorId>,
    pub bias: TensorId,
}

#[derive(Debug, Clone)]
pub struct GnnBinding {
    pub input_proj: Option<TensorId>,
    pub layers: Vec<GnnLayerBinding>,
    pub proj: TensorId,
}

/// Encode one sampled neighborhood into a graph prompt vector of width
/// d_model. `features(node)` supplies raw feature rows; they enter the
/// tape as constants.
pub fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &GnnConfig,
    bound: &GnnBinding,
    sample: &NeighborSample,
    features: &dyn Fn(usize) -> Vec<f64>,
) -> Result<TensorId> {
    if sample.layers.len() != cfg.k_layers {
        return Err(Error::Shape(format!(
            "sample depth {} != k_layers {}",
            sample.layers.len(),
            cfg.k_layers
        )));
    }

    let embed = |tape: &mut Tape<S>, node: usize| -> Result<TensorId> {
        let raw = features(node);
        if raw.len() != cfg.d_feat {
            return Err(Error::Shape(format!(
                "node {node} feature width {} != d_feat {}",
                raw.len(),
                cfg.d_feat
            )));
        }
        let x = tape.constant(&[cfg.d_feat], raw.into_iter().map(S::c).collect())?;
        match bound.input_proj {
            Some(w) => tape.vecmat(x, w),
            None => Ok(x),
        }
    };

    // Hidden states per tree depth; depth 0 is the center alone.
    let mut hidden: Vec<Vec<TensorId>> = Vec::with_capacity(cfg.k_layers + 1);
    hidden.push(vec![embed(tape, sample.center)?]);
    for layer in &sample.layers {
        let hs: Vec<TensorId> =
            layer.iter().map(|s| embed(tape, s.node)).collect::<Result<_>>()?;
        hidden.push(hs);
    }

    // Step l consumes depths 0..=k-l and produces their updates; the
    // deepest remaining depth aggregates nothing new after its own turn.
    for (step, layer_bound) in bound.layers.iter().enumerate() {
        let max_depth = cfg.k_layers - (step + 1);
        let mut next: Vec<Vec<TensorId>> = Vec::with_capacity(max_depth + 1);
        for depth in 0..=max_depth {
            let n_parents = hidden[depth].len();
            let mut updated = Vec::with_capacity(n_parents);
            for parent_idx in 0..n_parents {
                // Children of this tree position, grouped by relation and
                // sorted by node id for a fixed summation order.
                let children = &sample.layers[depth];
                let mut update = hidden[depth][parent_idx];
                for (t, &w_rel) in layer_bound.rel.iter().enumerate() {
                    let mut group: Vec<(usize, usize)> = children
                        .iter()
                        .enumerate()
                        .filter(|(_, s)| s.parent == parent_idx && s.etype as usize == t)
                        .map(|(ci, s)| (s.node, ci))
                        .collect();
                    if group.is_empty() {
                        continue;
                    }
                    group.sort_unstable();
                    let rows: Vec<TensorId> =
                        group.iter().map(|&(_, ci)| hidden[depth + 1][ci]).collect();
                    let stacked = tape.concat_rows(&rows)?;
                    let mean = tape.mean_rows(stacked)?;
                    let message = tape.vecmat(mean, w_rel)?;
                    update = tape.add(update, message)?;
                }
                let biased = tape.add(update, layer_bound.bias)?;
                updated.push(tape.relu(biased));
            }
            next.push(updated);
        }
        hidden = next;
    }

    tape.vecmat(hidden[0][0], bound.proj)
}

/// Formula count k·d_gnn²·n_rel + d_gnn·d_model next to the exact
/// enumeration, split into the formula-covered weights and the extras
/// (biases, optional input projection) that are reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GnnCount {
    pub formula: usize,
    pub core_weights: usize,
    pub biases: usize,
    pub input_projection: usize,
}

impl GnnCount {
    pub fn total(&self) -> usize {
        self.core_weights + self.biases + self.input_projection
    }
}

impl<S: Scalar> GnnParams<S> {
    /// Enumerate the tensors this instance actually allocated.
    pub fn count(&self) -> GnnCount {
        let cfg = &self.cfg;
        let mut core_weights = 0;
        let mut biases = 0;
        let mut input_projection = 0;
        self.visit(&mut |name, _, t| {
            if name == "gnn.input_proj" {
                input_projection += t.len();
            } else if name.ends_with(".bias") {
                biases += t.len();
            } else {
                core_weights += t.len();
            }
        });
        let formula =
            cfg.k_layers * cfg.d_gnn * cfg.d_gnn * cfg.n_rel + cfg.d_gnn * cfg.d_model;
        GnnCount { formula, core_weights, biases, input_projection }
    }
}

/// Formula and exact enumeration for a configuration; the enumeration
/// walks tensors of a real instance rather than re-deriving arithmetic.
pub fn count_params(cfg: &GnnConfig) -> Result<GnnCount> {
    Ok(GnnParams::<f32>::init(cfg, 0)?.count())
}
