//! Node-embedding inference (one prompted forward per node) and
//! link-prediction ranking under the n-negative protocol.

use crate::ckpt;
use crate::error::{Error, Result};
use crate::graph::{Adjacency, Edge, EdgeSplit, NegativeSampler, TextRichGraph};
use crate::model::{GpeftModel, NodeContext, Phase, PromptMode};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tape;
use rayon::prelude::*;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Dense node vectors plus the id of the checkpoint that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<S> {
    pub node_ids: Vec<usize>,
    pub d_model: usize,
    pub data: Vec<S>,
    pub checkpoint_id: String,
}

impl<S: Scalar> EmbeddingSet<S> {
    pub fn vector(&self, node: usize) -> Option<&[S]> {
        // Identity layout (all nodes, in order) resolves without a scan.
        let idx = if node < self.node_ids.len() && self.node_ids[node] == node {
            node
        } else {
            self.node_ids.iter().position(|&n| n == node)?
        };
        Some(&self.data[idx * self.d_model..(idx + 1) * self.d_model])
    }
}

/// Embed every listed node: exactly one neighbor sample, one graph
/// prompt, and one LM forward per node. Returns the instrumented forward
/// count alongside the embeddings. Inference is parallel over nodes; the
/// per-node computation is seeded independently, so the result does not
/// depend on scheduling.
pub fn infer_embeddings<S: Scalar>(
    model: &GpeftModel<S>,
    graph: &TextRichGraph,
    adjacency: &Adjacency,
    nodes: &[usize],
    fanouts: &[usize],
    mode: PromptMode,
    seed: u64,
) -> Result<(EmbeddingSet<S>, usize)> {
    let lm_cfg = &model.lm.cfg;
    let gnn_cfg = &model.gnn.cfg;
    let forwards = AtomicUsize::new(0);
    let vectors: Vec<Vec<S>> = nodes
        .par_iter()
        .map(|&node| -> Result<Vec<S>> {
            let ctx = NodeContext { graph, adjacency, fanouts };
            let mut tape = Tape::new();
            let mut bound = model.bind(&mut tape, Phase::Inference)?;
            forwards.fetch_add(1, Ordering::Relaxed);
            let v = bound.node_embedding(lm_cfg, gnn_cfg, &ctx, node, mode, seed)?;
            Ok(bound.tape.values(v).to_vec())
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(nodes.len() * lm_cfg.d_model);
    for v in vectors {
        data.extend(v);
    }
    Ok((
        EmbeddingSet {
            node_ids: nodes.to_vec(),
            d_model: lm_cfg.d_model,
            data,
            checkpoint_id: String::new(),
        },
        forwards.into_inner(),
    ))
}

fn cosine<S: Scalar>(a: &[S], b: &[S]) -> Result<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.f64(), y.f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm(usize::MAX));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Per-edge ranking outcome: the true pair's similarity against each
/// sampled negative, with ties resolved against the true edge.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub edge: Edge,
    pub true_score: f64,
    pub negative_scores: Vec<f64>,
    /// 1-based; the true edge ranks after any equal-scoring negative.
    pub rank: usize,
}

pub fn rank_edge<S: Scalar>(
    edge: Edge,
    sampler: &NegativeSampler,
    embeddings: &EmbeddingSet<S>,
    n_neg: usize,
    seed: u64,
) -> Result<RankingResult> {
    let (i, j) = edge;
    let v_i = embeddings
        .vector(i)
        .ok_or_else(|| Error::Graph(format!("no embedding for node {i}")))?;
    let v_j = embeddings
        .vector(j)
        .ok_or_else(|| Error::Graph(format!("no embedding for node {j}")))?;
    let true_score = cosine(v_i, v_j).map_err(|_| Error::ZeroNorm(i))?;
    let negatives = sampler.draw_distinct(i, j, n_neg, seed);
    let mut negative_scores = Vec::with_capacity(negatives.len());
    for neg in negatives {
        let v_n = embeddings
            .vector(neg)
            .ok_or_else(|| Error::Graph(format!("no embedding for node {neg}")))?;
        negative_scores.push(cosine(v_i, v_n).map_err(|_| Error::ZeroNorm(neg))?);
    }
    let rank = 1 + negative_scores.iter().filter(|&&s| s >= true_score).count();
    Ok(RankingResult { edge, true_score, negative_scores, rank })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub hit1: f64,
    pub mrr: f64,
    pub n_test: usize,
    pub n_neg: usize,
    /// Edges that had fewer valid negatives than requested.
    pub shortfall_edges: usize,
}

impl RankReport {
    pub fn to_kv(&self, dataset: &str, seed: u64) -> String {
        format!(
            "dataset={dataset} seed={seed} hit1={} mrr={} n_test={} n_neg={} shortfall_edges={}",
            self.hit1, self.mrr, self.n_test, self.n_neg, self.shortfall_edges
        )
    }
}

/// Average hit@1 and MRR over a list of edges.
pub fn rank_edges<S: Scalar>(
    edges: &[Edge],
    sampler: &NegativeSampler,
    embeddings: &EmbeddingSet<S>,
    n_neg: usize,
    seed: u64,
) -> Result<RankReport> {
    if edges.is_empty() {
        return Err(Error::Graph("no edges to rank".into()));
    }
    let mut hits = 0usize;
    let mut mrr = 0.0f64;
    let mut shortfall_edges = 0usize;
    for &edge in edges {
        let r = rank_edge(edge, sampler, embeddings, n_neg, seed)?;
        if r.negative_scores.len() < n_neg {
            shortfall_edges += 1;
        }
        if r.rank == 1 {
            hits += 1;
        }
        mrr += 1.0 / r.rank as f64;
    }
    Ok(RankReport {
        hit1: hits as f64 / edges.len() as f64,
        mrr: mrr / edges.len() as f64,
        n_test: edges.len(),
        n_neg,
        shortfall_edges,
    })
}

/// The §5.3 protocol over the held-out test edges.
pub fn rank_metrics<S: Scalar>(
    graph: &TextRichGraph,
    split: &EdgeSplit,
    embeddings: &EmbeddingSet<S>,
    n_neg: usize,
    seed: u64,
) -> Result<RankReport> {
    let sampler = NegativeSampler::new(graph, split);
    rank_edges(&split.test, &sampler, embeddings, n_neg, seed)
}

// ── persistence ──────────────────────────────────────────────────────

const MAGIC: &str = "gpeft-emb 1";

pub fn save_embeddings<S: Scalar>(set: &EmbeddingSet<S>, path: &Path) -> Result<()> {
    let ids: Vec<String> = set.node_ids.iter().map(|n| n.to_string()).collect();
    let header = vec![
        MAGIC.to_string(),
        format!("precision {}", S::PRECISION.as_str()),
        format!("dim {}", set.d_model),
        format!("checkpoint {}", if set.checkpoint_id.is_empty() { "-" } else { &set.checkpoint_id }),
        format!("nodes {}", set.node_ids.len()),
        format!("ids {}", ids.join(" ")),
    ];
    let mut payload = Vec::with_capacity(set.data.len() * S::PRECISION.bytes());
    for &v in &set.data {
        v.write_le(&mut payload);
    }
    ckpt::write_sections(&header, &payload, path)
}

pub fn load_embeddings<S: Scalar>(path: &Path) -> Result<EmbeddingSet<S>> {
    let (header, payload) = ckpt::read_sections(path)?;
    let field = |prefix: &str| -> Result<String> {
        header
            .iter()
            .find_map(|l| l.strip_prefix(prefix))
            .map(|s| s.trim().to_string())
            .ok_or_else(|| Error::Parse(format!("embeddings missing {prefix:?}")))
    };
    if header.first().map(String::as_str) != Some(MAGIC) {
        return Err(Error::Parse(format!("{}: not an embedding file", path.display())));
    }
    let precision = Precision::parse(&field("precision ")?)
        .ok_or_else(|| Error::Parse("bad precision".into()))?;
    if precision != S::PRECISION {
        return Err(Error::Parse(format!(
            "embedding precision {} does not match {}",
            precision.as_str(),
            S::PRECISION.as_str()
        )));
    }
    let d_model: usize =
        field("dim ")?.parse().map_err(|_| Error::Parse("bad dim".into()))?;
    let checkpoint_id = {
        let c = field("checkpoint ")?;
        if c == "-" { String::new() } else { c }
    };
    let node_ids: Vec<usize> = field("ids ")?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad node id {t:?}"))))
        .collect::<Result<_>>()?;
    let width = S::PRECISION.bytes();
    if payload.len() != node_ids.len() * d_model * width {
        return Err(Error::Parse("embedding payload size mismatch".into()));
    }
    let data = payload.chunks_exact(width).map(S::read_le).collect();
    Ok(EmbeddingSet { node_ids, d_model, data, checkpoint_id })
}
