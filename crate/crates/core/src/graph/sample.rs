//! Layered neighbor sampling and negative edge sampling over the observed
//! part of the graph.

use super::{normalize_edge, Edge, EdgeSplit, TextRichGraph};
use crate::error::{Error, Result};
use crate::rng::{derive, Stream};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashSet;

/// One sampled neighbor: which node, over which relation, and the index of
/// its parent in the previous layer (the center is the sole parent of
/// layer 1, index 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledNode {
    pub node: usize,
    pub etype: u8,
    pub parent: usize,
}

/// A fan-out-capped, layered sample rooted at one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSample {
    pub center: usize,
    pub layers: Vec<Vec<SampledNode>>,
    pub fanouts: Vec<usize>,
}

impl NeighborSample {
    pub fn n_sampled(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }
}

/// Per-node incidence lists over observed edges only, sorted by
/// (neighbor, type) for reproducible iteration.
#[derive(Debug, Clone)]
pub struct Adjacency {
    neighbors: Vec<Vec<(usize, u8)>>,
}

impl Adjacency {
    pub fn observed(graph: &TextRichGraph, split: &EdgeSplit) -> Self {
        Self::from_edge_lists(graph.n_nodes, &split.observed_edges(graph))
    }

    /// All edges visible — only correct for graphs without a held-out split.
    pub fn full(graph: &TextRichGraph) -> Self {
        Self::from_edge_lists(graph.n_nodes, &graph.edges)
    }

    fn from_edge_lists(n_nodes: usize, edges: &[Vec<Edge>]) -> Self {
        let mut neighbors = vec![Vec::new(); n_nodes];
        for (t, list) in edges.iter().enumerate() {
            for &(i, j) in list {
                neighbors[i].push((j, t as u8));
                neighbors[j].push((i, t as u8));
            }
        }
        for l in neighbors.iter_mut() {
            l.sort_unstable();
        }
        Adjacency { neighbors }
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, u8)] {
        &self.neighbors[node]
    }

    /// Per hop, each parent contributes up to fanout[hop] of its incident
    /// (neighbor, type) pairs, drawn uniformly without replacement; parents
    /// with degree below the fan-out contribute all of them once. An
    /// isolated center yields empty layers.
    pub fn sample_neighbors(&self, center: usize, fanouts: &[usize], seed: u64) -> NeighborSample {
        let mut rng = derive(seed, Stream::NeighborSample, center as u64);
        let mut layers: Vec<Vec<SampledNode>> = Vec::with_capacity(fanouts.len());
        let mut frontier: Vec<usize> = vec![center];
        for &fanout in fanouts {
            let mut layer = Vec::new();
            for (parent_idx, &parent) in frontier.iter().enumerate() {
                let incident = &self.neighbors[parent];
                if incident.len() <= fanout {
                    for &(node, etype) in incident {
                        layer.push(SampledNode { node, etype, parent: parent_idx });
                    }
                } else {
                    let picks = rand::seq::index::sample(&mut rng, incident.len(), fanout);
                    let mut picks: Vec<usize> = picks.into_iter().collect();
                    picks.sort_unstable();
                    for p in picks {
                        let (node, etype) = incident[p];
                        layer.push(SampledNode { node, etype, parent: parent_idx });
                    }
                }
            }
            frontier = layer.iter().map(|s| s.node).collect();
            layers.push(layer);
            if frontier.is_empty() {
                // Deeper hops stay empty; record them for shape stability.
                for _ in layers.len()..fanouts.len() {
                    layers.push(Vec::new());
                }
                break;
            }
        }
        NeighborSample { center, layers, fanouts: fanouts.to_vec() }
    }
}

/// Uniform negative sampling: candidates are nodes that do not form a task
/// edge with the anchor and are neither endpoint of the positive pair.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    n_nodes: usize,
    task: HashSet<Edge>,
    task_degree: Vec<usize>,
}

const MAX_REJECTIONS: usize = 10_000;

impl NegativeSampler {
    pub fn new(graph: &TextRichGraph, split: &EdgeSplit) -> Self {
        let task: HashSet<Edge> = split.task_edges().collect();
        let mut task_degree = vec![0usize; graph.n_nodes];
        for &(i, j) in &task {
            task_degree[i] += 1;
            task_degree[j] += 1;
        }
        NegativeSampler { n_nodes: graph.n_nodes, task, task_degree }
    }

    fn is_valid(&self, anchor: usize, positive: usize, candidate: usize) -> bool {
        candidate != anchor
            && candidate != positive
            && !self.task.contains(&normalize_edge(anchor, candidate))
    }

    /// Draw one corrupted tail j' for the positive edge (anchor, positive),
    /// uniform over valid candidates. Deterministic given the seed.
    pub fn draw(&self, anchor: usize, positive: usize, seed: u64) -> Result<usize> {
        // When (anchor, positive) is a task edge the task degree already
        // excludes `positive`; otherwise it is one extra exclusion.
        let positive_extra =
            if self.task.contains(&normalize_edge(anchor, positive)) { 0 } else { 1 };
        let excluded = 1 + self.task_degree[anchor] + positive_extra;
        if self.n_nodes <= excluded {
            return Err(Error::NegativeSampling { node: anchor, attempts: 0 });
        }
        let mut rng = derive(seed, Stream::Negative, (anchor as u64) << 32 | positive as u64);
        for _ in 0..MAX_REJECTIONS {
            let candidate = rng.gen_range(0..self.n_nodes);
            if self.is_valid(anchor, positive, candidate) {
                return Ok(candidate);
            }
        }
        Err(Error::NegativeSampling { node: anchor, attempts: MAX_REJECTIONS })
    }

    /// Distinct negatives for ranking: every valid candidate enumerated,
    /// shuffled, and truncated to `n`. Returns fewer when fewer exist.
    pub fn draw_distinct(&self, anchor: usize, positive: usize, n: usize, seed: u64) -> Vec<usize> {
        let mut candidates: Vec<usize> = (0..self.n_nodes)
            .filter(|&c| self.is_valid(anchor, positive, c))
            .collect();
        let mut rng = derive(seed, Stream::EvalNegative, (anchor as u64) << 32 | positive as u64);
        candidates.shuffle(&mut rng);
        candidates.truncate(n);
        candidates
    }
}
