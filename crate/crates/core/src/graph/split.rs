//! Train/val/test edge splitting.

use super::{EdgeSplit, TextRichGraph};
use crate::error::{Error, Result};
use crate::rng::{derive, Stream};
use rand::seq::SliceRandom;

/// Uniform random disjoint selection of n_train + n_val task edges; the
/// remainder becomes the test set. Deterministic given the seed.
pub fn split_edges(
    graph: &TextRichGraph,
    task_type: usize,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<EdgeSplit> {
    let all = &graph.edges[task_type];
    if all.len() < n_train + n_val + 1 {
        return Err(Error::InsufficientEdges {
            task_type: graph.edge_types[task_type].clone(),
            needed: n_train + n_val + 1,
            available: all.len(),
        });
    }
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut rng = derive(seed, Stream::Split, task_type as u64);
    order.shuffle(&mut rng);
    let pick = |range: std::ops::Range<usize>| order[range].iter().map(|&i| all[i]).collect();
    Ok(EdgeSplit {
        task_type,
        train: pick(0..n_train),
        val: pick(n_train..n_train + n_val),
        test: pick(n_train + n_val..all.len()),
    })
}
