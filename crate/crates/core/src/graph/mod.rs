//! Text-rich graph storage, edge splits, and neighborhood sampling.
//!
//! Edges are undirected, typed, and stored with normalized (low, high)
//! endpoints. Everything downstream of a split sees only observed edges:
//! the non-task types plus the train/val task edges. Test task edges exist
//! solely for the final evaluator.

mod io;
mod sample;
mod split;

pub use io::{load_graph, load_split, save_graph, save_split};
pub use sample::{Adjacency, NegativeSampler, NeighborSample, SampledNode};
pub use split::split_edges;

use crate::error::{Error, Result};

pub type Edge = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct TextRichGraph {
    pub n_nodes: usize,
    /// Per-node token-id sequence; non-empty.
    pub texts: Vec<Vec<u16>>,
    /// Per-node feature vector, uniform width.
    pub features: Vec<Vec<f64>>,
    pub d_feat: usize,
    pub edge_types: Vec<String>,
    /// Per edge type, normalized (low, high) pairs, sorted, deduplicated.
    pub edges: Vec<Vec<Edge>>,
}

pub fn normalize_edge(i: usize, j: usize) -> Edge {
    if i <= j {
        (i, j)
    } else {
        (j, i)
    }
}

impl TextRichGraph {
    pub fn new(
        texts: Vec<Vec<u16>>,
        features: Vec<Vec<f64>>,
        edge_types: Vec<String>,
        edges: Vec<Vec<Edge>>,
    ) -> Result<Self> {
        let n_nodes = texts.len();
        let d_feat = features.first().map_or(0, |f| f.len());
        let mut edges = edges;
        for list in edges.iter_mut() {
            for e in list.iter_mut() {
                *e = normalize_edge(e.0, e.1);
            }
            list.sort_unstable();
        }
        let g = TextRichGraph { n_nodes, texts, features, d_feat, edge_types, edges };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.n_nodes {
            return Err(Error::Graph(format!(
                "{} feature rows for {} nodes",
                self.features.len(),
                self.n_nodes
            )));
        }
        for (i, t) in self.texts.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Graph(format!("node {i} has an empty token sequence")));
            }
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.len() != self.d_feat {
                return Err(Error::Graph(format!(
                    "node {i} feature width {} != {}",
                    f.len(),
                    self.d_feat
                )));
            }
        }
        if self.edges.len() != self.edge_types.len() {
            return Err(Error::Graph(format!(
                "{} edge lists for {} edge types",
                self.edges.len(),
                self.edge_types.len()
            )));
        }
        for (t, list) in self.edges.iter().enumerate() {
            for window in list.windows(2) {
                if window[0] == window[1] {
                    return Err(Error::Graph(format!(
                        "duplicate edge {:?} in type {t}",
                        window[0]
                    )));
                }
            }
            for &(i, j) in list {
                if i == j {
                    return Err(Error::Graph(format!("self-loop at node {i} in type {t}")));
                }
                if j >= self.n_nodes {
                    return Err(Error::Graph(format!(
                        "edge ({i},{j}) endpoint out of range {}",
                        self.n_nodes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn edge_type_index(&self, name: &str) -> Result<usize> {
        self.edge_types
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::Graph(format!("unknown edge type {name:?}")))
    }

    pub fn n_edges(&self) -> usize {
        self.edges.iter().map(|l| l.len()).sum()
    }
}

/// Disjoint train/val/test selection over one task edge type. Everything
/// except the test task edges is observed.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSplit {
    pub task_type: usize,
    pub train: Vec<Edge>,
    pub val: Vec<Edge>,
    pub test: Vec<Edge>,
}

impl EdgeSplit {
    /// Observed edge lists per type: non-task types untouched, the task
    /// type reduced to train + val.
    pub fn observed_edges(&self, graph: &TextRichGraph) -> Vec<Vec<Edge>> {
        let mut out = graph.edges.clone();
        let mut kept: Vec<Edge> = self.train.iter().chain(&self.val).copied().collect();
        kept.sort_unstable();
        out[self.task_type] = kept;
        out
    }

    /// All task edges regardless of split, for negative-sampling exclusion.
    pub fn task_edges<'a>(&'a self) -> impl Iterator<Item = Edge> + 'a {
        self.train.iter().chain(&self.val).chain(&self.test).copied()
    }

    pub fn validate(&self, graph: &TextRichGraph) -> Result<()> {
        use std::collections::HashSet;
        let mut seen = HashSet::new();
        for e in self.task_edges() {
            if !seen.insert(e) {
                return Err(Error::Graph(format!("edge {e:?} appears twice in the split")));
            }
        }
        let all: HashSet<Edge> = graph.edges[self.task_type].iter().copied().collect();
        for e in self.task_edges() {
            if !all.contains(&e) {
                return Err(Error::Graph(format!("split edge {e:?} is not a task edge")));
            }
        }
        Ok(())
    }
}

/// Node/edge counts, average degree, and average token count — the usual
/// dataset summary columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStats {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub n_task_edges: usize,
    pub avg_degree: f64,
    pub avg_tokens: f64,
}

impl GraphStats {
    pub fn compute(graph: &TextRichGraph, task_type: usize) -> Self {
        let n_task_edges = graph.edges[task_type].len();
        let n_edges: usize = graph
            .edges
            .iter()
            .enumerate()
            .filter(|(t, _)| *t != task_type)
            .map(|(_, l)| l.len())
            .sum();
        let avg_degree = if graph.n_nodes == 0 {
            0.0
        } else {
            2.0 * n_edges as f64 / graph.n_nodes as f64
        };
        let total_tokens: usize = graph.texts.iter().map(|t| t.len()).sum();
        let avg_tokens =
            if graph.n_nodes == 0 { 0.0 } else { total_tokens as f64 / graph.n_nodes as f64 };
        GraphStats { n_nodes: graph.n_nodes, n_edges, n_task_edges, avg_degree, avg_tokens }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use std::collections::HashSet;

    fn grid_graph(n: usize, task_edges: Vec<Edge>, observed: Vec<Edge>) -> TextRichGraph {
        TextRichGraph::new(
            vec![vec![1u16, 2, 3]; n],
            vec![vec![0.0; 4]; n],
            vec!["observed".into(), "task".into()],
            vec![observed, task_edges],
        )
        .unwrap()
    }

    fn all_pairs(n: usize) -> Vec<Edge> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((i, j));
            }
        }
        edges
    }

    #[test]
    fn split_arithmetic_and_observed_exclusion() {
        // 1000 task edges: complete graph on 46 nodes has 1035; trim to 1000.
        let mut task = all_pairs(46);
        task.truncate(1000);
        let observed = vec![(0, 1), (1, 2)];
        let g = grid_graph(46, task, observed);
        let split = split_edges(&g, 1, 500, 100, 7).unwrap();
        assert_eq!(split.train.len(), 500);
        assert_eq!(split.val.len(), 100);
        assert_eq!(split.test.len(), 400);

        let observed_edges = split.observed_edges(&g);
        let test: HashSet<Edge> = split.test.iter().copied().collect();
        for e in &observed_edges[1] {
            assert!(!test.contains(e), "test edge {e:?} leaked into observed");
        }
        assert_eq!(observed_edges[1].len(), 600);
        assert_eq!(observed_edges[0].len(), 2);
    }

    #[test]
    fn paper_scale_split_counts() {
        // 500 nodes give 124,750 task pairs; 50k train / 10k val leaves
        // 64,750 for testing.
        let g = grid_graph(500, all_pairs(500), vec![(0, 1)]);
        let split = split_edges(&g, 1, 50_000, 10_000, 0).unwrap();
        assert_eq!(split.train.len(), 50_000);
        assert_eq!(split.val.len(), 10_000);
        assert_eq!(split.test.len(), 64_750);
    }

    #[test]
    fn split_is_seed_deterministic_and_seed_sensitive() {
        let g = grid_graph(46, all_pairs(46), vec![]);
        let a = split_edges(&g, 1, 400, 100, 3).unwrap();
        let b = split_edges(&g, 1, 400, 100, 3).unwrap();
        let c = split_edges(&g, 1, 400, 100, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_rejects_insufficient_edges() {
        let g = grid_graph(5, vec![(0, 1), (1, 2)], vec![]);
        let err = split_edges(&g, 1, 2, 1, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientEdges { available: 2, .. }));
    }

    #[test]
    fn sampling_low_degree_returns_all_without_duplicates() {
        let g = grid_graph(5, vec![], vec![(0, 1), (0, 2), (0, 3)]);
        let split = EdgeSplit { task_type: 1, train: vec![], val: vec![], test: vec![] };
        let adj = Adjacency::observed(&g, &split);
        let s = adj.sample_neighbors(0, &[5], 11);
        let nodes: Vec<usize> = s.layers[0].iter().map(|x| x.node).collect();
        assert_eq!(nodes, vec![1, 2, 3]);
    }

    #[test]
    fn isolated_node_yields_empty_layers() {
        let g = grid_graph(4, vec![], vec![(1, 2)]);
        let split = EdgeSplit { task_type: 1, train: vec![], val: vec![], test: vec![] };
        let adj = Adjacency::observed(&g, &split);
        let s = adj.sample_neighbors(0, &[5, 5], 0);
        assert_eq!(s.layers.len(), 2);
        assert!(s.layers.iter().all(Vec::is_empty));
        assert_eq!(s.n_sampled(), 0);
    }

    #[test]
    fn fanout_bounds_hold_per_hop() {
        let g = grid_graph(40, vec![], all_pairs(40));
        let split = EdgeSplit { task_type: 1, train: vec![], val: vec![], test: vec![] };
        let adj = Adjacency::observed(&g, &split);
        for seed in 0..10 {
            let s = adj.sample_neighbors(7, &[5, 5], seed);
            assert!(s.layers[0].len() <= 5);
            assert!(s.layers[1].len() <= 5 * s.layers[0].len());
            assert!(s.n_sampled() <= 30);
            // Without replacement within one parent.
            let mut seen = HashSet::new();
            for e in &s.layers[0] {
                assert!(seen.insert((e.node, e.etype)), "duplicate draw {e:?}");
            }
        }
    }

    #[test]
    fn sampled_neighbors_are_adjacent_to_their_parents() {
        let g = grid_graph(30, all_pairs(30), all_pairs(30));
        let split = split_edges(&g, 1, 100, 50, 5).unwrap();
        let adj = Adjacency::observed(&g, &split);
        let s = adj.sample_neighbors(3, &[4, 4], 9);
        for (hop, layer) in s.layers.iter().enumerate() {
            for e in layer {
                let parent =
                    if hop == 0 { s.center } else { s.layers[hop - 1][e.parent].node };
                assert!(
                    adj.neighbors(parent).contains(&(e.node, e.etype)),
                    "{e:?} not adjacent to parent {parent}"
                );
            }
        }
    }

    #[test]
    fn three_node_forced_negative() {
        let g = grid_graph(3, vec![(0, 1)], vec![]);
        let split = EdgeSplit { task_type: 1, train: vec![(0, 1)], val: vec![], test: vec![] };
        let sampler = NegativeSampler::new(&g, &split);
        for seed in 0..20 {
            assert_eq!(sampler.draw(0, 1, seed).unwrap(), 2);
        }
    }

    #[test]
    fn negative_sampling_rejects_saturated_anchor() {
        // Node 0 forms a task edge with everyone else.
        let g = grid_graph(4, vec![(0, 1), (0, 2), (0, 3)], vec![]);
        let split = EdgeSplit {
            task_type: 1,
            train: vec![(0, 1), (0, 2), (0, 3)],
            val: vec![],
            test: vec![],
        };
        let sampler = NegativeSampler::new(&g, &split);
        assert!(matches!(
            sampler.draw(0, 1, 0),
            Err(Error::NegativeSampling { node: 0, .. })
        ));
    }

    /// Upper-tail chi-squared critical value via Wilson-Hilferty.
    fn chi2_critical(df: f64, z: f64) -> f64 {
        let a = 2.0 / (9.0 * df);
        df * (1.0 - a + z * a.sqrt()).powi(3)
    }

    #[test]
    fn negative_draws_are_uniform_over_valid_candidates() {
        let n = 100;
        let task = vec![(0, 1), (0, 2), (0, 3)];
        let g = grid_graph(n, task.clone(), vec![]);
        let split = EdgeSplit { task_type: 1, train: task, val: vec![], test: vec![] };
        let sampler = NegativeSampler::new(&g, &split);

        // Valid candidates for anchor 0, positive 1: everything except
        // {0, 1, 2, 3}.
        let mut counts = vec![0usize; n];
        let draws = 10_000;
        for seed in 0..draws {
            counts[sampler.draw(0, 1, seed).unwrap()] += 1;
        }
        for banned in [0, 1, 2, 3] {
            assert_eq!(counts[banned], 0);
        }
        let valid = n - 4;
        let expected = draws as f64 / valid as f64;
        let chi2: f64 = counts
            .iter()
            .skip(4)
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // p > 0.01 ⇔ statistic below the 99th-percentile critical value.
        let critical = chi2_critical((valid - 1) as f64, 2.3263478740408408);
        assert!(chi2 < critical, "chi2 {chi2} >= critical {critical}");
    }

    #[test]
    fn negatives_never_collide_with_task_edges() {
        let g = grid_graph(30, all_pairs(12), vec![(20, 21)]);
        let split = split_edges(&g, 1, 40, 10, 2).unwrap();
        let sampler = NegativeSampler::new(&g, &split);
        let task: HashSet<Edge> = split.task_edges().collect();
        for (s, &(i, j)) in split.train.iter().enumerate().map(|(s, e)| (s as u64, e)) {
            let neg = sampler.draw(i, j, s).unwrap();
            assert!(neg != i && neg != j);
            assert!(!task.contains(&normalize_edge(i, neg)));
        }
        let distinct = sampler.draw_distinct(0, 1, 100, 0);
        let unique: HashSet<usize> = distinct.iter().copied().collect();
        assert_eq!(unique.len(), distinct.len(), "draw_distinct repeated a node");
        for &c in &distinct {
            assert!(!task.contains(&normalize_edge(0, c)));
        }
    }

    #[test]
    fn graph_io_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = grid_graph(6, vec![(0, 5), (2, 3)], vec![(0, 1), (4, 5)]);
        g.features = (0..6)
            .map(|i| (0..4).map(|j| (i as f64 + 1.0) / (j as f64 + 3.0)).collect())
            .collect();
        let path = dir.path().join("graph.txt");
        save_graph(&g, &path).unwrap();
        let loaded = load_graph(&path).unwrap();
        assert_eq!(g, loaded);

        // Byte-identical on re-save.
        let path2 = dir.path().join("graph2.txt");
        save_graph(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        let split = split_edges(&g, 1, 1, 0, 0).unwrap();
        let spath = dir.path().join("split.txt");
        save_split(&split, "task", &spath).unwrap();
        let sloaded = load_split(&loaded, &spath).unwrap();
        assert_eq!(split, sloaded);
    }

    #[test]
    fn graph_invariants_reject_bad_input() {
        assert!(TextRichGraph::new(
            vec![vec![1], vec![]],
            vec![vec![0.0], vec![0.0]],
            vec!["t".into()],
            vec![vec![]],
        )
        .is_err());
        assert!(TextRichGraph::new(
            vec![vec![1], vec![2]],
            vec![vec![0.0], vec![0.0]],
            vec!["t".into()],
            vec![vec![(0, 0)]],
        )
        .is_err());
        assert!(TextRichGraph::new(
            vec![vec![1], vec![2]],
            vec![vec![0.0], vec![0.0]],
            vec!["t".into()],
            vec![vec![(0, 1), (1, 0)]],
        )
        .is_err());
        assert!(TextRichGraph::new(
            vec![vec![1], vec![2]],
            vec![vec![0.0], vec![0.0]],
            vec!["t".into()],
            vec![vec![(0, 2)]],
        )
        .is_err());
    }
}
