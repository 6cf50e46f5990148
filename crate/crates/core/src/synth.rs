//! Synthetic text-rich graphs with a controllable text/structure signal
//! split.
//!
//! Each node gets a latent topic. Its text draws from a topic-specific
//! byte alphabet, degraded token-by-token into uniform noise with
//! probability `p_noise`. Observed edges favor same-topic pairs; task
//! edges follow a rule that is either text-aligned (same_topic) or purely
//! structural (shared_neighbors), so cranking `p_noise` up makes the task
//! unrecoverable from text alone.

use crate::error::{Error, Result};
use crate::graph::{normalize_edge, Edge, TextRichGraph};
use crate::rng::{derive, standard_normal, Stream};
use rand::Rng;

/// Token ids 0..=255 are raw bytes; these two are reserved specials.
pub const VOCAB_BYTES: usize = 256;
pub const GRL_TOKEN: u16 = 256;
pub const PAD_TOKEN: u16 = 257;
pub const VOCAB_SIZE: usize = 258;

/// Probability scale of cross-topic observed edges relative to `density`.
const CROSS_TOPIC_RATIO: f64 = 0.01;

/// Fixed seed of the feature projection, independent of the graph seed —
/// it stands in for a frozen pre-trained text encoder.
const FEATURE_PROJECTION_SEED: u64 = 0xFEA7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskRule {
    /// Task edge iff both endpoints share a topic (text-aligned).
    SameTopic,
    /// Task edge iff the endpoints share at least m observed neighbors
    /// (structurally determined).
    SharedNeighbors(usize),
}

impl TaskRule {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "same_topic" {
            return Ok(TaskRule::SameTopic);
        }
        if let Some(m) = s.strip_prefix("shared_neighbors:") {
            let m: usize =
                m.parse().map_err(|_| Error::Config(format!("bad task rule {s:?}")))?;
            return Ok(TaskRule::SharedNeighbors(m));
        }
        Err(Error::Config(format!("unknown task rule {s:?}")))
    }
}

impl std::fmt::Display for TaskRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskRule::SameTopic => write!(f, "same_topic"),
            TaskRule::SharedNeighbors(m) => write!(f, "shared_neighbors:{m}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_topics: usize,
    pub tokens_per_node: usize,
    /// Probability of replacing a topic token with a uniform random byte.
    pub p_noise: f64,
    /// Probability of an observed edge between same-topic pairs.
    pub density: f64,
    pub task_rule: TaskRule,
    pub d_feat: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 100,
            n_topics: 10,
            tokens_per_node: 24,
            p_noise: 0.9,
            density: 0.5,
            task_rule: TaskRule::SharedNeighbors(2),
            d_feat: 32,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_topics == 0 || self.n_topics > self.n_nodes {
            return Err(Error::Config(format!(
                "n_topics {} must be in 1..={}",
                self.n_topics, self.n_nodes
            )));
        }
        if !(0.0..1.0).contains(&self.p_noise) {
            return Err(Error::Config(format!("p_noise {} must be in [0,1)", self.p_noise)));
        }
        if self.tokens_per_node == 0 {
            return Err(Error::Config("tokens_per_node must be positive".into()));
        }
        Ok(())
    }
}

pub fn topic_of(node: usize, n_topics: usize) -> usize {
    node % n_topics
}

/// Identity byte-to-token mapping, truncated to leave room for the graph
/// prompt and the [GRL] token.
pub fn tokenize(bytes: &[u8], max_seq: usize) -> Vec<u16> {
    let keep = max_seq.saturating_sub(2);
    bytes.iter().take(keep).map(|&b| b as u16).collect()
}

pub fn detokenize(tokens: &[u16]) -> Vec<u8> {
    tokens.iter().map(|&t| t as u8).collect()
}

/// L2-normalized byte histogram of each node's text, pushed through a
/// fixed seeded random projection to d_feat.
pub fn node_features(texts: &[Vec<u16>], d_feat: usize) -> Vec<Vec<f64>> {
    let mut rng = derive(FEATURE_PROJECTION_SEED, Stream::Features, d_feat as u64);
    let mut projection = vec![0.0f64; VOCAB_BYTES * d_feat];
    for w in projection.iter_mut() {
        *w = standard_normal(&mut rng) / (d_feat as f64).sqrt();
    }
    texts
        .iter()
        .map(|text| {
            let hist = normalized_histogram(text);
            let mut out = vec![0.0f64; d_feat];
            for (byte, &h) in hist.iter().enumerate() {
                if h != 0.0 {
                    let row = &projection[byte * d_feat..(byte + 1) * d_feat];
                    for (o, &p) in out.iter_mut().zip(row) {
                        *o += h * p;
                    }
                }
            }
            out
        })
        .collect()
}

/// Unit-norm token histogram over the byte vocabulary.
pub fn normalized_histogram(text: &[u16]) -> Vec<f64> {
    let mut hist = vec![0.0f64; VOCAB_BYTES];
    for &t in text {
        if (t as usize) < VOCAB_BYTES {
            hist[t as usize] += 1.0;
        }
    }
    let norm: f64 = hist.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for h in hist.iter_mut() {
            *h /= norm;
        }
    }
    hist
}

/// Generate a graph with edge types ["observed", "task"].
pub fn generate(config: &SynthConfig) -> Result<TextRichGraph> {
    config.validate()?;
    let n = config.n_nodes;
    let mut rng = derive(config.seed, Stream::GraphGen, 0);

    let alphabet_width = (VOCAB_BYTES / config.n_topics).max(1);
    let mut texts = Vec::with_capacity(n);
    for node in 0..n {
        let topic = topic_of(node, config.n_topics);
        let base = (topic * alphabet_width) % VOCAB_BYTES;
        let mut text = Vec::with_capacity(config.tokens_per_node);
        for _ in 0..config.tokens_per_node {
            let noisy = rng.gen_range(0.0..1.0) < config.p_noise;
            let byte = if noisy {
                rng.gen_range(0..VOCAB_BYTES)
            } else {
                base + rng.gen_range(0..alphabet_width)
            };
            text.push(byte as u16);
        }
        texts.push(text);
    }

    let mut observed: Vec<Edge> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if topic_of(i, config.n_topics) == topic_of(j, config.n_topics) {
                config.density
            } else {
                config.density * CROSS_TOPIC_RATIO
            };
            if rng.gen_range(0.0..1.0) < p {
                observed.push((i, j));
            }
        }
    }

    let task = match config.task_rule {
        TaskRule::SameTopic => {
            let mut edges = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if topic_of(i, config.n_topics) == topic_of(j, config.n_topics) {
                        edges.push((i, j));
                    }
                }
            }
            edges
        }
        TaskRule::SharedNeighbors(m) => shared_neighbor_edges(n, &observed, m),
    };
    if task.is_empty() {
        return Err(Error::Graph(format!(
            "config produced no task edges (n={n}, topics={}, density={}, rule={})",
            config.n_topics, config.density, config.task_rule
        )));
    }

    let features = node_features(&texts, config.d_feat);
    TextRichGraph::new(
        texts,
        features,
        vec!["observed".to_string(), "task".to_string()],
        vec![observed, task],
    )
}

/// All pairs with at least m common neighbors in the observed edge set.
pub fn shared_neighbor_edges(n: usize, observed: &[Edge], m: usize) -> Vec<Edge> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(i, j) in observed {
        adj[i].push(j);
        adj[j].push(i);
    }
    for l in adj.iter_mut() {
        l.sort_unstable();
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if sorted_intersection_count(&adj[i], &adj[j]) >= m {
                edges.push(normalize_edge(i, j));
            }
        }
    }
    edges
}

fn sorted_intersection_count(a: &[usize], b: &[usize]) -> usize {
    let (mut ia, mut ib, mut count) = (0, 0, 0);
    while ia < a.len() && ib < b.len() {
        match a[ia].cmp(&b[ib]) {
            std::cmp::Ordering::Less => ia += 1,
            std::cmp::Ordering::Greater => ib += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                ia += 1;
                ib += 1;
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::split_edges;

    #[test]
    fn generation_is_byte_for_byte_deterministic() {
        let cfg = SynthConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
        crate::graph::save_graph(&generate(&cfg).unwrap(), &p1).unwrap();
        crate::graph::save_graph(&generate(&cfg).unwrap(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let other = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(generate(&SynthConfig::default()).unwrap(), other);
    }

    #[test]
    fn generated_graphs_satisfy_the_type_invariants() {
        for seed in 0..3 {
            let cfg = SynthConfig { seed, n_nodes: 60, n_topics: 6, ..SynthConfig::default() };
            let g = generate(&cfg).unwrap();
            g.validate().unwrap();
            assert_eq!(g.edge_types, vec!["observed", "task"]);
            assert!(!g.edges[1].is_empty());
        }
    }

    #[test]
    fn tokenize_round_trips_and_truncates() {
        assert!(tokenize(&[], 64).is_empty());
        let bytes: Vec<u8> = (0..=255).collect();
        let toks = tokenize(&bytes, 300);
        assert_eq!(detokenize(&toks), bytes);
        // Truncation leaves room for the prompt position and [GRL].
        let toks = tokenize(&bytes, 64);
        assert_eq!(toks.len(), 62);
        assert_eq!(detokenize(&toks), bytes[..62]);
    }

    #[test]
    fn generated_token_lengths_fit_the_budget() {
        let cfg = SynthConfig { tokens_per_node: 62, ..SynthConfig::default() };
        let g = generate(&cfg).unwrap();
        for t in &g.texts {
            assert!(t.len() <= 62);
            assert!(!t.is_empty());
        }
    }

    #[test]
    fn identical_texts_give_identical_features_and_unit_histograms() {
        let texts = vec![vec![5u16, 9, 5, 200], vec![5u16, 9, 5, 200], vec![7u16]];
        let feats = node_features(&texts, 16);
        assert_eq!(feats[0], feats[1]);
        assert_ne!(feats[0], feats[2]);

        let hist = normalized_histogram(&texts[0]);
        let norm: f64 = hist.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_features_cluster_by_topic() {
        let cfg = SynthConfig {
            n_nodes: 200,
            n_topics: 8,
            tokens_per_node: 24,
            p_noise: 0.0,
            ..SynthConfig::default()
        };
        let g = generate(&cfg).unwrap();
        let mut pure = 0usize;
        for i in 0..g.n_nodes {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for j in 0..g.n_nodes {
                if i == j {
                    continue;
                }
                let dot: f64 =
                    g.features[i].iter().zip(&g.features[j]).map(|(a, b)| a * b).sum();
                if dot > best.0 {
                    best = (dot, j);
                }
            }
            if topic_of(i, cfg.n_topics) == topic_of(best.1, cfg.n_topics) {
                pure += 1;
            }
        }
        let purity = pure as f64 / g.n_nodes as f64;
        assert!(purity > 0.9, "nearest-neighbor topic purity {purity}");
    }

    /// Mutual information in bits between two binary variables.
    fn binary_mi(pairs: &[(bool, bool)]) -> f64 {
        let n = pairs.len() as f64;
        let mut joint = [[0.0f64; 2]; 2];
        for &(x, y) in pairs {
            joint[x as usize][y as usize] += 1.0;
        }
        let mut mi = 0.0;
        for x in 0..2 {
            for y in 0..2 {
                let pxy = joint[x][y] / n;
                if pxy == 0.0 {
                    continue;
                }
                let px = (joint[x][0] + joint[x][1]) / n;
                let py = (joint[0][y] + joint[1][y]) / n;
                mi += pxy * (pxy / (px * py)).log2();
            }
        }
        mi
    }

    #[test]
    fn high_noise_shared_neighbor_task_is_structural_not_textual() {
        let cfg = SynthConfig {
            n_nodes: 150,
            n_topics: 10,
            tokens_per_node: 24,
            p_noise: 0.9,
            density: 0.5,
            task_rule: TaskRule::SharedNeighbors(2),
            ..SynthConfig::default()
        };
        let g = generate(&cfg).unwrap();

        // Structure determines the task exactly: recompute independently.
        let recomputed = shared_neighbor_edges(g.n_nodes, &g.edges[0], 2);
        assert_eq!(recomputed, g.edges[1]);

        // Text similarity carries almost no information about task edges.
        let task: std::collections::HashSet<Edge> = g.edges[1].iter().copied().collect();
        let hists: Vec<Vec<f64>> = g.texts.iter().map(|t| normalized_histogram(t)).collect();
        let mut sims = Vec::new();
        for i in 0..g.n_nodes {
            for j in (i + 1)..g.n_nodes {
                let s: f64 = hists[i].iter().zip(&hists[j]).map(|(a, b)| a * b).sum();
                sims.push((s, (i, j)));
            }
        }
        let mut order: Vec<f64> = sims.iter().map(|x| x.0).collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = order[order.len() / 2];
        let text_pairs: Vec<(bool, bool)> =
            sims.iter().map(|&(s, e)| (s > median, task.contains(&e))).collect();
        let text_mi = binary_mi(&text_pairs);

        let structure_pairs: Vec<(bool, bool)> = sims
            .iter()
            .map(|&(_, e)| (task.contains(&e), task.contains(&e)))
            .collect();
        let structure_mi = binary_mi(&structure_pairs);

        assert!(text_mi < 0.05, "text MI {text_mi} bits");
        assert!(
            structure_mi > 5.0 * text_mi,
            "structure {structure_mi} vs text {text_mi}"
        );
    }

    #[test]
    fn histogram_scorer_is_near_chance_at_high_noise() {
        let cfg = SynthConfig {
            n_nodes: 200,
            n_topics: 10,
            tokens_per_node: 24,
            p_noise: 0.95,
            density: 0.5,
            task_rule: TaskRule::SharedNeighbors(2),
            seed: 3,
            ..SynthConfig::default()
        };
        let g = generate(&cfg).unwrap();
        let split = split_edges(&g, 1, 200, 50, 0).unwrap();
        let hists: Vec<f64> = g
            .texts
            .iter()
            .flat_map(|t| normalized_histogram(t))
            .collect();
        let emb = crate::eval::EmbeddingSet {
            node_ids: (0..g.n_nodes).collect(),
            d_model: VOCAB_BYTES,
            data: hists,
            checkpoint_id: String::new(),
        };
        let report = crate::eval::rank_metrics(&g, &split, &emb, 100, 0).unwrap();
        // A deterministic function of text alone degrades toward the
        // 1/(n_neg+1) floor as the text goes to noise.
        assert!(report.hit1 < 0.05, "text-only hit@1 {}", report.hit1);
    }

    #[test]
    fn impossible_task_rule_is_rejected_with_diagnostics() {
        let cfg = SynthConfig {
            n_nodes: 20,
            n_topics: 4,
            density: 0.01,
            task_rule: TaskRule::SharedNeighbors(8),
            ..SynthConfig::default()
        };
        let err = generate(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("no task edges"), "unhelpful diagnostic: {msg}");
    }

    #[test]
    fn task_rule_parsing_round_trips() {
        for rule in [TaskRule::SameTopic, TaskRule::SharedNeighbors(3)] {
            assert_eq!(TaskRule::parse(&rule.to_string()).unwrap(), rule);
        }
        assert!(TaskRule::parse("bogus").is_err());
    }
}
