//! Plain-text graph and split files.
//!
//! Graph file: one header line `N d_feat n_types`, then N token-id lines,
//! then N feature lines, then per type a `edges <name> <count>` header
//! followed by `i j` lines. Features print with Rust's shortest round-trip
//! float formatting, so a save/load cycle is bit-exact.
//!
//! Split file: `split <task_type_name>` then one `i j {train|val|test}`
//! line per task edge.

use super::{Edge, EdgeSplit, TextRichGraph};
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

pub fn save_graph(graph: &TextRichGraph, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{} {} {}", graph.n_nodes, graph.d_feat, graph.edge_types.len());
    for text in &graph.texts {
        let line: Vec<String> = text.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    for feat in &graph.features {
        let line: Vec<String> = feat.iter().map(|f| f.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    for (name, list) in graph.edge_types.iter().zip(&graph.edges) {
        let _ = writeln!(out, "edges {} {}", name, list.len());
        for &(i, j) in list {
            let _ = writeln!(out, "{i} {j}");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<TextRichGraph> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines();
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| Error::Parse(format!("graph file ended before {what}")))
    };

    let header = next("header")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::Parse(format!("bad graph header {header:?}")));
    }
    let n_nodes: usize = parse(fields[0], "node count")?;
    let d_feat: usize = parse(fields[1], "feature width")?;
    let n_types: usize = parse(fields[2], "edge type count")?;

    let mut texts = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let line = next(&format!("tokens of node {i}"))?;
        let toks: Vec<u16> =
            line.split_whitespace().map(|t| parse(t, "token id")).collect::<Result<_>>()?;
        texts.push(toks);
    }
    let mut features = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let line = next(&format!("features of node {i}"))?;
        let f: Vec<f64> =
            line.split_whitespace().map(|t| parse(t, "feature")).collect::<Result<_>>()?;
        if f.len() != d_feat {
            return Err(Error::Parse(format!(
                "node {i} has {} features, header says {d_feat}",
                f.len()
            )));
        }
        features.push(f);
    }
    let mut edge_types = Vec::with_capacity(n_types);
    let mut edges = Vec::with_capacity(n_types);
    for t in 0..n_types {
        let line = next(&format!("edge header {t}"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != "edges" {
            return Err(Error::Parse(format!("bad edge header {line:?}")));
        }
        edge_types.push(fields[1].to_string());
        let count: usize = parse(fields[2], "edge count")?;
        let mut list = Vec::with_capacity(count);
        for _ in 0..count {
            list.push(parse_edge(next("edge")?)?);
        }
        edges.push(list);
    }
    TextRichGraph::new(texts, features, edge_types, edges)
}

pub fn save_split(split: &EdgeSplit, task_type_name: &str, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "split {task_type_name}");
    for &(i, j) in &split.train {
        let _ = writeln!(out, "{i} {j} train");
    }
    for &(i, j) in &split.val {
        let _ = writeln!(out, "{i} {j} val");
    }
    for &(i, j) in &split.test {
        let _ = writeln!(out, "{i} {j} test");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_split(graph: &TextRichGraph, path: &Path) -> Result<EdgeSplit> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty split file".into()))?;
    let name = header
        .strip_prefix("split ")
        .ok_or_else(|| Error::Parse(format!("bad split header {header:?}")))?;
    let task_type = graph.edge_type_index(name.trim())?;

    let mut split =
        EdgeSplit { task_type, train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!("bad split line {line:?}")));
        }
        let edge = (parse(fields[0], "edge endpoint")?, parse(fields[1], "edge endpoint")?);
        match fields[2] {
            "train" => split.train.push(edge),
            "val" => split.val.push(edge),
            "test" => split.test.push(edge),
            tag => return Err(Error::Parse(format!("unknown split tag {tag:?}"))),
        }
    }
    split.validate(graph)?;
    Ok(split)
}

fn parse<T: std::str::FromStr>(token: &str, what: &str) -> Result<T> {
    token.parse().map_err(|_| Error::Parse(format!("bad {what}: {token:?}")))
}

fn parse_edge(line: &str) -> Result<Edge> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 2 {
        return Err(Error::Parse(format!("bad edge line {line:?}")));
    }
    Ok((parse(fields[0], "edge endpoint")?, parse(fields[1], "edge endpoint")?))
}
