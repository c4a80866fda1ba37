//! Nodes / edges / manifest file formats.
//!
//! * nodes: JSON Lines, `{"id": <int>, "text": <string>, "label": <int|null>}` in id order
//! * edges: one `u<TAB>v` pair per line, 0-based
//! * manifest: JSON Lines, `{"graph_id", "nodes", "edges", "domain_text"}`;
//!   relative paths resolve against the manifest's directory

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TagCorpus, TextAttributedGraph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub text: String,
    #[serde(default)]
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub graph_id: String,
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub domain_text: String,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a nodes file, requiring ids `0, 1, 2, ...` in order.
pub fn read_nodes(path: &Path) -> Result<Vec<NodeRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NodeRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if rec.id != out.len() {
            return Err(Error::Validation(format!(
                "{}:{lineno}: node id {} out of order (expected {})",
                path.display(),
                rec.id,
                out.len()
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reads an edges file as raw `(u, v)` pairs; no range checks.
pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(path, lineno, "expected two tab-separated node ids"));
        };
        let u = a
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(path, lineno, format!("bad node id {a:?}: {e}")))?;
        let v = b
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(path, lineno, format!("bad node id {b:?}: {e}")))?;
        out.push((u, v));
    }
    Ok(out)
}

/// Loads and validates one graph from its nodes and edges files.
pub fn ingest_graph(
    graph_id: &str,
    nodes_path: &Path,
    edges_path: &Path,
    domain_text: &str,
) -> Result<TextAttributedGraph> {
    let nodes = read_nodes(nodes_path)?;
    let edges = read_edges(edges_path)?;
    let n = nodes.len();
    for (i, &(u, v)) in edges.iter().enumerate() {
        if u >= n || v >= n {
            return Err(Error::Validation(format!(
                "{}: edge #{} ({u}, {v}) references unknown node (graph has {n})",
                edges_path.display(),
                i + 1
            )));
        }
        if u == v {
            return Err(Error::Validation(format!(
                "{}: edge #{} is a self-loop on node {u}",
                edges_path.display(),
                i + 1
            )));
        }
    }
    let (texts, labels) = nodes.into_iter().map(|r| (r.text, r.label)).unzip();
    TextAttributedGraph::new(graph_id, domain_text, texts, labels, &edges)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        if entry.nodes.is_relative() {
            entry.nodes = base.join(&entry.nodes);
        }
        if entry.edges.is_relative() {
            entry.edges = base.join(&entry.edges);
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn load_graphs(entries: &[ManifestEntry]) -> Result<Vec<TextAttributedGraph>> {
    entries
        .iter()
        .map(|e| ingest_graph(&e.graph_id, &e.nodes, &e.edges, &e.domain_text))
        .collect()
}

pub fn load_corpus(manifest: &Path) -> Result<TagCorpus> {
    TagCorpus::new(load_graphs(&read_manifest(manifest)?)?)
}

/// Writes `<dir>/<graph_id>.nodes.jsonl` and `<dir>/<graph_id>.edges.tsv`;
/// the returned entry uses file names relative to `dir`.
pub fn write_graph(dir: &Path, graph: &TextAttributedGraph) -> Result<ManifestEntry> {
    let nodes_name = format!("{}.nodes.jsonl", graph.graph_id());
    let edges_name = format!("{}.edges.tsv", graph.graph_id());

    let mut w = BufWriter::new(File::create(dir.join(&nodes_name))?);
    for v in 0..graph.node_count() {
        let rec = NodeRecord {
            id: v,
            text: graph.text(v).to_string(),
            label: graph.label(v),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join(&edges_name))?);
    for (u, v) in graph.edges() {
        writeln!(w, "{u}\t{v}")?;
    }
    w.flush()?;

    Ok(ManifestEntry {
        graph_id: graph.graph_id().to_string(),
        nodes: nodes_name.into(),
        edges: edges_name.into(),
        domain_text: graph.domain_text().to_string(),
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
