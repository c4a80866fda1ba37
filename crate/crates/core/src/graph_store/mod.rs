//! Text-attributed graphs, the multi-graph corpus and its global node index.
//!
//! Graphs are stored as undirected CSR adjacency with sorted, duplicate-free
//! neighbor lists. A [`TagCorpus`] concatenates graphs in ingestion order and
//! assigns every node a [`GlobalNodeIndex`] equal to its local id plus the
//! number of nodes in all preceding graphs.

mod io;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    ingest_graph, load_corpus, load_graphs, read_edges, read_manifest, read_nodes, write_graph,
    write_manifest, ManifestEntry, NodeRecord,
};

/// Separator placed between a node's own text and its context description.
pub const TEXT_SEPARATOR: &str = " [SEP] ";

/// Position of a node in the corpus-wide embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GlobalNodeIndex(pub usize);

impl GlobalNodeIndex {
    #[inline]
    pub fn value(self) -> usize {
        self.0
    }
}

impl fmt::Display for GlobalNodeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A single graph whose nodes carry free text.
#[derive(Debug, Clone, PartialEq)]
pub struct TextAttributedGraph {
    graph_id: String,
    domain_text: String,
    node_texts: Vec<String>,
    labels: Vec<Option<u32>>,
    row_offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl TextAttributedGraph {
    /// Builds a graph from texts, optional labels and an edge list.
    ///
    /// Edges are symmetrized and deduplicated; `(u, v)` and `(v, u)` describe
    /// the same undirected edge. Self-loops and out-of-range endpoints are
    /// rejected.
    pub fn new(
        graph_id: impl Into<String>,
        domain_text: impl Into<String>,
        node_texts: Vec<String>,
        labels: Vec<Option<u32>>,
        edges: &[(usize, usize)],
    ) -> Result<Self> {
        let n = node_texts.len();
        if labels.len() != n {
            return Err(Error::Validation(format!(
                "{} labels given for {} nodes",
                labels.len(),
                n
            )));
        }
        if n > u32::MAX as usize {
            return Err(Error::Validation(format!("too many nodes: {n}")));
        }
        let mut pairs = Vec::with_capacity(edges.len());
        for (i, &(u, v)) in edges.iter().enumerate() {
            if u >= n || v >= n {
                return Err(Error::Validation(format!(
                    "edge {i} ({u}, {v}) references a node outside 0..{n}"
                )));
            }
            if u == v {
                return Err(Error::Validation(format!("edge {i} is a self-loop on node {u}")));
            }
            pairs.push((u.min(v), u.max(v)));
        }
        pairs.sort_unstable();
        pairs.dedup();
        let (row_offsets, neighbors) = build_csr(n, &pairs);
        Ok(Self {
            graph_id: graph_id.into(),
            domain_text: domain_text.into(),
            node_texts,
            labels,
            row_offsets,
            neighbors,
        })
    }

    pub fn graph_id(&self) -> &str {
        &self.graph_id
    }

    pub fn domain_text(&self) -> &str {
        &self.domain_text
    }

    #[inline]
    pub fn node_count(&self) -> usize {
        self.node_texts.len()
    }

    /// Number of undirected edges.
    #[inline]
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Sorted neighbor list of `v`.
    #[inline]
    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.neighbors[self.row_offsets[v]..self.row_offsets[v + 1]]
    }

    #[inline]
    pub fn degree(&self, v: usize) -> usize {
        self.row_offsets[v + 1] - self.row_offsets[v]
    }

    /// Average degree `2|E| / n` (zero for an empty graph).
    pub fn average_degree(&self) -> f64 {
        if self.node_count() == 0 {
            0.0
        } else {
            self.neighbors.len() as f64 / self.node_count() as f64
        }
    }

    pub fn max_degree(&self) -> usize {
        (0..self.node_count()).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.node_count()
            && v < self.node_count()
            && self.neighbors(u).binary_search(&(v as u32)).is_ok()
    }

    #[inline]
    pub fn text(&self, v: usize) -> &str {
        &self.node_texts[v]
    }

    pub fn node_texts(&self) -> &[String] {
        &self.node_texts
    }

    #[inline]
    pub fn label(&self, v: usize) -> Option<u32> {
        self.labels[v]
    }

    pub fn labels(&self) -> &[Option<u32>] {
        &self.labels
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.iter().any(Option::is_some)
    }

    /// One more than the largest label, or zero when unlabeled.
    pub fn num_classes(&self) -> usize {
        self.labels
            .iter()
            .flatten()
            .max()
            .map_or(0, |&c| c as usize + 1)
    }

    /// Undirected edges as `(u, v)` with `u < v`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.node_count()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .map(|&v| v as usize)
                .filter(move |&v| v > u)
                .map(move |v| (u, v))
        })
    }

    /// Same nodes and texts with a different edge set.
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        Self::new(
            self.graph_id.clone(),
            self.domain_text.clone(),
            self.node_texts.clone(),
            self.labels.clone(),
            edges,
        )
    }

    /// Node-status sentence used in the context description.
    pub fn status_sentence(&self, v: usize) -> String {
        format!(
            "This node has {} connected neighbors and the average degree of this graph is {:.2}.",
            self.degree(v),
            self.average_degree()
        )
    }

    pub fn context_description(&self, v: usize) -> String {
        let status = self.status_sentence(v);
        if self.domain_text.is_empty() {
            status
        } else {
            format!("{} {}", self.domain_text, status)
        }
    }

    pub fn anchor_text(&self, v: usize) -> String {
        format!("{}{}{}", self.text(v), TEXT_SEPARATOR, self.context_description(v))
    }
}

fn build_csr(n: usize, pairs: &[(usize, usize)]) -> (Vec<usize>, Vec<u32>) {
    let mut degree = vec![0usize; n];
    for &(u, v) in pairs {
        degree[u] += 1;
        degree[v] += 1;
    }
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for d in &degree {
        offsets.push(offsets.last().unwrap() + d);
    }
    let mut cursor = offsets[..n].to_vec();
    let mut neighbors = vec![0u32; offsets[n]];
    // Pairs are sorted by (min, max), so each row is filled in ascending order
    // except for entries smaller than the row id, which arrive first from the
    // second coordinate. Sort rows afterwards.
    for &(u, v) in pairs {
        neighbors[cursor[u]] = v as u32;
        cursor[u] += 1;
        neighbors[cursor[v]] = u as u32;
        cursor[v] += 1;
    }
    for v in 0..n {
        neighbors[offsets[v]..offsets[v + 1]].sort_unstable();
    }
    (offsets, neighbors)
}

/// An ordered collection of graphs addressed through one global node index.
#[derive(Debug, Clone, PartialEq)]
pub struct TagCorpus {
    graphs: Vec<TextAttributedGraph>,
    offsets: Vec<usize>,
}

impl TagCorpus {
    /// Builds a corpus; graph ids must be distinct and the list non-empty.
    pub fn new(graphs: Vec<TextAttributedGraph>) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Validation("corpus must contain at least one graph".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for g in &graphs {
            if !seen.insert(g.graph_id()) {
                return Err(Error::Validation(format!("duplicate graph id {:?}", g.graph_id())));
            }
        }
        let mut offsets = Vec::with_capacity(graphs.len() + 1);
        offsets.push(0);
        for g in &graphs {
            offsets.push(offsets.last().unwrap() + g.node_count());
        }
        Ok(Self { graphs, offsets })
    }

    pub fn graphs(&self) -> &[TextAttributedGraph] {
        &self.graphs
    }

    pub fn graph(&self, i: usize) -> &TextAttributedGraph {
        &self.graphs[i]
    }

    pub fn num_graphs(&self) -> usize {
        self.graphs.len()
    }

    /// Prefix sums of graph sizes; `offsets()[i]` is the first global index of graph `i`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn total_nodes(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn graph_position(&self, graph_id: &str) -> Option<usize> {
        self.graphs.iter().position(|g| g.graph_id() == graph_id)
    }

    pub fn global_index(&self, graph: usize, local: usize) -> Result<GlobalNodeIndex> {
        let g = self.graphs.get(graph).ok_or_else(|| {
            Error::OutOfRange(format!("graph {graph} (corpus has {})", self.graphs.len()))
        })?;
        if local >= g.node_count() {
            return Err(Error::OutOfRange(format!(
                "local node {local} in graph {graph} of size {}",
                g.node_count()
            )));
        }
        Ok(GlobalNodeIndex(local + self.offsets[graph]))
    }

    /// Inverse of [`global_index`](Self::global_index): `(graph, local)`.
    pub fn decompose(&self, v: GlobalNodeIndex) -> Result<(usize, usize)> {
        if v.0 >= self.total_nodes() {
            return Err(Error::OutOfRange(format!(
                "global node {v} (corpus has {} nodes)",
                self.total_nodes()
            )));
        }
        // Last graph whose first index is <= v; empty graphs share an offset
        // with their successor and are skipped.
        let graph = self.offsets.partition_point(|&o| o <= v.0) - 1;
        Ok((graph, v.0 - self.offsets[graph]))
    }

    /// Global indices of all nodes of graph `i`.
    pub fn graph_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn text(&self, v: GlobalNodeIndex) -> Result<&str> {
        let (g, l) = self.decompose(v)?;
        Ok(self.graphs[g].text(l))
    }

    /// All node texts in global-index order.
    pub fn texts(&self) -> impl Iterator<Item = &str> + '_ {
        self.graphs.iter().flat_map(|g| g.node_texts().iter().map(String::as_str))
    }

    /// Domain description of `v`'s graph followed by its node-status sentence.
    pub fn context_description(&self, v: GlobalNodeIndex) -> Result<String> {
        let (g, l) = self.decompose(v)?;
        Ok(self.graphs[g].context_description(l))
    }

    /// Node text joined with its context description, the input used to
    /// initialize selection tables.
    pub fn anchor_text(&self, v: GlobalNodeIndex) -> Result<String> {
        let (g, l) = self.decompose(v)?;
        Ok(self.graphs[g].anchor_text(l))
    }
}
