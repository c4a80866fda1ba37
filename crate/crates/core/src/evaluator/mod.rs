//! Downstream evaluation of frozen embeddings: linear-probe node
//! classification, link prediction against sampled non-edges, and transfer
//! to graphs unseen during training.

pub mod metrics;
pub mod probe;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::encoder::{EncoderParams, HashFeatureEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::graph_store::TextAttributedGraph;

pub use metrics::{average_precision, hits_at_k, roc_auc};
pub use probe::{LinearProbe, ProbeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Node,
    Edge,
}

/// Train/val/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub const NODE_DEFAULT: [f64; 3] = [0.05, 0.20, 0.75];
    pub const EDGE_DEFAULT: [f64; 3] = [0.85, 0.10, 0.05];
    /// The 5:10:85 ratio read literally as train:val:test.
    pub const EDGE_LITERAL: [f64; 3] = [0.05, 0.10, 0.85];

    pub fn new(kind: SplitKind, ratios: [f64; 3], seed: u64) -> Result<Self> {
        let s = Self { kind, ratios, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config(format!("split ratios must be non-negative: {:?}", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Parses `a:b:c`, normalizing by the sum (so `5:20:75` works).
pub fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("invalid ratio {p:?}"))))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Config(format!("expected three ratios, got {s:?}")));
    }
    let sum: f64 = parts.iter().sum();
    if !(sum > 0.0) || parts.iter().any(|p| *p < 0.0) {
        return Err(Error::Config(format!("invalid ratios {s:?}")));
    }
    Ok([parts[0] / sum, parts[1] / sum, parts[2] / sum])
}

fn split_sizes(n: usize, ratios: [f64; 3]) -> (usize, usize) {
    let train = ((ratios[0] * n as f64).round() as usize).min(n);
    let val = ((ratios[1] * n as f64).round() as usize).min(n - train);
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles the labeled nodes and cuts them by `ratios`; the test split takes
/// the remainder.
pub fn split_nodes(graph: &TextAttributedGraph, ratios: [f64; 3], seed: u64) -> Result<NodeSplit> {
    SplitSpec::new(SplitKind::Node, ratios, seed)?;
    let mut labeled: Vec<usize> = (0..graph.node_count()).filter(|&v| graph.label(v).is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::Validation(format!("graph {} has no labeled nodes", graph.graph_id())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labeled.shuffle(&mut rng);
    let (nt, nv) = split_sizes(labeled.len(), ratios);
    let test = labeled.split_off(nt + nv);
    let val = labeled.split_off(nt);
    let split = NodeSplit {
        train: labeled,
        val,
        test,
    };
    let present: HashSet<u32> = split.train.iter().filter_map(|&v| graph.label(v)).collect();
    let all: HashSet<u32> = (0..graph.node_count()).filter_map(|v| graph.label(v)).collect();
    if present.len() < all.len() {
        log::warn!(
            "graph {}: {} of {} classes absent from the training split",
            graph.graph_id(),
            all.len() - present.len(),
            all.len()
        );
    }
    Ok(split)
}

#[derive(Debug, Clone)]
pub struct EdgeSplit {
    /// The graph with validation and test edges removed.
    pub train_graph: TextAttributedGraph,
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub train_neg: Vec<(usize, usize)>,
    pub val_neg: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
}

/// Partitions the edges by `ratios` and draws, per split, as many distinct
/// non-edges as positives.
pub fn split_edges(graph: &TextAttributedGraph, ratios: [f64; 3], seed: u64) -> Result<EdgeSplit> {
    SplitSpec::new(SplitKind::Edge, ratios, seed)?;
    let mut edges: Vec<(usize, usize)> = graph.edges().collect();
    if edges.is_empty() {
        return Err(Error::Validation(format!("graph {} has no edges to split", graph.graph_id())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let (nt, nv) = split_sizes(edges.len(), ratios);
    let test = edges.split_off(nt + nv);
    let val = edges.split_off(nt);
    let mut train = edges;

    let n = graph.node_count();
    let needed = train.len() + val.len() + test.len();
    let non_edges = n * n.saturating_sub(1) / 2 - graph.edge_count();
    let mut taken: HashSet<(usize, usize)> = HashSet::with_capacity(needed);
    let mut negatives = Vec::with_capacity(needed);
    let limit = 100 * needed;
    let mut attempts = 0;
    while negatives.len() < needed {
        if attempts >= limit || n < 2 || non_edges < needed {
            return Err(Error::Validation(format!(
                "graph {} too dense: found {} of {needed} negatives after {attempts} draws",
                graph.graph_id(),
                negatives.len()
            )));
        }
        attempts += 1;
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v || graph.has_edge(u, v) {
            continue;
        }
        let pair = (u.min(v), u.max(v));
        if taken.insert(pair) {
            negatives.push(pair);
        }
    }
    let test_neg = negatives.split_off(train.len() + val.len());
    let val_neg = negatives.split_off(train.len());
    let train_neg = negatives;
    train.sort_unstable();
    let train_graph = graph.with_edges(&train)?;
    Ok(EdgeSplit {
        train_graph,
        train,
        val,
        test,
        train_neg,
        val_neg,
        test_neg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn summarize(values: &[f64]) -> MetricSummary {
    if values.is_empty() {
        return MetricSummary { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricSummary {
        mean,
        std: var.max(0.0).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub runs: usize,
}

impl EvalReport {
    /// Aggregates per-run metric maps, which must share their keys.
    pub fn from_runs(task: impl Into<String>, runs: &[BTreeMap<String, f64>]) -> Self {
        let mut metrics = BTreeMap::new();
        if let Some(first) = runs.first() {
            for name in first.keys() {
                let vals: Vec<f64> = runs.iter().map(|r| r[name]).collect();
                metrics.insert(name.clone(), summarize(&vals));
            }
        }
        Self {
            task: task.into(),
            metrics,
            runs: runs.len(),
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|m| m.mean)
    }

    /// Copies `other`'s metrics in under `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &EvalReport) {
        for (k, v) in &other.metrics {
            self.metrics.insert(format!("{prefix}.{k}"), *v);
        }
        self.runs = self.runs.max(other.runs);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Embeds each node's text joined with its context description.
pub fn embed_graph(encoder: &dyn TextEncoder, graph: &TextAttributedGraph) -> Result<Vec<Vec<f64>>> {
    (0..graph.node_count())
        .into_par_iter()
        .map(|v| encoder.encode(&graph.anchor_text(v)))
        .collect()
}

fn probe_rows<'a>(embeddings: &'a [Vec<f64>], ids: &[usize]) -> Vec<&'a [f64]> {
    ids.iter().map(|&v| embeddings[v].as_slice()).collect()
}

fn labels_of(graph: &TextAttributedGraph, ids: &[usize]) -> Vec<u32> {
    ids.iter().map(|&v| graph.label(v).expect("split holds labeled nodes")).collect()
}

/// Test accuracy of a probe fitted on one split, early-stopped on the
/// validation accuracy.
pub fn probe_accuracy(
    embeddings: &[Vec<f64>],
    graph: &TextAttributedGraph,
    split: &NodeSplit,
    config: &ProbeConfig,
) -> Result<f64> {
    if embeddings.len() != graph.node_count() {
        return Err(Error::Validation(format!(
            "{} embeddings for {} nodes",
            embeddings.len(),
            graph.node_count()
        )));
    }
    let classes = graph.num_classes();
    let train_rows = probe_rows(embeddings, &split.train);
    let train_y = labels_of(graph, &split.train);
    let val_rows = probe_rows(embeddings, &split.val);
    let val_y = labels_of(graph, &split.val);
    let mut select = |m: &LinearProbe| m.accuracy(&val_rows, &val_y);
    let selector: Option<&mut dyn FnMut(&LinearProbe) -> f64> = if split.val.is_empty() {
        None
    } else {
        Some(&mut select)
    };
    let probe = LinearProbe::fit(&train_rows, &train_y, classes, config, selector)?;
    let test_rows = probe_rows(embeddings, &split.test);
    Ok(probe.accuracy(&test_rows, &labels_of(graph, &split.test)))
}

/// Linear-probe accuracy over one node split per seed.
pub fn linear_probe_nc(
    embeddings: &[Vec<f64>],
    graph: &TextAttributedGraph,
    ratios: [f64; 3],
    seeds: &[u64],
    config: &ProbeConfig,
) -> Result<EvalReport> {
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let split = split_nodes(graph, ratios, seed)?;
            let acc = probe_accuracy(embeddings, graph, &split, config)?;
            Ok(BTreeMap::from([("accuracy".to_string(), acc)]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_runs("node_classification", &runs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkPredConfig {
    pub hits_k: usize,
    pub probe: ProbeConfig,
}

impl Default for LinkPredConfig {
    fn default() -> Self {
        Self {
            hits_k: 100,
            probe: ProbeConfig::default(),
        }
    }
}

fn hadamard(embeddings: &[Vec<f64>], (u, v): (usize, usize)) -> Vec<f64> {
    embeddings[u].iter().zip(&embeddings[v]).map(|(a, b)| a * b).collect()
}

fn pair_set(embeddings: &[Vec<f64>], pos: &[(usize, usize)], neg: &[(usize, usize)]) -> (Vec<Vec<f64>>, Vec<u32>) {
    let mut rows: Vec<Vec<f64>> = pos.iter().map(|&p| hadamard(embeddings, p)).collect();
    rows.extend(neg.iter().map(|&p| hadamard(embeddings, p)));
    let mut labels = vec![1u32; pos.len()];
    labels.extend(std::iter::repeat_n(0u32, neg.len()));
    (rows, labels)
}

/// AUC, AP and Hits@K of a logistic head over Hadamard pair features.
/// `embeddings` must be computed on `split.train_graph`.
pub fn link_pred_eval(
    embeddings: &[Vec<f64>],
    split: &EdgeSplit,
    config: &LinkPredConfig,
) -> Result<BTreeMap<String, f64>> {
    let (train_rows, train_y) = pair_set(embeddings, &split.train, &split.train_neg);
    let (val_rows, val_y) = pair_set(embeddings, &split.val, &split.val_neg);
    let train_refs: Vec<&[f64]> = train_rows.iter().map(Vec::as_slice).collect();
    let val_refs: Vec<&[f64]> = val_rows.iter().map(Vec::as_slice).collect();
    let score = |m: &LinearProbe, row: &[f64]| {
        let l = m.logits(row);
        l[1] - l[0]
    };
    let mut select = |m: &LinearProbe| {
        let (p, n): (Vec<_>, Vec<_>) = val_refs.iter().zip(&val_y).partition(|(_, &y)| y == 1);
        let p: Vec<f64> = p.iter().map(|(r, _)| score(m, r)).collect();
        let n: Vec<f64> = n.iter().map(|(r, _)| score(m, r)).collect();
        roc_auc(&p, &n)
    };
    let selector: Option<&mut dyn FnMut(&LinearProbe) -> f64> = if split.val.is_empty() {
        None
    } else {
        Some(&mut select)
    };
    let head = LinearProbe::fit(&train_refs, &train_y, 2, &config.probe, selector)?;
    let pos: Vec<f64> = split.test.iter().map(|&p| score(&head, &hadamard(embeddings, p))).collect();
    let neg: Vec<f64> = split.test_neg.iter().map(|&p| score(&head, &hadamard(embeddings, p))).collect();
    let k = config.hits_k.min(split.test.len()).max(1);
    Ok(BTreeMap::from([
        ("auc".to_string(), roc_auc(&pos, &neg)),
        ("ap".to_string(), average_precision(&pos, &neg)),
        ("hits".to_string(), hits_at_k(&pos, &neg, k)),
    ]))
}

/// Link prediction over one edge split per seed; the encoder embeds each
/// masked training graph.
pub fn link_prediction(
    encoder: &dyn TextEncoder,
    graph: &TextAttributedGraph,
    ratios: [f64; 3],
    seeds: &[u64],
    config: &LinkPredConfig,
) -> Result<EvalReport> {
    let runs = seeds
        .iter()
        .map(|&seed| {
            let split = split_edges(graph, ratios, seed)?;
            let emb = embed_graph(encoder, &split.train_graph)?;
            link_pred_eval(&emb, &split, config)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_runs("link_prediction", &runs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    InDomain,
    CrossDomain,
}

impl std::str::FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_domain" => Ok(Self::InDomain),
            "cross_domain" => Ok(Self::CrossDomain),
            _ => Err(Error::Config(format!("unknown transfer mode {s:?}"))),
        }
    }
}

/// Indices of the `(graph_id, domain_text)` entries usable for training
/// when `held_out` is evaluated. Cross-domain also drops every graph that
/// shares the held-out graph's domain text.
pub fn training_selection(entries: &[(&str, &str)], held_out: (&str, &str), mode: TransferMode) -> Vec<usize> {
    entries
        .iter()
        .enumerate()
        .filter(|(_, (id, domain))| {
            *id != held_out.0 && (mode == TransferMode::InDomain || *domain != held_out.1)
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    pub node_ratios: [f64; 3],
    pub edge_ratios: [f64; 3],
    pub seeds: Vec<u64>,
    pub probe: ProbeConfig,
    pub link: LinkPredConfig,
    pub link_prediction: bool,
    pub feature_dim: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            node_ratios: SplitSpec::NODE_DEFAULT,
            edge_ratios: SplitSpec::EDGE_DEFAULT,
            seeds: (0..5).collect(),
            probe: ProbeConfig::default(),
            link: LinkPredConfig::default(),
            link_prediction: true,
            feature_dim: crate::encoder::EncoderConfig::default().feature_dim,
        }
    }
}

/// Probe (and optionally link prediction) on a held-out graph for the
/// trained encoder, the optional initial encoder, and raw hashed features.
/// Metrics are keyed `trained.*`, `init.*` and `hash.*`.
pub fn transfer_eval(
    trained: &EncoderParams,
    init: Option<&EncoderParams>,
    held_out: &TextAttributedGraph,
    config: &TransferConfig,
) -> Result<EvalReport> {
    let hash = HashFeatureEncoder {
        feature_dim: config.feature_dim,
    };
    let mut encoders: Vec<(&str, &dyn TextEncoder)> = vec![("trained", trained)];
    if let Some(f0) = init {
        encoders.push(("init", f0));
    }
    encoders.push(("hash", &hash));
    let mut report = EvalReport {
        task: "transfer".into(),
        metrics: BTreeMap::new(),
        runs: config.seeds.len(),
    };
    for (name, enc) in encoders {
        if held_out.is_labeled() {
            let emb = embed_graph(enc, held_out)?;
            let nc = linear_probe_nc(&emb, held_out, config.node_ratios, &config.seeds, &config.probe)?;
            report.merge_prefixed(name, &nc);
        }
        if config.link_prediction && held_out.edge_count() > 0 {
            let lp = link_prediction(enc, held_out, config.edge_ratios, &config.seeds, &config.link)?;
            report.merge_prefixed(name, &lp);
        }
    }
    Ok(report)
}

const EMB_MAGIC: &[u8; 4] = b"UEMB";

/// Layout: magic `UEMB`, u32 n, u32 d, row-major f32.
pub fn write_embeddings<W: Write>(w: &mut W, rows: &[Vec<f64>]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Validation("embedding rows differ in width".into()));
    }
    binio::write_magic(w, EMB_MAGIC)?;
    binio::write_u32(w, binio::len_u32(rows.len(), "embedding rows")?)?;
    binio::write_u32(w, binio::len_u32(d, "embedding dim")?)?;
    for r in rows {
        for &x in r {
            binio::write_f32(w, x as f32)?;
        }
    }
    Ok(())
}

pub fn read_embeddings<R: Read>(r: &mut R) -> Result<Vec<Vec<f64>>> {
    binio::expect_magic(r, EMB_MAGIC)?;
    let n = binio::read_u32(r)? as usize;
    let d = binio::read_u32(r)? as usize;
    let rows = (0..n)
        .map(|_| (0..d).map(|_| binio::read_f32(r).map(f64::from)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    binio::expect_eof(r)?;
    Ok(rows)
}

pub fn save_embeddings(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<Vec<f64>>> {
    read_embeddings(&mut BufReader::new(File::open(path)?))
}
