//! Personalized PageRank by forward push.
//!
//! Push maintains an estimate `p` and residual `r` with the invariant
//! `ppr(s) = p + Σ_u r[u] · ppr(u)`. A node is pushed while
//! `r[u] >= epsilon · deg(u)`; on an undirected graph this bounds the final
//! per-node error by `epsilon · deg(v)`. Pushes run in rounds over the
//! queue of active nodes in ascending id order, so the result is a
//! deterministic function of the graph.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::graph_store::{GlobalNodeIndex, TextAttributedGraph};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PprConfig {
    /// Teleport probability back to the source at every step.
    pub restart_prob: f64,
    /// Residual threshold per unit of degree.
    pub epsilon: f64,
}

impl Default for PprConfig {
    fn default() -> Self {
        Self {
            restart_prob: 0.15,
            epsilon: 1e-4,
        }
    }
}

impl PprConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.restart_prob > 0.0 && self.restart_prob < 1.0) {
            return Err(Error::Config(format!(
                "restart_prob must be in (0, 1), got {}",
                self.restart_prob
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Sparse PPR vector of one source, sorted by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct PprScores {
    pub source: usize,
    pub restart_prob: f64,
    pub epsilon: f64,
    entries: Vec<(u32, f64)>,
}

impl PprScores {
    pub fn from_entries(source: usize, config: PprConfig, mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_by_key(|&(id, _)| id);
        Self {
            source,
            restart_prob: config.restart_prob,
            epsilon: config.epsilon,
            entries,
        }
    }

    /// Score of `node`, zero when it was never reached.
    pub fn get(&self, node: usize) -> f64 {
        self.entries
            .binary_search_by_key(&(node as u32), |&(id, _)| id)
            .map_or(0.0, |i| self.entries[i].1)
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|&(_, s)| s).sum()
    }
}

/// Approximate PPR of `source` via forward push.
pub fn personalized_pagerank(
    graph: &TextAttributedGraph,
    source: usize,
    config: PprConfig,
) -> Result<PprScores> {
    config.validate()?;
    if source >= graph.node_count() {
        return Err(Error::OutOfRange(format!(
            "PPR source {source} in graph of size {}",
            graph.node_count()
        )));
    }
    if graph.degree(source) == 0 {
        return Ok(PprScores::from_entries(source, config, vec![(source as u32, 1.0)]));
    }

    let alpha = config.restart_prob;
    let eps = config.epsilon;
    let mut estimate: HashMap<u32, f64> = HashMap::new();
    let mut residual: HashMap<u32, f64> = HashMap::new();
    residual.insert(source as u32, 1.0);
    let mut frontier = vec![source as u32];

    // Each round snapshots the residuals of every node over threshold and
    // pushes them in ascending id order; mass deposited during a round is
    // only considered in the next one, which keeps symmetric nodes exactly
    // equal.
    while !frontier.is_empty() {
        let pushes: Vec<(u32, f64)> = frontier
            .iter()
            .map(|&u| (u, residual.insert(u, 0.0).unwrap_or(0.0)))
            .collect();
        for &(u, r_u) in &pushes {
            *estimate.entry(u).or_insert(0.0) += alpha * r_u;
            let share = (1.0 - alpha) * r_u / graph.degree(u as usize) as f64;
            for &w in graph.neighbors(u as usize) {
                *residual.entry(w).or_insert(0.0) += share;
            }
        }
        let mut next: Vec<u32> = pushes
            .iter()
            .flat_map(|&(u, _)| graph.neighbors(u as usize).iter().copied())
            .chain(pushes.iter().map(|&(u, _)| u))
            .filter(|&w| residual.get(&w).copied().unwrap_or(0.0) >= eps * graph.degree(w as usize) as f64)
            .collect();
        next.sort_unstable();
        next.dedup();
        frontier = next;
    }

    Ok(PprScores::from_entries(source, config, estimate.into_iter().collect()))
}

/// The `t` candidates with the highest scores; ties go to the smaller id.
pub fn top_t_by_ppr(scores: &PprScores, candidates: &[u32], t: usize) -> Vec<u32> {
    let mut ranked: Vec<(u32, f64)> = candidates
        .iter()
        .map(|&c| (c, scores.get(c as usize)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(t);
    ranked.into_iter().map(|(c, _)| c).collect()
}

const CACHE_MAGIC: &[u8; 4] = b"UPPR";
const CACHE_VERSION: u32 = 1;

/// On-disk cache of per-anchor PPR vectors.
///
/// Layout (little-endian): magic `UPPR`, u32 version, f64 restart_prob,
/// f64 epsilon, u64 record count, then per record: u64 global anchor index,
/// u32 local source id, u32 entry count, entries as (u32 local id, f64 score).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PprCache {
    pub config: Option<PprConfig>,
    pub records: BTreeMap<GlobalNodeIndex, PprScores>,
}

impl PprCache {
    pub fn new(config: PprConfig) -> Self {
        Self {
            config: Some(config),
            records: BTreeMap::new(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let cfg = self.config.unwrap_or_default();
        binio::write_magic(w, CACHE_MAGIC)?;
        binio::write_u32(w, CACHE_VERSION)?;
        binio::write_f64(w, cfg.restart_prob)?;
        binio::write_f64(w, cfg.epsilon)?;
        binio::write_u64(w, self.records.len() as u64)?;
        for (anchor, scores) in &self.records {
            binio::write_u64(w, anchor.0 as u64)?;
            binio::write_u32(w, binio::len_u32(scores.source, "source")?)?;
            binio::write_u32(w, binio::len_u32(scores.entries.len(), "entry count")?)?;
            for &(id, s) in &scores.entries {
                binio::write_u32(w, id)?;
                binio::write_f64(w, s)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, CACHE_MAGIC)?;
        binio::expect_version(r, CACHE_VERSION)?;
        let config = PprConfig {
            restart_prob: binio::read_f64(r)?,
            epsilon: binio::read_f64(r)?,
        };
        let count = binio::read_u64(r)?;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let anchor = GlobalNodeIndex(binio::read_u64(r)? as usize);
            let source = binio::read_u32(r)? as usize;
            let len = binio::read_u32(r)? as usize;
            let mut entries = Vec::with_capacity(len);
            for _ in 0..len {
                let id = binio::read_u32(r)?;
                let s = binio::read_f64(r)?;
                entries.push((id, s));
            }
            records.insert(anchor, PprScores::from_entries(source, config, entries));
        }
        binio::expect_eof(r)?;
        Ok(Self {
            config: Some(config),
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
