//! Adaptive positive sampling.
//!
//! For an anchor `v` in graph `g`, the candidate set is `N1(v) ∪ N2(v)` when
//! both `deg(v) < t` and the average degree of `g` is below `t`, and `N1(v)`
//! otherwise. Candidates beyond `t` are cut by personalized PageRank from
//! `v`. Pools also carry the PPR scores of their members and a learnable
//! selection table consumed by [`positive_gen`](crate::positive_gen).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::binio;
use crate::error::{Error, Result};
use crate::graph_store::{GlobalNodeIndex, TagCorpus, TextAttributedGraph};
use crate::ppr::{personalized_pagerank, top_t_by_ppr, PprCache, PprConfig, PprScores};

/// Default pool size.
pub const DEFAULT_NUM_POSITIVES: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct PositivePool {
    pub anchor: GlobalNodeIndex,
    /// Distinct members from the anchor's graph, ordered by PPR (desc), id (asc).
    pub members: Vec<GlobalNodeIndex>,
    /// Raw PPR score of each member.
    pub page: Vec<f64>,
    /// Learnable logits over members; zero until initialized.
    pub selection_table: Vec<f64>,
}

impl PositivePool {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Nodes at shortest-path distance exactly two from `v`, ascending.
pub fn high_order_neighbors(graph: &TextAttributedGraph, v: usize) -> Vec<u32> {
    let first = graph.neighbors(v);
    let mut out: Vec<u32> = first
        .iter()
        .flat_map(|&u| graph.neighbors(u as usize).iter().copied())
        .filter(|&w| w as usize != v && first.binary_search(&w).is_err())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Whether the sparse branch (first- plus second-hop candidates) applies.
pub fn uses_high_order(graph: &TextAttributedGraph, v: usize, t: usize) -> bool {
    (graph.degree(v) as f64) < t as f64 && graph.average_degree() < t as f64
}

/// Candidate set before PPR truncation, ascending local ids.
pub fn candidate_set(graph: &TextAttributedGraph, v: usize, t: usize) -> Vec<u32> {
    let mut cands = graph.neighbors(v).to_vec();
    if uses_high_order(graph, v, t) {
        cands.extend(high_order_neighbors(graph, v));
        cands.sort_unstable();
    }
    cands
}

/// Builds the positive pool of `v` from precomputed PPR scores of `v`.
pub fn adaps_with_scores(
    corpus: &TagCorpus,
    v: GlobalNodeIndex,
    t: usize,
    scores: &PprScores,
) -> Result<PositivePool> {
    if t == 0 {
        return Err(Error::Config("number of positives t must be at least 1".into()));
    }
    let (gi, local) = corpus.decompose(v)?;
    if scores.source != local {
        return Err(Error::Validation(format!(
            "PPR scores for source {} supplied for node {local}",
            scores.source
        )));
    }
    let graph = corpus.graph(gi);
    let candidates = candidate_set(graph, local, t);
    if candidates.is_empty() {
        return Err(Error::EmptyPool(v));
    }
    let chosen = top_t_by_ppr(scores, &candidates, t);
    let offset = corpus.offsets()[gi];
    let page = chosen.iter().map(|&u| scores.get(u as usize)).collect();
    let members = chosen
        .iter()
        .map(|&u| GlobalNodeIndex(offset + u as usize))
        .collect::<Vec<_>>();
    let len = members.len();
    Ok(PositivePool {
        anchor: v,
        members,
        page,
        selection_table: vec![0.0; len],
    })
}

/// Adaptive positive sampling for one anchor.
pub fn adaps(
    corpus: &TagCorpus,
    v: GlobalNodeIndex,
    t: usize,
    ppr: PprConfig,
) -> Result<PositivePool> {
    let (gi, local) = corpus.decompose(v)?;
    let scores = personalized_pagerank(corpus.graph(gi), local, ppr)?;
    adaps_with_scores(corpus, v, t, &scores)
}

/// Pools for every non-isolated node of a corpus, indexed by global node index.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSet {
    t: usize,
    pools: Vec<Option<PositivePool>>,
}

impl PoolSet {
    pub fn num_positives(&self) -> usize {
        self.t
    }

    pub fn total_nodes(&self) -> usize {
        self.pools.len()
    }

    pub fn get(&self, v: GlobalNodeIndex) -> Option<&PositivePool> {
        self.pools.get(v.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, v: GlobalNodeIndex) -> Option<&mut PositivePool> {
        self.pools.get_mut(v.0).and_then(Option::as_mut)
    }

    /// Anchors that have a pool, ascending.
    pub fn eligible(&self) -> Vec<GlobalNodeIndex> {
        self.iter().map(|p| p.anchor).collect()
    }

    /// Anchors excluded for having an empty pool, ascending.
    pub fn excluded(&self) -> Vec<GlobalNodeIndex> {
        (0..self.pools.len())
            .filter(|&i| self.pools[i].is_none())
            .map(GlobalNodeIndex)
            .collect()
    }

    pub fn excluded_count(&self) -> usize {
        self.pools.iter().filter(|p| p.is_none()).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PositivePool> + '_ {
        self.pools.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut PositivePool> + '_ {
        self.pools.iter_mut().flatten()
    }

    fn from_results(t: usize, results: Vec<Result<PositivePool>>) -> Result<Self> {
        let mut pools = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(p) => pools.push(Some(p)),
                Err(Error::EmptyPool(_)) => pools.push(None),
                Err(e) => return Err(e),
            }
        }
        Ok(Self { t, pools })
    }
}

/// Builds every anchor's pool in parallel. Isolated anchors are excluded.
pub fn build_all_pools(corpus: &TagCorpus, t: usize, ppr: PprConfig) -> Result<PoolSet> {
    ppr.validate()?;
    let results: Vec<Result<PositivePool>> = (0..corpus.total_nodes())
        .into_par_iter()
        .map(|v| adaps(corpus, GlobalNodeIndex(v), t, ppr))
        .collect();
    let set = PoolSet::from_results(t, results)?;
    log::info!(
        "built {} positive pools, {} anchors excluded",
        set.pools.len() - set.excluded_count(),
        set.excluded_count()
    );
    Ok(set)
}

/// PPR vectors of every node, for reuse across sampling runs.
pub fn compute_ppr_cache(corpus: &TagCorpus, ppr: PprConfig) -> Result<PprCache> {
    ppr.validate()?;
    let scores: Vec<Result<PprScores>> = (0..corpus.total_nodes())
        .into_par_iter()
        .map(|v| {
            let (gi, local) = corpus.decompose(GlobalNodeIndex(v))?;
            personalized_pagerank(corpus.graph(gi), local, ppr)
        })
        .collect();
    let mut cache = PprCache::new(ppr);
    for (v, s) in scores.into_iter().enumerate() {
        cache.records.insert(GlobalNodeIndex(v), s?);
    }
    Ok(cache)
}

/// Builds pools from cached PPR vectors; the cache must cover every node.
pub fn build_all_pools_from_cache(corpus: &TagCorpus, t: usize, cache: &PprCache) -> Result<PoolSet> {
    let results = (0..corpus.total_nodes())
        .into_par_iter()
        .map(|v| {
            let v = GlobalNodeIndex(v);
            let scores = cache
                .records
                .get(&v)
                .ok_or_else(|| Error::Validation(format!("PPR cache has no entry for node {v}")))?;
            adaps_with_scores(corpus, v, t, scores)
        })
        .collect();
    PoolSet::from_results(t, results)
}

const POOL_MAGIC: &[u8; 4] = b"UPOS";
const POOL_VERSION: u32 = 1;

impl PoolSet {
    /// Layout (little-endian): magic `UPOS`, u32 version, u32 t, u64 total
    /// nodes, u64 pool count, then per pool: u64 anchor, u32 length, members
    /// as u64, page as f64, selection table as f64.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, POOL_MAGIC)?;
        binio::write_u32(w, POOL_VERSION)?;
        binio::write_u32(w, binio::len_u32(self.t, "t")?)?;
        binio::write_u64(w, self.pools.len() as u64)?;
        let count = self.pools.len() - self.excluded_count();
        binio::write_u64(w, count as u64)?;
        for p in self.iter() {
            binio::write_u64(w, p.anchor.0 as u64)?;
            binio::write_u32(w, binio::len_u32(p.len(), "pool length")?)?;
            for m in &p.members {
                binio::write_u64(w, m.0 as u64)?;
            }
            for &x in &p.page {
                binio::write_f64(w, x)?;
            }
            for &x in &p.selection_table {
                binio::write_f64(w, x)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, POOL_MAGIC)?;
        binio::expect_version(r, POOL_VERSION)?;
        let t = binio::read_u32(r)? as usize;
        let total = binio::read_u64(r)? as usize;
        let count = binio::read_u64(r)? as usize;
        let mut pools: Vec<Option<PositivePool>> = vec![None; total];
        for _ in 0..count {
            let anchor = binio::read_u64(r)? as usize;
            let len = binio::read_u32(r)? as usize;
            if anchor >= total || pools[anchor].is_some() {
                return Err(Error::Format(format!("bad or repeated pool anchor {anchor}")));
            }
            let members = (0..len)
                .map(|_| binio::read_u64(r).map(|m| GlobalNodeIndex(m as usize)))
                .collect::<Result<Vec<_>>>()?;
            let page = (0..len).map(|_| binio::read_f64(r)).collect::<Result<Vec<_>>>()?;
            let selection_table = (0..len).map(|_| binio::read_f64(r)).collect::<Result<Vec<_>>>()?;
            pools[anchor] = Some(PositivePool {
                anchor: GlobalNodeIndex(anchor),
                members,
                page,
                selection_table,
            });
        }
        binio::expect_eof(r)?;
        Ok(Self { t, pools })
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
