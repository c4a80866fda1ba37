//! Learnable positive generation.
//!
//! Each anchor's positive is a softmax mixture of its pool members' bank rows,
//! weighted by the pool's selection table. The table starts at the similarity
//! between the frozen encoder's view of the anchor (text plus context
//! description) and of each member, and is regularized toward the softmax of
//! the members' PPR scores by `KL(softmax(table) ‖ softmax(page))`.

use crate::encoder::{l2_norm, similarity, EncoderParams};
use crate::error::Result;
use crate::graph_store::TagCorpus;
use crate::memory_bank::MemoryBank;
use crate::sampler::{PoolSet, PositivePool};

/// Softmax of a selection table.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionWeights(pub Vec<f64>);

impl SelectionWeights {
    pub fn of(table: &[f64]) -> Self {
        Self(softmax(table))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Maps a gradient on softmax outputs to a gradient on its logits:
/// `(diag(w) − w wᵀ) g`.
pub fn softmax_backward(weights: &[f64], grad_weights: &[f64]) -> Vec<f64> {
    let mean = similarity(weights, grad_weights);
    weights
        .iter()
        .zip(grad_weights)
        .map(|(w, g)| w * (g - mean))
        .collect()
}

/// `KL(softmax(p_logits) ‖ softmax(q_logits))`.
pub fn kl_softmax(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum();
    kl.max(0.0)
}

/// Gradient of [`kl_softmax`] with respect to `p_logits`:
/// `p_j (log p_j − log q_j − KL)`.
pub fn kl_softmax_grad(p_logits: &[f64], q_logits: &[f64]) -> Vec<f64> {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let diffs: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| a - b).collect();
    let kl: f64 = lp.iter().zip(&diffs).map(|(a, d)| a.exp() * d).sum();
    lp.iter().zip(&diffs).map(|(a, d)| a.exp() * (d - kl)).collect()
}

/// Sets `pool.selection_table[k] = sim(query, member_rows[k])`.
pub fn init_selection_table_from(pool: &mut PositivePool, query: &[f64], member_rows: &[&[f64]]) {
    pool.selection_table = member_rows.iter().map(|r| similarity(query, r)).collect();
}

/// Initializes one pool's table by encoding texts with the frozen encoder.
pub fn init_selection_table(
    pool: &mut PositivePool,
    f0: &EncoderParams,
    corpus: &TagCorpus,
) -> Result<()> {
    let query = f0.encode(&corpus.anchor_text(pool.anchor)?)?;
    let rows = pool
        .members
        .iter()
        .map(|&m| f0.encode(corpus.text(m)?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    init_selection_table_from(pool, &query, &refs);
    Ok(())
}

/// Initializes every table, reading member encodings from `f0_bank`, which
/// must hold the frozen encoder's output for every node.
pub fn init_all_selection_tables(
    pools: &mut PoolSet,
    f0: &EncoderParams,
    corpus: &TagCorpus,
    f0_bank: &MemoryBank,
) -> Result<()> {
    use rayon::prelude::*;
    let anchors = pools.eligible();
    let queries: Vec<Vec<f64>> = anchors
        .par_iter()
        .map(|&a| f0.encode(&corpus.anchor_text(a)?))
        .collect::<Result<_>>()?;
    for (anchor, query) in anchors.into_iter().zip(queries) {
        let pool = pools.get_mut(anchor).expect("eligible anchor has a pool");
        let rows: Vec<&[f64]> = pool.members.iter().map(|&m| f0_bank.row(m)).collect();
        init_selection_table_from(pool, &query, &rows);
    }
    Ok(())
}

pub fn member_rows<'a>(pool: &PositivePool, bank: &'a MemoryBank) -> Vec<&'a [f64]> {
    pool.members.iter().map(|&m| bank.row(m)).collect()
}

/// `Σ_k w_k · rows[k]`.
pub fn mixture(weights: &[f64], rows: &[&[f64]]) -> Vec<f64> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut out = vec![0.0; dim];
    for (w, r) in weights.iter().zip(rows) {
        for (o, x) in out.iter_mut().zip(r.iter()) {
            *o += w * x;
        }
    }
    out
}

/// Aggregated positive of `pool`: softmax(table)-weighted mean of bank rows.
/// Not renormalized.
pub fn positive_embedding(pool: &PositivePool, bank: &MemoryBank) -> Vec<f64> {
    let w = softmax(&pool.selection_table);
    mixture(&w, &member_rows(pool, bank))
}

/// Cosine between a unit anchor and the aggregated positive (zero if the
/// mixture vanishes). Equals the weighted-embeddings-before-similarity form
/// `Ec·Σw_i e_i / (‖Ec‖ sqrt(ΣΣ w_i w_j e_i·e_j))` for unit `Ec`.
pub fn positive_cosine(anchor: &[f64], positive: &[f64]) -> f64 {
    let n = l2_norm(positive);
    if n < crate::encoder::DEGENERATE_NORM {
        return 0.0;
    }
    similarity(anchor, positive) / n
}

pub fn kl_regularizer(pool: &PositivePool) -> f64 {
    kl_softmax(&pool.selection_table, &pool.page)
}

/// `Σ_k w_k · sim(anchor, rows[k] / ‖rows[k]‖)`.
pub fn weighted_similarity(weights: &[f64], rows: &[&[f64]], anchor: &[f64]) -> f64 {
    weights
        .iter()
        .zip(rows)
        .map(|(w, r)| {
            let n = l2_norm(r);
            if n < crate::encoder::DEGENERATE_NORM {
                0.0
            } else {
                w * similarity(anchor, r) / n
            }
        })
        .sum()
}

/// Similarity-then-aggregate variant: weights applied to per-member cosines.
pub fn positive_similarity_aggregate(pool: &PositivePool, bank: &MemoryBank, anchor: &[f64]) -> f64 {
    let w = softmax(&pool.selection_table);
    weighted_similarity(&w, &member_rows(pool, bank), anchor)
}

/// Gradient of `upstream · mixture(softmax(table), rows) + alpha · KL` with
/// respect to the table.
pub fn selection_table_grad_rows(
    table: &[f64],
    page: &[f64],
    rows: &[&[f64]],
    upstream_on_positive: &[f64],
    alpha: f64,
) -> Vec<f64> {
    let w = softmax(table);
    let grad_w: Vec<f64> = rows.iter().map(|r| similarity(upstream_on_positive, r)).collect();
    let mut g = softmax_backward(&w, &grad_w);
    if alpha != 0.0 {
        for (gi, ki) in g.iter_mut().zip(kl_softmax_grad(table, page)) {
            *gi += alpha * ki;
        }
    }
    g
}

pub fn selection_table_grad(
    pool: &PositivePool,
    bank: &MemoryBank,
    upstream_on_positive: &[f64],
    alpha: f64,
) -> Vec<f64> {
    selection_table_grad_rows(
        &pool.selection_table,
        &pool.page,
        &member_rows(pool, bank),
        upstream_on_positive,
        alpha,
    )
}
