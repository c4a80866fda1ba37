//! Mini-batch contrastive training over the unified corpus.
//!
//! Each step samples a batch uniformly from the eligible anchors of every
//! graph, encodes the anchors' text plus context description with the
//! current projection, and minimizes
//! `mean_v InfoNCE(v) + alpha · mean_v KL(softmax(table_v) ‖ softmax(page_v))`.
//! The positive of each anchor is read from the memory bank (no gradient);
//! in-batch anchors are the negatives. After the SGD update, the batch's bank
//! rows are overwritten with the encodings computed during the step.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    hash_features, l2_norm, similarity, EncoderConfig, EncoderParams, Encoded, FeatureVector,
    ProjectionGrad, DEGENERATE_NORM,
};
use crate::error::{Error, Result};
use crate::graph_store::{GlobalNodeIndex, TagCorpus};
use crate::memory_bank::MemoryBank;
use crate::positive_gen::{init_all_selection_tables, kl_softmax, mixture, selection_table_grad_rows, softmax};
use crate::ppr::PprConfig;
use crate::sampler::{build_all_pools, PoolSet, DEFAULT_NUM_POSITIVES};

/// Which parts of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Learnable mixture positive read from the bank.
    #[default]
    Full,
    /// Selection tables stay at their initial values.
    FixedWeights,
    /// Weights applied to per-member similarities instead of embeddings.
    SimAggregate,
    /// Members re-encoded with the current projection every step.
    NoBank,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::FixedWeights,
        Variant::SimAggregate,
        Variant::NoBank,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FixedWeights => "fixed_weights",
            Variant::SimAggregate => "sim_aggregate",
            Variant::NoBank => "no_bank",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub num_positives: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// When set, overrides `steps` with `epochs · ceil(eligible / batch_size)`.
    pub epochs: Option<usize>,
    pub seed: u64,
    pub variant: Variant,
    pub ppr: PprConfig,
    pub encoder: EncoderConfig,
    /// Checkpoint every this many steps; 0 writes only the final state.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.3,
            alpha: 0.1,
            num_positives: DEFAULT_NUM_POSITIVES,
            batch_size: 64,
            learning_rate: 0.05,
            steps: 200,
            epochs: None,
            seed: 0,
            variant: Variant::Full,
            ppr: PprConfig::default(),
            encoder: EncoderConfig::default(),
            checkpoint_every: 0,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in the order they are written.
pub const CONFIG_KEYS: &[&str] = &[
    "temperature",
    "alpha",
    "num_pos_samples",
    "batch_size",
    "learning_rate",
    "steps",
    "epochs",
    "seed",
    "variant",
    "restart_prob",
    "ppr_epsilon",
    "feature_dim",
    "embed_dim",
    "checkpoint_every",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.num_positives == 0 {
            return Err(Error::Config("num_pos_samples must be at least 1".into()));
        }
        self.ppr.validate()?;
        self.encoder.validate()
    }

    /// Sets one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "temperature" => self.temperature = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "num_pos_samples" | "t" => self.num_positives = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "epochs" => {
                self.epochs = match value {
                    "" | "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "seed" => self.seed = parse_value(key, value)?,
            "variant" => self.variant = value.parse()?,
            "restart_prob" => self.ppr.restart_prob = parse_value(key, value)?,
            "ppr_epsilon" => self.ppr.epsilon = parse_value(key, value)?,
            "feature_dim" => self.encoder.feature_dim = parse_value(key, value)?,
            "embed_dim" => self.encoder.embed_dim = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` document over `self`. `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        let epochs = self.epochs.map_or("none".to_string(), |e| e.to_string());
        let values = [
            self.temperature.to_string(),
            self.alpha.to_string(),
            self.num_positives.to_string(),
            self.batch_size.to_string(),
            self.learning_rate.to_string(),
            self.steps.to_string(),
            epochs,
            self.seed.to_string(),
            self.variant.to_string(),
            self.ppr.restart_prob.to_string(),
            self.ppr.epsilon.to_string(),
            self.encoder.feature_dim.to_string(),
            self.encoder.embed_dim.to_string(),
            self.checkpoint_every.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn total_steps(&self, eligible: usize) -> usize {
        match self.epochs {
            Some(e) => e * eligible.div_ceil(self.batch_size),
            None => self.steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub contrastive_part: f64,
    pub kl_part: f64,
    pub grad_norm: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,loss,contrastive,kl,grad_norm";

pub fn write_loss_csv(path: &Path, curve: &[StepReport]) -> Result<()> {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in curve {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss, r.contrastive_part, r.kl_part, r.grad_norm
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Hashed features of every node's raw text and of its anchor text.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub node: Vec<FeatureVector>,
    pub anchor: Vec<FeatureVector>,
}

impl FeatureCache {
    pub fn build(corpus: &TagCorpus, feature_dim: usize) -> Result<Self> {
        let n = corpus.total_nodes();
        let node = (0..n)
            .into_par_iter()
            .map(|i| Ok(hash_features(corpus.text(GlobalNodeIndex(i))?, feature_dim)))
            .collect::<Result<_>>()?;
        let anchor = (0..n)
            .into_par_iter()
            .map(|i| Ok(hash_features(&corpus.anchor_text(GlobalNodeIndex(i))?, feature_dim)))
            .collect::<Result<_>>()?;
        Ok(Self { node, anchor })
    }
}

/// Uniform draw of `batch_size` distinct anchors from `eligible`.
pub fn sample_batch(
    eligible: &[GlobalNodeIndex],
    rng: &mut ChaCha8Rng,
    batch_size: usize,
) -> Result<Vec<GlobalNodeIndex>> {
    if batch_size > eligible.len() {
        return Err(Error::Config(format!(
            "batch_size {batch_size} exceeds the {} eligible anchors",
            eligible.len()
        )));
    }
    Ok(index::sample(rng, eligible.len(), batch_size)
        .into_iter()
        .map(|i| eligible[i])
        .collect())
}

/// InfoNCE term of one anchor with its positive logit at index 0.
///
/// Returns the loss and the derivative with respect to every logit.
pub fn info_nce(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[0] -= 1.0;
    (lse - logits[0], grad)
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub contrastive: f64,
    pub kl: f64,
    pub per_anchor: Vec<f64>,
    pub projection_grad: ProjectionGrad,
    /// Per batch anchor, gradient on its selection table. Empty when the
    /// tables are frozen.
    pub table_grads: Vec<Vec<f64>>,
    /// Raw-text encodings of the batch nodes under the parameters used for
    /// the loss.
    pub fresh_rows: Vec<Vec<f64>>,
}

impl BatchLoss {
    pub fn grad_norm(&self) -> f64 {
        let tables: f64 = self.table_grads.iter().flatten().map(|g| g * g).sum();
        (self.projection_grad.norm_sq() + tables).sqrt()
    }
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, xi) in out.iter_mut().zip(x) {
        *o += a * xi;
    }
}

/// Loss and gradients of one batch. The bank is read only.
pub fn batch_loss(
    batch: &[GlobalNodeIndex],
    features: &FeatureCache,
    pools: &PoolSet,
    bank: &MemoryBank,
    params: &EncoderParams,
    config: &TrainConfig,
) -> Result<BatchLoss> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Validation(format!("batch of {b} has no negatives")));
    }
    let d = params.embed_dim();
    let tau = config.temperature;
    let scale = 1.0 / b as f64;
    let variant = config.variant;

    let pool_refs = batch
        .iter()
        .map(|&v| pools.get(v).ok_or(Error::EmptyPool(v)))
        .collect::<Result<Vec<_>>>()?;
    let anchors = batch
        .iter()
        .map(|&v| params.forward(&features.anchor[v.0]))
        .collect::<Result<Vec<Encoded>>>()?;
    let fresh_rows = batch
        .iter()
        .map(|&v| params.encode_features(&features.node[v.0]))
        .collect::<Result<Vec<_>>>()?;
    let members: Vec<Vec<Encoded>> = if variant == Variant::NoBank {
        pool_refs
            .iter()
            .map(|p| p.members.iter().map(|&m| params.forward(&features.node[m.0])).collect())
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut grad_e = vec![vec![0.0; d]; b];
    let mut member_grads: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut table_grads = Vec::with_capacity(b);
    let mut per_anchor = Vec::with_capacity(b);
    let mut kl_sum = 0.0;

    for i in 0..b {
        let pool = pool_refs[i];
        let e = &anchors[i].embedding;
        let rows: Vec<&[f64]> = if variant == Variant::NoBank {
            members[i].iter().map(|m| m.embedding.as_slice()).collect()
        } else {
            pool.members.iter().map(|&m| bank.row(m)).collect()
        };
        let w = softmax(&pool.selection_table);

        // Positive logit and the pieces needed to backpropagate it.
        let mut unit_rows: Vec<Vec<f64>> = Vec::new();
        let pos_logit;
        let mut mix_unit = None;
        if variant == Variant::SimAggregate {
            unit_rows = rows
                .iter()
                .map(|r| {
                    let n = l2_norm(r);
                    if n < DEGENERATE_NORM {
                        vec![0.0; d]
                    } else {
                        r.iter().map(|x| x / n).collect()
                    }
                })
                .collect();
            pos_logit = w
                .iter()
                .zip(&unit_rows)
                .map(|(wk, r)| wk * similarity(e, r))
                .sum::<f64>()
                / tau;
        } else {
            let m = mixture(&w, &rows);
            let n = l2_norm(&m);
            if n < DEGENERATE_NORM {
                pos_logit = 0.0;
            } else {
                let m_hat: Vec<f64> = m.iter().map(|x| x / n).collect();
                pos_logit = similarity(e, &m_hat) / tau;
                mix_unit = Some((m_hat, n));
            }
        }

        let mut logits = Vec::with_capacity(b);
        logits.push(pos_logit);
        for (j, a) in anchors.iter().enumerate() {
            if j != i {
                logits.push(similarity(e, &a.embedding) / tau);
            }
        }
        let (loss_i, dlogits) = info_nce(&logits);
        per_anchor.push(loss_i);
        kl_sum += kl_softmax(&pool.selection_table, &pool.page);

        let mut slot = 1;
        for j in 0..b {
            if j == i {
                continue;
            }
            let c = scale * dlogits[slot] / tau;
            slot += 1;
            let ej = anchors[j].embedding.clone();
            axpy(&mut grad_e[i], c, &ej);
            axpy(&mut grad_e[j], c, e);
        }

        let c_pos = scale * dlogits[0] / tau;
        // Gradient on the aggregated positive (or, for the aggregate variant,
        // on each unit member) that the table and member paths share.
        let (upstream, table_rows): (Vec<f64>, Vec<&[f64]>) = if variant == Variant::SimAggregate {
            for (wk, r) in w.iter().zip(&unit_rows) {
                axpy(&mut grad_e[i], c_pos * wk, r);
            }
            let up: Vec<f64> = e.iter().map(|x| c_pos * x).collect();
            (up, unit_rows.iter().map(Vec::as_slice).collect())
        } else if let Some((m_hat, n)) = &mix_unit {
            axpy(&mut grad_e[i], c_pos, m_hat);
            let cos = similarity(e, m_hat);
            let up: Vec<f64> = e
                .iter()
                .zip(m_hat)
                .map(|(ei, mi)| c_pos * (ei - cos * mi) / n)
                .collect();
            (up, rows.clone())
        } else {
            (vec![0.0; d], rows.clone())
        };

        if variant == Variant::NoBank {
            member_grads.push(w.iter().map(|wk| upstream.iter().map(|u| wk * u).collect()).collect());
        }
        if variant != Variant::FixedWeights {
            table_grads.push(selection_table_grad_rows(
                &pool.selection_table,
                &pool.page,
                &table_rows,
                &upstream,
                config.alpha * scale,
            ));
        }
    }

    let mut projection_grad = ProjectionGrad::new(d);
    for (i, &v) in batch.iter().enumerate() {
        params.accumulate_grad(&features.anchor[v.0], &anchors[i], &grad_e[i], &mut projection_grad);
    }
    for (i, grads) in member_grads.iter().enumerate() {
        for (k, g) in grads.iter().enumerate() {
            let m = pool_refs[i].members[k];
            params.accumulate_grad(&features.node[m.0], &members[i][k], g, &mut projection_grad);
        }
    }

    let contrastive = per_anchor.iter().sum::<f64>() * scale;
    let kl = kl_sum * scale;
    let loss = contrastive + config.alpha * kl;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "batch loss (contrastive {contrastive}, kl {kl})"
        )));
    }
    Ok(BatchLoss {
        loss,
        contrastive,
        kl,
        per_anchor,
        projection_grad,
        table_grads,
        fresh_rows,
    })
}

/// Everything a training run mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub corpus: TagCorpus,
    pub config: TrainConfig,
    pub features: FeatureCache,
    pub pools: PoolSet,
    pub bank: MemoryBank,
    pub params: EncoderParams,
    pub initial_params: EncoderParams,
    pub eligible: Vec<GlobalNodeIndex>,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl TrainState {
    /// Builds pools, the initial encoder, the bank and the selection tables.
    pub fn new(corpus: TagCorpus, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let pools = build_all_pools(&corpus, config.num_positives, config.ppr)?;
        Self::with_pools(corpus, config, pools)
    }

    /// Like [`TrainState::new`] with pools built elsewhere. Their selection
    /// tables are re-initialized from the initial encoder.
    pub fn with_pools(corpus: TagCorpus, config: TrainConfig, mut pools: PoolSet) -> Result<Self> {
        config.validate()?;
        if pools.total_nodes() != corpus.total_nodes() {
            return Err(Error::Validation(format!(
                "pools cover {} nodes, corpus has {}",
                pools.total_nodes(),
                corpus.total_nodes()
            )));
        }
        let params = EncoderParams::random(config.encoder, config.seed)?;
        let bank = MemoryBank::init(&corpus, &params)?;
        init_all_selection_tables(&mut pools, &params, &corpus, &bank)?;
        let features = FeatureCache::build(&corpus, config.encoder.feature_dim)?;
        let eligible = pools.eligible();
        if eligible.len() < config.batch_size {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} eligible anchors",
                config.batch_size,
                eligible.len()
            )));
        }
        let excluded = pools.excluded_count();
        if excluded > 0 {
            log::info!("{excluded} isolated nodes excluded from training");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            corpus,
            config,
            features,
            pools,
            bank,
            initial_params: params.clone(),
            params,
            eligible,
            rng,
            step: 0,
        })
    }

    pub fn next_batch(&mut self) -> Result<Vec<GlobalNodeIndex>> {
        sample_batch(&self.eligible, &mut self.rng, self.config.batch_size)
    }

    /// One optimization step on a freshly sampled batch.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.next_batch()?;
        self.step_on(&batch)
    }

    /// One optimization step on `batch`.
    pub fn step_on(&mut self, batch: &[GlobalNodeIndex]) -> Result<StepReport> {
        let out = batch_loss(batch, &self.features, &self.pools, &self.bank, &self.params, &self.config)?;
        let lr = self.config.learning_rate;
        self.params.apply_sgd(&out.projection_grad, lr);
        for (v, g) in batch.iter().zip(&out.table_grads) {
            let pool = self.pools.get_mut(*v).expect("batch anchor has a pool");
            for (x, gi) in pool.selection_table.iter_mut().zip(g) {
                *x -= lr * gi;
            }
        }
        let report = StepReport {
            step: self.step,
            loss: out.loss,
            contrastive_part: out.contrastive,
            kl_part: out.kl,
            grad_norm: out.grad_norm(),
        };
        self.step += 1;
        let rows: Vec<(GlobalNodeIndex, Vec<f64>)> = batch.iter().copied().zip(out.fresh_rows).collect();
        self.bank.update(&rows, self.step as u64)?;
        Ok(report)
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps(self.eligible.len())
    }

    /// Writes `enc.bin`, `bank.bin`, `pools.bin` and `train.cfg` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.params.save(&dir.join("enc.bin"))?;
        self.bank.save(&dir.join("bank.bin"))?;
        self.pools.save(&dir.join("pools.bin"))?;
        let mut f = fs::File::create(dir.join("train.cfg"))?;
        f.write_all(self.config.to_kv_string().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub initial_params: EncoderParams,
    pub bank: MemoryBank,
    pub pools: PoolSet,
    pub curve: Vec<StepReport>,
}

/// Runs a full training loop, checkpointing into `out` when given.
pub fn train(corpus: TagCorpus, config: TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let state = TrainState::new(corpus, config)?;
    run(state, out)
}

pub fn run(mut state: TrainState, out: Option<&Path>) -> Result<TrainOutcome> {
    let total = state.total_steps();
    let mut curve = Vec::with_capacity(total);
    for _ in 0..total {
        let report = state.step()?;
        log::debug!(
            "step {} loss {:.6} contrastive {:.6} kl {:.6}",
            report.step,
            report.loss,
            report.contrastive_part,
            report.kl_part
        );
        curve.push(report);
        let every = state.config.checkpoint_every;
        if let Some(dir) = out {
            if every > 0 && state.step % every == 0 && state.step < total {
                state.save_checkpoint(&dir.join(format!("step-{}", state.step)))?;
            }
        }
    }
    if let Some(dir) = out {
        state.save_checkpoint(dir)?;
        write_loss_csv(&dir.join("loss.csv"), &curve)?;
    }
    Ok(TrainOutcome {
        params: state.params,
        initial_params: state.initial_params,
        bank: state.bank,
        pools: state.pools,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_store::TextAttributedGraph;
    use crate::sampler::PositivePool;
    use rand::Rng;

    fn small_corpus(seed: u64, sizes: &[usize]) -> TagCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graphs = sizes
            .iter()
            .enumerate()
            .map(|(g, &n)| {
                let texts = (0..n)
                    .map(|i| format!("w{} w{} node{i}", rng.random_range(0..12), rng.random_range(0..12)))
                    .collect();
                let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
                for _ in 0..n {
                    let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
                    if u != v {
                        edges.push((u, v));
                    }
                }
                TextAttributedGraph::new(format!("g{g}"), format!("Domain {g}."), texts, vec![None; n], &edges)
                    .unwrap()
            })
            .collect();
        TagCorpus::new(graphs).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            num_positives: 3,
            encoder: EncoderConfig {
                feature_dim: 64,
                embed_dim: 6,
            },
            learning_rate: 0.5,
            steps: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_round_trip_and_errors() {
        let mut cfg = TrainConfig::default();
        cfg.apply_str("# preset\ntemperature = 0.5\nvariant = no_bank # inline\nepochs = 3\n\n").unwrap();
        assert_eq!(cfg.temperature, 0.5);
        assert_eq!(cfg.variant, Variant::NoBank);
        assert_eq!(cfg.epochs, Some(3));
        let mut back = TrainConfig::default();
        back.apply_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::default().apply_str("bogus = 1").is_err());
        assert!(TrainConfig::default().apply_str("temperature 0.3").is_err());
        assert!(TrainConfig::default().apply_str("variant = best").is_err());
        let bad = TrainConfig {
            temperature: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn exhaustive_batch_covers_everything() {
        let eligible: Vec<GlobalNodeIndex> = (0..8).map(GlobalNodeIndex).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = sample_batch(&eligible, &mut rng, 8).unwrap();
        b.sort();
        assert_eq!(b, eligible);
        assert!(sample_batch(&eligible, &mut rng, 9).is_err());
    }

    #[test]
    fn batch_inclusion_is_uniform() {
        let n = 20;
        let k = 5;
        let draws = 10_000;
        let eligible: Vec<GlobalNodeIndex> = (0..n).map(GlobalNodeIndex).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            let b = sample_batch(&eligible, &mut rng, k).unwrap();
            let mut s = b.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), k);
            for v in b {
                counts[v.0] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
        for &c in &counts {
            assert!((c as f64 - mean).abs() < 3.5 * sigma, "count {c} vs {mean}");
        }
        // 19 degrees of freedom; the 0.999 quantile is about 43.8.
        assert!(chi2 < 43.8, "chi2 {chi2}");
    }

    #[test]
    fn hand_computed_info_nce() {
        // Positive cosine 1, orthogonal negative, tau 1.
        let (l, _) = info_nce(&[1.0, 0.0]);
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn info_nce_gradient_is_softmax_minus_onehot() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let (_, g) = info_nce(&logits);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        let h = 1e-6;
        for j in 0..4 {
            let mut p = logits;
            p[j] += h;
            let mut m = logits;
            m[j] -= h;
            let num = (info_nce(&p).0 - info_nce(&m).0) / (2.0 * h);
            assert!((num - g[j]).abs() < 1e-8);
        }
    }

    fn total_loss(
        batch: &[GlobalNodeIndex],
        features: &FeatureCache,
        pools: &PoolSet,
        bank: &MemoryBank,
        params: &EncoderParams,
        cfg: &TrainConfig,
    ) -> f64 {
        batch_loss(batch, features, pools, bank, params, cfg).unwrap().loss
    }

    fn check_gradients(variant: Variant) {
        let corpus = small_corpus(3, &[10]);
        let cfg = TrainConfig {
            variant,
            alpha: 0.1,
            temperature: 0.3,
            ..small_config()
        };
        let mut state = TrainState::new(corpus, cfg.clone()).unwrap();
        // Perturb tables and bank so gradients are generic.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for pool in state.pools.iter_mut() {
            for x in pool.selection_table.iter_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        let batch = state.next_batch().unwrap();
        let out = batch_loss(&batch, &state.features, &state.pools, &state.bank, &state.params, &cfg).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for (bucket, col) in out.projection_grad.columns() {
            for (row, &g) in col.iter().enumerate() {
                let mut p = state.params.clone();
                let x = p.get(row, bucket as usize);
                p.set(row, bucket as usize, x + h);
                let lp = total_loss(&batch, &state.features, &state.pools, &state.bank, &p, &cfg);
                p.set(row, bucket as usize, x - h);
                let lm = total_loss(&batch, &state.features, &state.pools, &state.bank, &p, &cfg);
                let num = (lp - lm) / (2.0 * h);
                if g.abs().max(num.abs()) > 1e-7 {
                    worst = worst.max(rel(g, num));
                }
            }
        }
        for (i, &v) in batch.iter().enumerate() {
            if variant == Variant::FixedWeights {
                break;
            }
            for k in 0..state.pools.get(v).unwrap().len() {
                let mut pools = state.pools.clone();
                pools.get_mut(v).unwrap().selection_table[k] += h;
                let lp = total_loss(&batch, &state.features, &pools, &state.bank, &state.params, &cfg);
                pools.get_mut(v).unwrap().selection_table[k] -= 2.0 * h;
                let lm = total_loss(&batch, &state.features, &pools, &state.bank, &state.params, &cfg);
                let num = (lp - lm) / (2.0 * h);
                let g = out.table_grads[i][k];
                if g.abs().max(num.abs()) > 1e-7 {
                    worst = worst.max(rel(g, num));
                }
            }
        }
        assert!(worst < 1e-4, "{variant}: worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for v in Variant::ALL {
            check_gradients(v);
        }
    }

    #[test]
    fn bank_rows_carry_no_encoder_gradient() {
        let corpus = small_corpus(4, &[10]);
        let cfg = small_config();
        let mut state = TrainState::new(corpus, cfg.clone()).unwrap();
        let batch = state.next_batch().unwrap();
        let a = batch_loss(&batch, &state.features, &state.pools, &state.bank, &state.params, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..state.bank.len())
            .map(|_| {
                let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = l2_norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let bank = MemoryBank::from_rows(6, rows);
        let b = batch_loss(&batch, &state.features, &state.pools, &bank, &state.params, &cfg).unwrap();
        assert_ne!(a.loss, b.loss);
        // Encoder gradients only touch anchor features, never member features
        // that do not also appear in some anchor text.
        let anchor_buckets: std::collections::BTreeSet<u32> = batch
            .iter()
            .flat_map(|v| state.features.anchor[v.0].entries().iter().map(|e| e.0))
            .collect();
        for (bucket, _) in b.projection_grad.columns() {
            assert!(anchor_buckets.contains(&bucket));
        }
        state.step_on(&batch).unwrap();
    }

    #[test]
    fn decomposition_and_zero_alpha() {
        let corpus = small_corpus(5, &[12, 9]);
        for alpha in [0.0, 0.1, 1.0] {
            let cfg = TrainConfig {
                alpha,
                ..small_config()
            };
            let mut state = TrainState::new(corpus.clone(), cfg).unwrap();
            for _ in 0..5 {
                let r = state.step().unwrap();
                assert_eq!(r.loss, r.contrastive_part + alpha * r.kl_part);
                if alpha == 0.0 {
                    assert_eq!(r.loss, r.contrastive_part);
                }
            }
        }
    }

    #[test]
    fn large_temperature_gives_log_batch() {
        let corpus = small_corpus(6, &[12]);
        let cfg = TrainConfig {
            temperature: 1e3,
            alpha: 0.0,
            ..small_config()
        };
        let mut state = TrainState::new(corpus, cfg.clone()).unwrap();
        let batch = state.next_batch().unwrap();
        let out = batch_loss(&batch, &state.features, &state.pools, &state.bank, &state.params, &cfg).unwrap();
        // Expanding log-sum-exp around equal logits:
        // loss = log B + mean(logits) - positive + O(1/tau^2).
        for (i, l) in out.per_anchor.iter().enumerate() {
            assert!((l - (4f64).ln()).abs() <= 2.0 / 1e3);
            let e = state.params.encode_features(&state.features.anchor[batch[i].0]).unwrap();
            let pos = positive_cosine_of(&state, batch[i], &e);
            let negs: f64 = batch
                .iter()
                .filter(|&&v| v != batch[i])
                .map(|&v| similarity(&e, &state.params.encode_features(&state.features.anchor[v.0]).unwrap()))
                .sum();
            let mean = (pos + negs) / 4.0;
            let first_order = (4f64).ln() + (mean - pos) / 1e3;
            assert!((l - first_order).abs() < 1e-6, "{l} vs {first_order}");
        }
    }

    fn positive_cosine_of(state: &TrainState, v: GlobalNodeIndex, e: &[f64]) -> f64 {
        let pool = state.pools.get(v).unwrap();
        let pos = crate::positive_gen::positive_embedding(pool, &state.bank);
        crate::positive_gen::positive_cosine(e, &pos)
    }

    #[test]
    fn zero_learning_rate_repeats_loss() {
        let corpus = small_corpus(7, &[12]);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..small_config()
        };
        let mut state = TrainState::new(corpus, cfg).unwrap();
        let batch = state.next_batch().unwrap();
        let a = state.step_on(&batch).unwrap();
        let b = state.step_on(&batch).unwrap();
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn no_bank_matches_full_on_frozen_encoder() {
        let corpus = small_corpus(8, &[12, 10]);
        let base = TrainConfig {
            learning_rate: 0.0,
            ..small_config()
        };
        let mut full = TrainState::new(corpus.clone(), base.clone()).unwrap();
        let mut nob = TrainState::new(
            corpus,
            TrainConfig {
                variant: Variant::NoBank,
                ..base
            },
        )
        .unwrap();
        for _ in 0..6 {
            let a = full.step().unwrap();
            let b = nob.step().unwrap();
            assert!((a.loss - b.loss).abs() < 1e-12, "{} vs {}", a.loss, b.loss);
        }
    }

    #[test]
    fn positives_use_previous_step_embeddings() {
        let corpus = small_corpus(9, &[14]);
        let cfg = small_config();
        let mut state = TrainState::new(corpus, cfg.clone()).unwrap();
        let first = state.next_batch().unwrap();
        let snapshot = state.params.clone();
        state.step_on(&first).unwrap();
        for &v in &first {
            let expected = snapshot.encode_features(&state.features.node[v.0]).unwrap();
            assert_eq!(state.bank.row(v), expected.as_slice());
        }
        // Replay oracle for the second step: rebuild the bank by hand.
        let second: Vec<GlobalNodeIndex> = state
            .eligible
            .iter()
            .copied()
            .filter(|v| !first.contains(v))
            .take(4)
            .collect();
        let f0 = state.initial_params.clone();
        let rows: Vec<Vec<f64>> = (0..state.bank.len())
            .map(|i| {
                let p = if first.contains(&GlobalNodeIndex(i)) { &snapshot } else { &f0 };
                p.encode_features(&state.features.node[i]).unwrap()
            })
            .collect();
        let oracle_bank = MemoryBank::from_rows(6, rows);
        let expected = batch_loss(&second, &state.features, &state.pools, &oracle_bank, &state.params, &cfg)
            .unwrap()
            .loss;
        let got = state.step_on(&second).unwrap().loss;
        assert_eq!(got, expected);
    }

    #[test]
    fn fixed_weights_freezes_tables() {
        let corpus = small_corpus(10, &[12]);
        let cfg = TrainConfig {
            variant: Variant::FixedWeights,
            ..small_config()
        };
        let mut state = TrainState::new(corpus, cfg).unwrap();
        let before: Vec<PositivePool> = state.pools.iter().cloned().collect();
        for _ in 0..5 {
            state.step().unwrap();
        }
        let after: Vec<PositivePool> = state.pools.iter().cloned().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let corpus = small_corpus(11, &[15, 11]);
        let a = train(corpus.clone(), small_config(), None).unwrap();
        let b = train(corpus, small_config(), None).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.params, b.params);
        assert_eq!(a.bank, b.bank);
    }

    #[test]
    fn checkpoints_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 4,
            ..small_config()
        };
        let out = train(small_corpus(12, &[15]), cfg, Some(dir.path())).unwrap();
        for f in ["enc.bin", "bank.bin", "pools.bin", "loss.csv", "train.cfg"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(dir.path().join("step-4/enc.bin").exists());
        assert!(dir.path().join("step-8/bank.bin").exists());
        let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 11);
        assert_eq!(csv.lines().next().unwrap(), LOSS_CSV_HEADER);
        assert_eq!(EncoderParams::load(&dir.path().join("enc.bin")).unwrap(), out.params.rounded_to_f32());
    }

    #[test]
    fn non_finite_parameters_abort() {
        let corpus = small_corpus(13, &[10]);
        let mut state = TrainState::new(corpus, small_config()).unwrap();
        let batch = state.next_batch().unwrap();
        let b = state.features.anchor[batch[0].0].entries()[0].0 as usize;
        state.params.set(0, b, f64::NAN);
        assert!(matches!(state.step_on(&batch), Err(Error::NonFinite(_))));
    }
}
