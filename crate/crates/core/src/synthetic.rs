//! Planted text-attributed graphs for benchmarks and end-to-end tests.
//!
//! Nodes belong to a community (the label) and to one of the community's
//! topics. A node's text mixes a few words drawn from its topic's vocabulary,
//! a community word, and background noise. Edges follow a stochastic block
//! model: dense inside a topic, sparser inside a community, rare across.
//! Vocabularies depend only on `vocab_seed`, so graphs generated with
//! different `seed`s share them.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_store::{TagCorpus, TextAttributedGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub graph_id: String,
    pub domain_text: String,
    pub nodes: usize,
    pub communities: usize,
    pub topics_per_community: usize,
    pub topic_vocab: usize,
    pub community_vocab: usize,
    pub noise_vocab: usize,
    pub topic_words: usize,
    pub community_words: usize,
    pub noise_words: usize,
    /// Expected neighbors inside the node's topic.
    pub degree_topic: f64,
    /// Expected neighbors in other topics of the same community.
    pub degree_community: f64,
    /// Expected neighbors in other communities.
    pub degree_across: f64,
    pub vocab_seed: u64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            graph_id: "planted".into(),
            domain_text: "A synthetic catalog of items.".into(),
            nodes: 400,
            communities: 2,
            topics_per_community: 4,
            topic_vocab: 24,
            community_vocab: 24,
            noise_vocab: 4000,
            topic_words: 6,
            community_words: 1,
            noise_words: 6,
            degree_topic: 5.0,
            degree_community: 1.0,
            degree_across: 0.5,
            vocab_seed: 7,
            seed: 0,
        }
    }
}

const SYLLABLES: &[&str] = &[
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu", "na", "pe", "qi", "ro", "su", "ta", "ve",
    "wi", "xo", "yu", "za", "bre", "cla", "dro", "fli", "gro", "pla", "tri", "sko", "vun",
];

/// `count` distinct pseudo-words, none of which is in `taken`.
fn words(rng: &mut ChaCha8Rng, count: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.random_range(2..=4);
        let w: String = (0..len).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Word lists shared by every graph built from the same `vocab_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    /// Indexed by `community * topics_per_community + topic`.
    pub topics: Vec<Vec<String>>,
    pub communities: Vec<Vec<String>>,
    pub noise: Vec<String>,
}

impl Vocabulary {
    pub fn new(cfg: &PlantedConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.vocab_seed);
        let mut taken = HashSet::new();
        let topics = (0..cfg.communities * cfg.topics_per_community)
            .map(|_| words(&mut rng, cfg.topic_vocab, &mut taken))
            .collect();
        let communities = (0..cfg.communities)
            .map(|_| words(&mut rng, cfg.community_vocab, &mut taken))
            .collect();
        let noise = words(&mut rng, cfg.noise_vocab, &mut taken);
        Self {
            topics,
            communities,
            noise,
        }
    }
}

fn validate(cfg: &PlantedConfig) -> Result<()> {
    let positive = [
        cfg.nodes,
        cfg.communities,
        cfg.topics_per_community,
        cfg.topic_vocab,
        cfg.community_vocab,
        cfg.noise_vocab,
    ];
    if positive.contains(&0) {
        return Err(Error::Config("planted graph sizes must be positive".into()));
    }
    if cfg.communities < 2 {
        return Err(Error::Config("planted graph needs at least two communities".into()));
    }
    for d in [cfg.degree_topic, cfg.degree_community, cfg.degree_across] {
        if !(d.is_finite() && d >= 0.0) {
            return Err(Error::Config(format!("invalid expected degree {d}")));
        }
    }
    Ok(())
}

/// Generates one planted graph; node labels are communities.
pub fn planted_graph(cfg: &PlantedConfig) -> Result<TextAttributedGraph> {
    validate(cfg)?;
    let vocab = Vocabulary::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let num_topics = cfg.communities * cfg.topics_per_community;
    let topic: Vec<usize> = (0..cfg.nodes).map(|_| rng.random_range(0..num_topics)).collect();
    let community: Vec<usize> = topic.iter().map(|t| t / cfg.topics_per_community).collect();

    let texts: Vec<String> = (0..cfg.nodes)
        .map(|v| {
            let mut w: Vec<&str> = Vec::new();
            for _ in 0..cfg.topic_words {
                w.push(vocab.topics[topic[v]].choose(&mut rng).expect("non-empty"));
            }
            for _ in 0..cfg.community_words {
                w.push(vocab.communities[community[v]].choose(&mut rng).expect("non-empty"));
            }
            for _ in 0..cfg.noise_words {
                w.push(vocab.noise.choose(&mut rng).expect("non-empty"));
            }
            w.shuffle(&mut rng);
            w.join(" ")
        })
        .collect();

    let mut per_topic = vec![0usize; num_topics];
    for &t in &topic {
        per_topic[t] += 1;
    }
    let n = cfg.nodes as f64;
    let same_topic = |t: usize| (per_topic[t] as f64 - 1.0).max(1.0);
    let per_comm = n / cfg.communities as f64;
    let mut edges = Vec::new();
    for u in 0..cfg.nodes {
        for v in u + 1..cfg.nodes {
            let p = if topic[u] == topic[v] {
                cfg.degree_topic / same_topic(topic[u])
            } else if community[u] == community[v] {
                cfg.degree_community / (per_comm - per_topic[topic[u]] as f64).max(1.0)
            } else {
                cfg.degree_across / (n - per_comm).max(1.0)
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let labels = community.iter().map(|&c| Some(c as u32)).collect();
    TextAttributedGraph::new(cfg.graph_id.clone(), cfg.domain_text.clone(), texts, labels, &edges)
}

/// Graphs sharing vocabularies, one per `(graph_id, domain_text, seed)`.
pub fn planted_family(base: &PlantedConfig, members: &[(&str, &str, u64)]) -> Result<Vec<TextAttributedGraph>> {
    members
        .iter()
        .map(|&(id, domain, seed)| {
            planted_graph(&PlantedConfig {
                graph_id: id.into(),
                domain_text: domain.into(),
                seed,
                ..base.clone()
            })
        })
        .collect()
}

/// The standard benchmark: two training graphs and a held-out third graph
/// from the same family.
pub fn benchmark_graphs(base: &PlantedConfig, seed: u64) -> Result<(TagCorpus, TextAttributedGraph)> {
    let mut graphs = planted_family(
        base,
        &[
            ("shop-a", "An online shop of household goods.", seed * 3 + 1),
            ("shop-b", "A marketplace listing of hobby supplies.", seed * 3 + 2),
            ("shop-c", "A retailer catalog of outdoor equipment.", seed * 3 + 3),
        ],
    )?;
    let held_out = graphs.pop().expect("three graphs");
    Ok((TagCorpus::new(graphs)?, held_out))
}
