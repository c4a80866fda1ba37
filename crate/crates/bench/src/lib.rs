//! Shared fixtures for the criterion benches.

use tagcl_core::synthetic::{benchmark_graphs, PlantedConfig};
use tagcl_core::{TagCorpus, TrainConfig, TrainState, Variant};

/// The two training graphs of the planted benchmark (800 nodes).
pub fn benchmark_corpus() -> TagCorpus {
    benchmark_graphs(&PlantedConfig::default(), 0).expect("benchmark corpus").0
}

/// Desk preset: t = 15, batch 64, lr 2.
pub fn desk_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        learning_rate: 2.0,
        variant,
        ..TrainConfig::default()
    }
}

pub fn train_state(variant: Variant) -> TrainState {
    TrainState::new(benchmark_corpus(), desk_config(variant)).expect("train state")
}

/// Anchor texts of the first `n` corpus nodes.
pub fn sample_texts(corpus: &TagCorpus, n: usize) -> Vec<String> {
    (0..n.min(corpus.total_nodes()))
        .map(|v| corpus.anchor_text(tagcl_core::GlobalNodeIndex(v)).expect("node in range"))
        .collect()
}
