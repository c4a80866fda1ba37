//! Contrastive pretraining of a single text encoder across several
//! text-attributed graphs.
//!
//! The pipeline is: load graphs into a [`TagCorpus`], build per-anchor
//! positive pools with degree-gated first/second-hop sampling ranked by
//! personalized PageRank ([`sampler`]), initialize a [`MemoryBank`] with the
//! frozen initial encoder, and run mini-batch InfoNCE training where each
//! anchor's positive is a learnable softmax mixture of bank rows
//! ([`positive_gen`], [`trainer`]). Frozen embeddings are scored with a
//! linear probe and a link-prediction head ([`evaluator`]).

pub mod binio;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod graph_store;
pub mod memory_bank;
pub mod positive_gen;
pub mod ppr;
pub mod sampler;
pub mod synthetic;
pub mod trainer;

pub use encoder::{EncoderConfig, EncoderParams, FeatureVector, ProjectionGrad, TextEncoder};
pub use error::{Error, Result};
pub use evaluator::{EvalReport, MetricSummary, SplitSpec};

pub use memory_bank::MemoryBank;
pub use graph_store::{GlobalNodeIndex, TagCorpus, TextAttributedGraph};


pub use positive_gen::SelectionWeights;
pub use ppr::{PprConfig, PprScores};
pub use sampler::{PoolSet, PositivePool};
pub use trainer::{StepReport, TrainConfig, TrainState, Variant};

