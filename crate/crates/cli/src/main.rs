//! `tagcl`: ingest graphs, build positive pools, pretrain, embed and evaluate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tagcl", version, about = "Contrastive pretraining of a text encoder over text-attributed graphs")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice; overrides the config file [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` config file; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate graph files and print their statistics
    Ingest(IngestArgs),
    /// Build positive pools for every anchor of a corpus
    Sample(SampleArgs),
    /// Pretrain the encoder on a corpus
    Train(TrainArgs),
    /// Write node embeddings of a corpus
    Embed(EmbedArgs),
    /// Linear-probe node classification
    #[command(name = "eval-nc")]
    EvalNc(EvalNcArgs),
    /// Link prediction on held-out edges
    #[command(name = "eval-lp")]
    EvalLp(EvalLpArgs),
    /// Train on a selection of graphs and evaluate on a held-out one
    Transfer(TransferArgs),
    /// Per-step wall clock of training variants
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Manifest to validate (JSON Lines of graph_id, nodes, edges, domain_text)
    #[arg(long, required_unless_present = "nodes", conflicts_with_all = ["nodes", "edges", "graph_id", "domain_text", "append"])]
    pub manifest: Option<PathBuf>,
    /// Nodes file (JSON Lines of id, text, label)
    #[arg(long, requires_all = ["edges", "graph_id"])]
    pub nodes: Option<PathBuf>,
    /// Edges file (one `u<TAB>v` pair per line)
    #[arg(long)]
    pub edges: Option<PathBuf>,
    #[arg(long)]
    pub graph_id: Option<String>,
    /// Domain description of the graph [default: ""]
    #[arg(long)]
    pub domain_text: Option<String>,
    /// Add (or replace) the graph's entry in this manifest
    #[arg(long)]
    pub append: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct PoolArgs {
    /// Positives per anchor [default: 15]
    #[arg(short = 't', long = "num-pos-samples")]
    pub num_pos_samples: Option<usize>,
    /// PPR teleport probability [default: 0.15]
    #[arg(long)]
    pub restart_prob: Option<f64>,
    /// PPR residual threshold per unit degree [default: 0.0001]
    #[arg(long)]
    pub ppr_epsilon: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct HyperArgs {
    #[command(flatten)]
    pub pool: PoolArgs,
    /// Softmax temperature [default: 0.3]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Weight of the selection-table regularizer [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Anchors per batch [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// SGD learning rate [default: 0.05]
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Optimization steps [default: 200]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Run this many epochs instead of a fixed step count [default: none]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hashed feature buckets [default: 4096]
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Embedding width [default: 64]
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Write an intermediate checkpoint every N steps, 0 = final only [default: 0]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Corpus manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output pool file
    #[arg(long)]
    pub out: PathBuf,
    /// PPR score cache; read when present, written otherwise
    #[arg(long)]
    pub ppr_cache: Option<PathBuf>,
    #[command(flatten)]
    pub pool: PoolArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint directory (enc.bin, bank.bin, pools.bin, train.cfg, loss.csv)
    #[arg(long)]
    pub out: PathBuf,
    /// Pools built by `sample`; built on the fly when absent
    #[arg(long)]
    pub pools: Option<PathBuf>,
    /// full, fixed_weights, sim_aggregate or no_bank [default: full]
    #[arg(long)]
    pub variant: Option<String>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct EncoderChoice {
    /// Encoder checkpoint (enc.bin)
    #[arg(long, required_unless_present = "hash", conflicts_with = "hash")]
    pub ckpt: Option<PathBuf>,
    /// Use raw hashed features instead of a trained encoder
    #[arg(long)]
    pub hash: bool,
    /// Hashed feature buckets for --hash [default: 4096]
    #[arg(long, requires = "hash")]
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub encoder: EncoderChoice,
    /// Corpus manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Only embed this graph
    #[arg(long)]
    pub graph: Option<String>,
    /// Output embedding file (UEMB)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Evaluation repeats; run i uses split seed `seed + i`
    #[arg(long, default_value_t = 5)]
    pub runs: u64,
    /// Probe gradient-descent iterations
    #[arg(long, default_value_t = 500)]
    pub probe_iters: usize,
    /// Also write the JSON report here
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalNcArgs {
    /// Corpus manifest with labels
    #[arg(long)]
    pub manifest: PathBuf,
    /// Only evaluate this graph
    #[arg(long)]
    pub graph: Option<String>,
    /// Precomputed embeddings (UEMB) in corpus order, instead of an encoder
    #[arg(long, conflicts_with_all = ["ckpt", "hash"], required_unless_present_any = ["ckpt", "hash"])]
    pub emb: Option<PathBuf>,
    /// Encoder checkpoint (enc.bin)
    #[arg(long, conflicts_with = "hash")]
    pub ckpt: Option<PathBuf>,
    /// Use raw hashed features
    #[arg(long)]
    pub hash: bool,
    /// Hashed feature buckets for --hash [default: 4096]
    #[arg(long, requires = "hash")]
    pub feature_dim: Option<usize>,
    /// Train:val:test node ratios
    #[arg(long, default_value = "5:20:75")]
    pub ratios: String,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalLpArgs {
    #[command(flatten)]
    pub encoder: EncoderChoice,
    /// Corpus manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Only evaluate this graph
    #[arg(long)]
    pub graph: Option<String>,
    /// Train:val:test edge ratios (5:10:85 gives the literal reading)
    #[arg(long, default_value = "85:10:5")]
    pub edge_ratios: String,
    /// K of Hits@K
    #[arg(long, default_value_t = 100)]
    pub hits_k: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Manifest of every candidate graph, held-out one included
    #[arg(long)]
    pub manifest: PathBuf,
    /// Graph id evaluated after training on the others
    #[arg(long)]
    pub held_out: String,
    /// in_domain trains on every other graph; cross_domain also drops graphs sharing its domain text
    #[arg(long, default_value = "in_domain")]
    pub mode: String,
    /// Checkpoint directory for the trained encoder
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train:val:test node ratios
    #[arg(long, default_value = "5:20:75")]
    pub ratios: String,
    /// Train:val:test edge ratios
    #[arg(long, default_value = "85:10:5")]
    pub edge_ratios: String,
    /// Skip link prediction on the held-out graph
    #[arg(long)]
    pub no_link_prediction: bool,
    /// full, fixed_weights, sim_aggregate or no_bank [default: full]
    #[arg(long)]
    pub variant: Option<String>,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Corpus manifest [default: the built-in planted benchmark corpus]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Variants to time, repeatable or comma separated
    #[arg(long = "variant", value_delimiter = ',', default_value = "full,no_bank")]
    pub variants: Vec<String>,
    /// Also write the JSON result here
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
