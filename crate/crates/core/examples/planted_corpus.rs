//! Writes the planted benchmark (two training graphs plus a held-out one)
//! as JSONL nodes, TSV edges and manifests.
//!
//! Usage: `cargo run -p tagcl-core --example planted_corpus -- OUT_DIR [SEED]`

use std::path::PathBuf;

use tagcl_core::graph_store::{write_graph, write_manifest};
use tagcl_core::synthetic::{benchmark_graphs, PlantedConfig};

fn main() -> tagcl_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "planted".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    std::fs::create_dir_all(&out)?;
    let (corpus, held_out) = benchmark_graphs(&PlantedConfig::default(), seed)?;
    let train: Vec<_> = corpus
        .graphs()
        .iter()
        .map(|g| write_graph(&out, g))
        .collect::<tagcl_core::Result<_>>()?;
    write_manifest(&out.join("train.jsonl"), &train)?;
    let held = write_graph(&out, &held_out)?;
    write_manifest(&out.join("heldout.jsonl"), std::slice::from_ref(&held))?;
    let mut all = train;
    all.push(held);
    write_manifest(&out.join("all.jsonl"), &all)?;
    println!("wrote {} graphs to {}", all.len(), out.display());
    Ok(())
}
