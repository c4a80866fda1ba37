use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Value};
use tagcl_core::encoder::HashFeatureEncoder;
use tagcl_core::evaluator::probe::ProbeConfig;
use tagcl_core::evaluator::{
    embed_graph, link_prediction, linear_probe_nc, load_embeddings, parse_ratios, save_embeddings,
    training_selection, transfer_eval, LinkPredConfig, TransferConfig, TransferMode,
};
use tagcl_core::graph_store::{ingest_graph, load_graphs, read_manifest, write_manifest, ManifestEntry};
use tagcl_core::ppr::PprCache;
use tagcl_core::sampler::{build_all_pools_from_cache, compute_ppr_cache};
use tagcl_core::synthetic::{benchmark_graphs, PlantedConfig};
use tagcl_core::trainer::run as run_training;
use tagcl_core::{
    EncoderParams, Error, EvalReport, PoolSet, Result, TagCorpus, TextAttributedGraph, TextEncoder,
    TrainConfig, TrainState, Variant,
};

use crate::{
    BenchArgs, Cli, Command, EmbedArgs, EvalLpArgs, EvalNcArgs, GlobalArgs, HyperArgs,
    IngestArgs, PoolArgs, RunArgs, SampleArgs, TrainArgs, TransferArgs,
};

pub fn dispatch(cli: &Cli) -> Result<()> {
    if cli.global.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Ingest(a) => ingest(g, a),
        Command::Sample(a) => sample(g, a),
        Command::Train(a) => train(g, a),
        Command::Embed(a) => embed(g, a),
        Command::EvalNc(a) => eval_nc(g, a),
        Command::EvalLp(a) => eval_lp(g, a),
        Command::Transfer(a) => transfer(g, a),
        Command::Bench(a) => bench(g, a),
    }
}

fn emit(g: &GlobalArgs, value: &Value) {
    if g.json {
        println!("{}", serde_json::to_string_pretty(value).expect("json value"));
        return;
    }
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                match v {
                    Value::String(s) => println!("{k}: {s}"),
                    other => println!("{k}: {other}"),
                }
            }
        }
        other => println!("{other}"),
    }
}

fn emit_report(g: &GlobalArgs, report: &EvalReport, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, report.to_json_pretty() + "\n")?;
    }
    if g.json {
        println!("{}", report.to_json_pretty());
    } else {
        println!("task: {} ({} runs)", report.task, report.runs);
        for (name, m) in &report.metrics {
            println!("{name}: {:.4} ± {:.4}", m.mean, m.std);
        }
    }
    Ok(())
}

/// Input files that do not exist are usage errors, not runtime failures.
fn input(path: &Path) -> Result<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Validation(format!("{}: no such file", path.display())))
    }
}

fn base_config(g: &GlobalArgs) -> Result<TrainConfig> {
    let mut cfg = match &g.config {
        Some(p) => TrainConfig::from_file(input(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_pool_args(cfg: &mut TrainConfig, a: &PoolArgs) {
    if let Some(t) = a.num_pos_samples {
        cfg.num_positives = t;
    }
    if let Some(r) = a.restart_prob {
        cfg.ppr.restart_prob = r;
    }
    if let Some(e) = a.ppr_epsilon {
        cfg.ppr.epsilon = e;
    }
}

fn resolve_config(g: &GlobalArgs, h: &HyperArgs, variant: Option<&str>) -> Result<TrainConfig> {
    let mut cfg = base_config(g)?;
    apply_pool_args(&mut cfg, &h.pool);
    if let Some(x) = h.temperature {
        cfg.temperature = x;
    }
    if let Some(x) = h.alpha {
        cfg.alpha = x;
    }
    if let Some(x) = h.batch_size {
        cfg.batch_size = x;
    }
    if let Some(x) = h.learning_rate {
        cfg.learning_rate = x;
    }
    if let Some(x) = h.steps {
        cfg.steps = x;
    }
    if h.epochs.is_some() {
        cfg.epochs = h.epochs;
    }
    if let Some(x) = h.feature_dim {
        cfg.encoder.feature_dim = x;
    }
    if let Some(x) = h.embed_dim {
        cfg.encoder.embed_dim = x;
    }
    if let Some(x) = h.checkpoint_every {
        cfg.checkpoint_every = x;
    }
    if let Some(v) = variant {
        cfg.variant = v.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split_seeds(g: &GlobalArgs, run: &RunArgs) -> Result<Vec<u64>> {
    if run.runs == 0 {
        return Err(Error::Config("--runs must be at least 1".into()));
    }
    let base = g.seed.unwrap_or(0);
    Ok((0..run.runs).map(|i| base + i).collect())
}

fn probe_config(run: &RunArgs) -> ProbeConfig {
    ProbeConfig {
        max_iters: run.probe_iters,
        ..ProbeConfig::default()
    }
}

fn load_corpus(manifest: &Path) -> Result<TagCorpus> {
    TagCorpus::new(load_graphs(&read_manifest(input(manifest)?)?)?)
}

/// Every graph of the corpus, or only the one named `graph`.
fn selected_graphs<'a>(corpus: &'a TagCorpus, graph: Option<&str>) -> Result<Vec<&'a TextAttributedGraph>> {
    match graph {
        None => Ok(corpus.graphs().iter().collect()),
        Some(id) => corpus
            .graph_position(id)
            .map(|i| vec![corpus.graph(i)])
            .ok_or_else(|| Error::Validation(format!("graph {id:?} is not in the manifest"))),
    }
}

enum Encoder {
    Trained(EncoderParams),
    Hash(HashFeatureEncoder),
}

impl Encoder {
    fn open(ckpt: Option<&Path>, hash: bool, feature_dim: Option<usize>) -> Result<Self> {
        match (ckpt, hash) {
            (_, true) => Ok(Self::Hash(HashFeatureEncoder {
                feature_dim: feature_dim.unwrap_or(tagcl_core::EncoderConfig::default().feature_dim),
            })),
            (Some(p), false) => Ok(Self::Trained(EncoderParams::load(input(p)?)?)),
            (None, false) => Err(Error::Validation("an encoder checkpoint or --hash is required".into())),
        }
    }

    fn as_dyn(&self) -> &dyn TextEncoder {
        match self {
            Self::Trained(p) => p,
            Self::Hash(h) => h,
        }
    }
}

fn graph_stats(g: &TextAttributedGraph) -> Value {
    json!({
        "graph_id": g.graph_id(),
        "nodes": g.node_count(),
        "edges": g.edge_count(),
        "average_degree": g.average_degree(),
        "max_degree": g.max_degree(),
        "labeled": g.is_labeled(),
        "classes": g.num_classes(),
    })
}

fn ingest(g: &GlobalArgs, a: &IngestArgs) -> Result<()> {
    let graphs = match (&a.manifest, &a.nodes, &a.edges, &a.graph_id) {
        (Some(m), ..) => load_graphs(&read_manifest(input(m)?)?)?,
        (None, Some(nodes), Some(edges), Some(id)) => {
            let domain = a.domain_text.clone().unwrap_or_default();
            let graph = ingest_graph(id, input(nodes)?, input(edges)?, &domain)?;
            if let Some(manifest) = &a.append {
                append_entry(manifest, id, nodes, edges, &domain)?;
            }
            vec![graph]
        }
        _ => return Err(Error::Validation("give --manifest or --nodes, --edges and --graph-id".into())),
    };
    let corpus = TagCorpus::new(graphs)?;
    let value = json!({
        "graphs": corpus.graphs().iter().map(graph_stats).collect::<Vec<_>>(),
        "total_nodes": corpus.total_nodes(),
    });
    if g.json {
        emit(g, &value);
    } else {
        for graph in corpus.graphs() {
            println!(
                "{}: {} nodes, {} edges, average degree {:.2}, {} classes",
                graph.graph_id(),
                graph.node_count(),
                graph.edge_count(),
                graph.average_degree(),
                graph.num_classes()
            );
        }
        println!("total nodes: {}", corpus.total_nodes());
    }
    Ok(())
}

fn append_entry(manifest: &Path, id: &str, nodes: &Path, edges: &Path, domain: &str) -> Result<()> {
    let mut entries = if manifest.exists() { read_manifest(manifest)? } else { Vec::new() };
    let entry = ManifestEntry {
        graph_id: id.to_string(),
        nodes: fs::canonicalize(nodes)?,
        edges: fs::canonicalize(edges)?,
        domain_text: domain.to_string(),
    };
    match entries.iter_mut().find(|e| e.graph_id == id) {
        Some(e) => *e = entry,
        None => entries.push(entry),
    }
    write_manifest(manifest, &entries)
}

fn build_pools(corpus: &TagCorpus, cfg: &TrainConfig, cache_path: Option<&Path>) -> Result<PoolSet> {
    let cache = match cache_path {
        Some(p) if p.exists() => {
            let cache = PprCache::load(p)?;
            if cache.config != Some(cfg.ppr) {
                return Err(Error::Validation(format!(
                    "{} was computed with different PPR settings",
                    p.display()
                )));
            }
            cache
        }
        _ => {
            let cache = compute_ppr_cache(corpus, cfg.ppr)?;
            if let Some(p) = cache_path {
                cache.save(p)?;
            }
            cache
        }
    };
    build_all_pools_from_cache(corpus, cfg.num_positives, &cache)
}

fn sample(g: &GlobalArgs, a: &SampleArgs) -> Result<()> {
    let mut cfg = base_config(g)?;
    apply_pool_args(&mut cfg, &a.pool);
    cfg.validate()?;
    let corpus = load_corpus(&a.manifest)?;
    let pools = build_pools(&corpus, &cfg, a.ppr_cache.as_deref())?;
    pools.save(&a.out)?;
    let sizes: Vec<usize> = pools.iter().map(|p| p.len()).collect();
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64;
    emit(
        g,
        &json!({
            "pools": sizes.len(),
            "excluded": pools.excluded_count(),
            "num_pos_samples": pools.num_positives(),
            "mean_pool_size": mean,
            "out": a.out.display().to_string(),
        }),
    );
    Ok(())
}

fn new_state(corpus: TagCorpus, cfg: TrainConfig, pools_path: Option<&Path>) -> Result<TrainState> {
    match pools_path {
        None => TrainState::new(corpus, cfg),
        Some(p) => {
            let pools = PoolSet::load(input(p)?)?;
            if pools.num_positives() != cfg.num_positives {
                return Err(Error::Validation(format!(
                    "{} holds pools of size {}, config asks for {}",
                    p.display(),
                    pools.num_positives(),
                    cfg.num_positives
                )));
            }
            TrainState::with_pools(corpus, cfg, pools)
        }
    }
}

fn train(g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(g, &a.hyper, a.variant.as_deref())?;
    let corpus = load_corpus(&a.manifest)?;
    let state = new_state(corpus, cfg.clone(), a.pools.as_deref())?;
    let (eligible, excluded) = (state.eligible.len(), state.pools.excluded_count());
    let outcome = run_training(state, Some(&a.out))?;
    let curve = &outcome.curve;
    let tail = &curve[curve.len().saturating_sub(10)..];
    let tail_mean = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
    emit(
        g,
        &json!({
            "steps": curve.len(),
            "variant": cfg.variant.as_str(),
            "eligible_anchors": eligible,
            "excluded_anchors": excluded,
            "initial_loss": curve.first().map(|r| r.loss),
            "final_loss": curve.last().map(|r| r.loss),
            "final_loss_mean10": tail_mean,
            "out": a.out.display().to_string(),
        }),
    );
    Ok(())
}

fn embed(g: &GlobalArgs, a: &EmbedArgs) -> Result<()> {
    let enc = Encoder::open(a.encoder.ckpt.as_deref(), a.encoder.hash, a.encoder.feature_dim)?;
    let corpus = load_corpus(&a.manifest)?;
    let mut rows = Vec::new();
    for graph in selected_graphs(&corpus, a.graph.as_deref())? {
        rows.extend(embed_graph(enc.as_dyn(), graph)?);
    }
    save_embeddings(&a.out, &rows)?;
    emit(
        g,
        &json!({
            "rows": rows.len(),
            "dim": enc.as_dyn().embed_dim(),
            "out": a.out.display().to_string(),
        }),
    );
    Ok(())
}

/// Runs `per_graph` on each graph; metric names get a `graph_id.` prefix
/// when more than one graph is evaluated.
fn per_graph_report(
    task: &str,
    graphs: &[&TextAttributedGraph],
    runs: usize,
    mut per_graph: impl FnMut(usize, &TextAttributedGraph) -> Result<EvalReport>,
) -> Result<EvalReport> {
    if graphs.len() == 1 {
        return per_graph(0, graphs[0]);
    }
    let mut report = EvalReport {
        task: task.into(),
        metrics: BTreeMap::new(),
        runs,
    };
    for (i, graph) in graphs.iter().enumerate() {
        let r = per_graph(i, graph)?;
        report.merge_prefixed(graph.graph_id(), &r);
    }
    Ok(report)
}

fn eval_nc(g: &GlobalArgs, a: &EvalNcArgs) -> Result<()> {
    let ratios = parse_ratios(&a.ratios)?;
    let seeds = split_seeds(g, &a.run)?;
    let probe = probe_config(&a.run);
    let corpus = load_corpus(&a.manifest)?;
    let graphs = selected_graphs(&corpus, a.graph.as_deref())?;
    if let Some(gr) = graphs.iter().find(|gr| !gr.is_labeled()) {
        return Err(Error::Validation(format!("graph {:?} has no labels", gr.graph_id())));
    }
    let precomputed = match &a.emb {
        Some(p) => {
            let rows = load_embeddings(input(p)?)?;
            let expected: usize = graphs.iter().map(|gr| gr.node_count()).sum();
            if rows.len() != expected {
                return Err(Error::Validation(format!(
                    "{} has {} rows, the evaluated graphs have {expected} nodes",
                    p.display(),
                    rows.len()
                )));
            }
            Some(rows)
        }
        None => None,
    };
    let enc = match precomputed {
        Some(_) => None,
        None => Some(Encoder::open(a.ckpt.as_deref(), a.hash, a.feature_dim)?),
    };
    let mut offset = 0;
    let report = per_graph_report("node_classification", &graphs, seeds.len(), |_, graph| {
        let n = graph.node_count();
        let emb = match (&precomputed, &enc) {
            (Some(rows), _) => rows[offset..offset + n].to_vec(),
            (None, Some(e)) => embed_graph(e.as_dyn(), graph)?,
            (None, None) => unreachable!("an embedding source is always chosen"),
        };
        offset += n;
        linear_probe_nc(&emb, graph, ratios, &seeds, &probe)
    })?;
    emit_report(g, &report, a.run.report.as_deref())
}

fn eval_lp(g: &GlobalArgs, a: &EvalLpArgs) -> Result<()> {
    let ratios = parse_ratios(&a.edge_ratios)?;
    let seeds = split_seeds(g, &a.run)?;
    let cfg = LinkPredConfig {
        hits_k: a.hits_k,
        probe: probe_config(&a.run),
    };
    let enc = Encoder::open(a.encoder.ckpt.as_deref(), a.encoder.hash, a.encoder.feature_dim)?;
    let corpus = load_corpus(&a.manifest)?;
    let graphs = selected_graphs(&corpus, a.graph.as_deref())?;
    let report = per_graph_report("link_prediction", &graphs, seeds.len(), |_, graph| {
        link_prediction(enc.as_dyn(), graph, ratios, &seeds, &cfg)
    })?;
    emit_report(g, &report, a.run.report.as_deref())
}

fn transfer(g: &GlobalArgs, a: &TransferArgs) -> Result<()> {
    let mode: TransferMode = a.mode.parse()?;
    let cfg = resolve_config(g, &a.hyper, a.variant.as_deref())?;
    let tcfg = TransferConfig {
        node_ratios: parse_ratios(&a.ratios)?,
        edge_ratios: parse_ratios(&a.edge_ratios)?,
        seeds: split_seeds(g, &a.run)?,
        probe: probe_config(&a.run),
        link_prediction: !a.no_link_prediction,
        feature_dim: cfg.encoder.feature_dim,
        ..TransferConfig::default()
    };
    let graphs = load_graphs(&read_manifest(input(&a.manifest)?)?)?;
    let held_pos = graphs
        .iter()
        .position(|gr| gr.graph_id() == a.held_out)
        .ok_or_else(|| Error::Validation(format!("graph {:?} is not in the manifest", a.held_out)))?;
    let keys: Vec<(String, String)> = graphs
        .iter()
        .map(|gr| (gr.graph_id().to_string(), gr.domain_text().to_string()))
        .collect();
    let entries: Vec<(&str, &str)> = keys.iter().map(|(i, d)| (i.as_str(), d.as_str())).collect();
    let picked = training_selection(&entries, entries[held_pos], mode);
    if picked.is_empty() {
        return Err(Error::Validation(format!(
            "no training graphs remain for held-out {:?} in {} mode",
            a.held_out, a.mode
        )));
    }
    let mut slots: Vec<Option<TextAttributedGraph>> = graphs.into_iter().map(Some).collect();
    let held_out = slots[held_pos].take().expect("held-out graph present");
    let training: Vec<TextAttributedGraph> = picked
        .iter()
        .map(|&i| slots[i].take().expect("each graph picked once"))
        .collect();
    let train_ids: Vec<String> = training.iter().map(|gr| gr.graph_id().to_string()).collect();
    let outcome = run_training(TrainState::new(TagCorpus::new(training)?, cfg)?, a.out.as_deref())?;
    let report = transfer_eval(&outcome.params, Some(&outcome.initial_params), &held_out, &tcfg)?;
    if !g.json {
        println!("trained on: {}", train_ids.join(", "));
        println!("held out: {}", held_out.graph_id());
    }
    emit_report(g, &report, a.run.report.as_deref())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn bench(g: &GlobalArgs, a: &BenchArgs) -> Result<()> {
    let cfg = resolve_config(g, &a.hyper, None)?;
    let variants = a
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>>>()?;
    if variants.is_empty() {
        return Err(Error::Validation("no variant to time".into()));
    }
    let corpus = match &a.manifest {
        Some(m) => load_corpus(m)?,
        None => benchmark_graphs(&PlantedConfig::default(), cfg.seed)?.0,
    };
    let pools = build_pools(&corpus, &cfg, None)?;
    let mut states = variants
        .iter()
        .map(|&variant| {
            let c = TrainConfig {
                variant,
                ..cfg.clone()
            };
            TrainState::with_pools(corpus.clone(), c, pools.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let steps = cfg.total_steps(states[0].eligible.len());
    if steps == 0 {
        return Err(Error::Config("bench needs at least one step".into()));
    }
    let mut times = vec![Vec::with_capacity(steps); states.len()];
    for _ in 0..steps {
        for (state, t) in states.iter_mut().zip(&mut times) {
            let start = Instant::now();
            state.step()?;
            t.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mut results = Vec::new();
    let mut medians = BTreeMap::new();
    for (variant, t) in variants.iter().zip(&times) {
        let mut sorted = t.clone();
        sorted.sort_by(f64::total_cmp);
        let median = percentile(&sorted, 0.5);
        medians.insert(variant.as_str(), median);
        results.push(json!({
            "variant": variant.as_str(),
            "median_ms": median,
            "mean_ms": t.iter().sum::<f64>() / t.len() as f64,
            "p90_ms": percentile(&sorted, 0.9),
            "step_ms": t,
        }));
    }
    let speedup = match (medians.get("full"), medians.get("no_bank")) {
        (Some(f), Some(n)) if *f > 0.0 => Some(n / f),
        _ => None,
    };
    let value = json!({
        "nodes": corpus.total_nodes(),
        "graphs": corpus.num_graphs(),
        "num_pos_samples": cfg.num_positives,
        "batch_size": cfg.batch_size,
        "steps": steps,
        "variants": results,
        "speedup_median": speedup,
    });
    if let Some(p) = &a.report {
        fs::write(p, serde_json::to_string_pretty(&value)? + "\n")?;
    }
    if g.json {
        emit(g, &value);
    } else {
        println!(
            "{} nodes, t = {}, batch {}, {steps} steps",
            corpus.total_nodes(),
            cfg.num_positives,
            cfg.batch_size
        );
        for (variant, median) in &medians {
            println!("{variant}: median {median:.3} ms/step");
        }
        if let Some(s) = speedup {
            println!("speedup (no_bank / full): {s:.2}x");
        }
    }
    Ok(())
}
