use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tagcl_core::graph_store::{write_graph, write_manifest};
use tagcl_core::synthetic::{planted_family, PlantedConfig};
use tagcl_core::TrainConfig;
use tempfile::TempDir;

const SMALL: &str = "\
batch_size = 16
learning_rate = 2.0
steps = 12
feature_dim = 512
embed_dim = 16
";

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Three 120-node planted graphs: `train.jsonl` lists g-a and g-b,
    /// `heldout.jsonl` lists g-c, `all.jsonl` lists every graph.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let base = PlantedConfig {
            nodes: 120,
            ..PlantedConfig::default()
        };
        let graphs = planted_family(
            &base,
            &[("g-a", "Domain one.", 1), ("g-b", "Domain two.", 2), ("g-c", "Domain three.", 3)],
        )
        .unwrap();
        let entries: Vec<_> = graphs.iter().map(|g| write_graph(dir.path(), g).unwrap()).collect();
        write_manifest(&dir.path().join("train.jsonl"), &entries[..2]).unwrap();
        write_manifest(&dir.path().join("heldout.jsonl"), &entries[2..]).unwrap();
        write_manifest(&dir.path().join("all.jsonl"), &entries).unwrap();
        fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

fn tagcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagcl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tagcl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    tagcl(args).status.code().expect("exited normally")
}

fn train_into(fx: &Fixture, out: &str, extra: &[&str]) {
    let (manifest, cfg, out) = (fx.arg("train.jsonl"), fx.arg("small.cfg"), fx.arg(out));
    let mut args = vec!["train", "--manifest", &manifest, "--config", &cfg, "--out", &out];
    args.extend_from_slice(extra);
    ok(&args);
}

fn uemb_header(path: &Path) -> (u32, u32, usize) {
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[..4], b"UEMB");
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    (n, d, bytes.len())
}

#[test]
fn help_lists_flags_with_defaults() {
    let d = TrainConfig::default();
    for verb in ["ingest", "sample", "train", "embed", "eval-nc", "eval-lp", "transfer", "bench"] {
        let text = ok(&[verb, "--help"]);
        assert!(text.contains("--seed"), "{verb} help lacks --seed");
        assert!(text.contains("--threads"), "{verb} help lacks --threads");
    }
    for verb in ["train", "transfer", "bench"] {
        let text = ok(&[verb, "--help"]);
        for needle in [
            format!("Softmax temperature [default: {}]", d.temperature),
            format!("Positives per anchor [default: {}]", d.num_positives),
            format!("Anchors per batch [default: {}]", d.batch_size),
            format!("SGD learning rate [default: {}]", d.learning_rate),
            format!("regularizer [default: {}]", d.alpha),
            format!("Optimization steps [default: {}]", d.steps),
            format!("Hashed feature buckets [default: {}]", d.encoder.feature_dim),
            format!("Embedding width [default: {}]", d.encoder.embed_dim),
            format!("teleport probability [default: {}]", d.ppr.restart_prob),
            format!("per unit degree [default: {}]", d.ppr.epsilon),
        ] {
            assert!(text.contains(&needle), "{verb} help lacks {needle:?}");
        }
    }
    assert!(ok(&["sample", "--help"]).contains("[default: 15]"));
}

#[test]
fn train_writes_checkpoint_and_loss_curve() {
    let fx = Fixture::new();
    train_into(&fx, "ckpt", &["--checkpoint-every", "5"]);
    for f in ["enc.bin", "bank.bin", "pools.bin", "train.cfg", "loss.csv", "step-5/enc.bin", "step-10/bank.bin"] {
        assert!(fx.path("ckpt").join(f).is_file(), "missing {f}");
    }
    assert_eq!(&fs::read(fx.path("ckpt/enc.bin")).unwrap()[..4], b"UENC");
    assert_eq!(&fs::read(fx.path("ckpt/bank.bin")).unwrap()[..4], b"UGLM");
    assert_eq!(&fs::read(fx.path("ckpt/pools.bin")).unwrap()[..4], b"UPOS");
    let csv = fs::read_to_string(fx.path("ckpt/loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,contrastive,kl,grad_norm");
    assert_eq!(lines.len(), 13);
    let cfg = TrainConfig::from_file(&fx.path("ckpt/train.cfg")).unwrap();
    assert_eq!((cfg.batch_size, cfg.steps, cfg.encoder.embed_dim), (16, 12, 16));
    assert_eq!(cfg.learning_rate, 2.0);
}

#[test]
fn flags_override_config_file() {
    let fx = Fixture::new();
    train_into(&fx, "ckpt", &["--steps", "3", "--temperature", "0.5", "-t", "4", "--seed", "9"]);
    let cfg = TrainConfig::from_file(&fx.path("ckpt/train.cfg")).unwrap();
    assert_eq!((cfg.steps, cfg.num_positives, cfg.seed), (3, 4, 9));
    assert_eq!(cfg.temperature, 0.5);
    assert_eq!(cfg.batch_size, 16);
}

#[test]
fn embed_writes_one_row_per_node() {
    let fx = Fixture::new();
    train_into(&fx, "ckpt", &[]);
    let (ckpt, out) = (fx.arg("ckpt/enc.bin"), fx.arg("emb.bin"));
    let stdout = ok(&["embed", "--ckpt", &ckpt, "--manifest", &fx.arg("heldout.jsonl"), "--out", &out, "--json"]);
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["rows"], 120);
    assert_eq!(uemb_header(&fx.path("emb.bin")), (120, 16, 12 + 120 * 16 * 4));

    ok(&["embed", "--ckpt", &ckpt, "--manifest", &fx.arg("all.jsonl"), "--out", &out]);
    assert_eq!(uemb_header(&fx.path("emb.bin")).0, 360);
    ok(&["embed", "--ckpt", &ckpt, "--manifest", &fx.arg("all.jsonl"), "--graph", "g-b", "--out", &out]);
    assert_eq!(uemb_header(&fx.path("emb.bin")).0, 120);
    ok(&["embed", "--hash", "--feature-dim", "256", "--manifest", &fx.arg("heldout.jsonl"), "--out", &out]);
    assert_eq!(uemb_header(&fx.path("emb.bin")), (120, 256, 12 + 120 * 256 * 4));
}

#[test]
fn eval_reports_have_the_documented_shape() {
    let fx = Fixture::new();
    train_into(&fx, "ckpt", &[]);
    let held = fx.arg("heldout.jsonl");
    let (ckpt, emb) = (fx.arg("ckpt/enc.bin"), fx.arg("emb.bin"));
    ok(&["embed", "--ckpt", &ckpt, "--manifest", &held, "--out", &emb]);

    let from_file: Value =
        serde_json::from_str(&ok(&["eval-nc", "--manifest", &held, "--emb", &emb, "--runs", "3", "--json"])).unwrap();
    assert_eq!(from_file["task"], "node_classification");
    assert_eq!(from_file["runs"], 3);
    let acc = from_file["metrics"]["accuracy"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(from_file["metrics"]["accuracy"]["std"].as_f64().unwrap() >= 0.0);

    let from_ckpt: Value =
        serde_json::from_str(&ok(&["eval-nc", "--manifest", &held, "--ckpt", &ckpt, "--runs", "3", "--json"])).unwrap();
    assert_eq!(from_ckpt, from_file);

    let two: Value = serde_json::from_str(&ok(&[
        "eval-nc", "--manifest", &fx.arg("train.jsonl"), "--hash", "--runs", "2", "--json",
    ]))
    .unwrap();
    assert!(two["metrics"]["g-a.accuracy"].is_object());
    assert!(two["metrics"]["g-b.accuracy"].is_object());

    let report = fx.arg("lp.json");
    for ratios in ["85:10:5", "5:10:85"] {
        let lp: Value = serde_json::from_str(&ok(&[
            "eval-lp", "--manifest", &held, "--ckpt", &ckpt, "--edge-ratios", ratios, "--runs", "2", "--json",
            "--report", &report,
        ]))
        .unwrap();
        assert_eq!(lp["task"], "link_prediction");
        for m in ["auc", "ap", "hits"] {
            let x = lp["metrics"][m]["mean"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&x), "{m} = {x}");
        }
        let saved: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(saved, lp);
    }
}

#[test]
fn same_argv_same_artifacts() {
    let fx = Fixture::new();
    train_into(&fx, "a", &[]);
    train_into(&fx, "b", &["--threads", "1"]);
    train_into(&fx, "c", &["--seed", "5"]);
    for f in ["enc.bin", "bank.bin", "pools.bin", "train.cfg", "loss.csv"] {
        let a = fs::read(fx.path("a").join(f)).unwrap();
        assert_eq!(a, fs::read(fx.path("b").join(f)).unwrap(), "{f} differs between runs");
    }
    assert_ne!(
        fs::read(fx.path("a/enc.bin")).unwrap(),
        fs::read(fx.path("c/enc.bin")).unwrap()
    );

    let held = fx.arg("heldout.jsonl");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let emb = fx.arg(&format!("{run}.emb"));
        let report = fx.arg(&format!("{run}.json"));
        let ckpt = fx.arg(&format!("{run}/enc.bin"));
        ok(&["embed", "--ckpt", &ckpt, "--manifest", &held, "--out", &emb]);
        let stdout = ok(&["eval-nc", "--manifest", &held, "--emb", &emb, "--report", &report, "--json"]);
        outputs.push((fs::read(&emb).unwrap(), fs::read(&report).unwrap(), stdout));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn sample_then_train_on_saved_pools() {
    let fx = Fixture::new();
    let (manifest, pools, cache) = (fx.arg("train.jsonl"), fx.arg("pools.bin"), fx.arg("ppr.bin"));
    let v: Value = serde_json::from_str(&ok(&[
        "sample", "--manifest", &manifest, "--out", &pools, "--ppr-cache", &cache, "--json",
    ]))
    .unwrap();
    assert_eq!(v["num_pos_samples"], 15);
    assert_eq!(
        v["pools"].as_u64().unwrap() + v["excluded"].as_u64().unwrap(),
        240
    );
    assert_eq!(&fs::read(&cache).unwrap()[..4], b"UPPR");
    let first = fs::read(&pools).unwrap();
    ok(&["sample", "--manifest", &manifest, "--out", &pools, "--ppr-cache", &cache]);
    assert_eq!(fs::read(&pools).unwrap(), first, "cached rerun differs");

    train_into(&fx, "from-pools", &["--pools", &pools]);
    train_into(&fx, "fresh", &[]);
    for f in ["enc.bin", "bank.bin", "pools.bin", "loss.csv"] {
        assert_eq!(
            fs::read(fx.path("from-pools").join(f)).unwrap(),
            fs::read(fx.path("fresh").join(f)).unwrap(),
            "{f}"
        );
    }
    let args = [
        "train", "--manifest", &manifest, "--config", &fx.arg("small.cfg"), "--out", &fx.arg("x"), "--pools", &pools,
        "-t", "3",
    ];
    assert_eq!(code(&args), 1);
    let bad_cache = ["sample", "--manifest", &manifest, "--out", &pools, "--ppr-cache", &cache, "--restart-prob", "0.3"];
    assert_eq!(code(&bad_cache), 1);
}

#[test]
fn ingest_validates_and_appends_idempotently() {
    let fx = Fixture::new();
    let v: Value = serde_json::from_str(&ok(&["ingest", "--manifest", &fx.arg("all.jsonl"), "--json"])).unwrap();
    assert_eq!(v["total_nodes"], 360);
    assert_eq!(v["graphs"][1]["graph_id"], "g-b");
    assert_eq!(v["graphs"][0]["classes"], 2);

    let out = fx.arg("new.jsonl");
    let args = [
        "ingest", "--nodes", &fx.arg("g-c.nodes.jsonl"), "--edges", &fx.arg("g-c.edges.tsv"), "--graph-id", "g-c",
        "--domain-text", "Domain three.", "--append", &out,
    ];
    ok(&args);
    ok(&args);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1);
    let a: Value = serde_json::from_str(&ok(&["ingest", "--manifest", &out, "--json"])).unwrap();
    let b: Value = serde_json::from_str(&ok(&["ingest", "--manifest", &fx.arg("heldout.jsonl"), "--json"])).unwrap();
    assert_eq!(a, b);

    fs::write(fx.path("bad.tsv"), "0\t999\n").unwrap();
    let bad = ["ingest", "--nodes", &fx.arg("g-c.nodes.jsonl"), "--edges", &fx.arg("bad.tsv"), "--graph-id", "x"];
    assert_eq!(code(&bad), 1);
}

#[test]
fn exit_codes() {
    let fx = Fixture::new();
    let manifest = fx.arg("train.jsonl");
    let cfg = fx.arg("small.cfg");
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["train", "--manifest", &manifest, "--out", "x", "--no-such-flag"]), 1);
    assert_eq!(code(&["train", "--manifest", &manifest]), 1);
    assert_eq!(code(&["train", "--manifest", &manifest, "--out", "x", "--variant", "bogus"]), 1);
    assert_eq!(code(&["train", "--manifest", &manifest, "--out", "x", "--temperature", "-1"]), 1);
    assert_eq!(code(&["train", "--manifest", &fx.arg("missing.jsonl"), "--out", "x"]), 1);
    assert_eq!(code(&["eval-nc", "--manifest", &manifest]), 1);
    assert_eq!(code(&["eval-nc", "--manifest", &manifest, "--hash", "--ratios", "1:2"]), 1);
    assert_eq!(code(&["embed", "--hash", "--manifest", &manifest, "--graph", "nope", "--out", "e"]), 1);
    fs::write(fx.path("bad.cfg"), "no_such_key = 1\n").unwrap();
    assert_eq!(code(&["train", "--manifest", &manifest, "--config", &fx.arg("bad.cfg"), "--out", "x"]), 1);

    let stderr = String::from_utf8(tagcl(&["train", "--manifest", &fx.arg("missing.jsonl"), "--out", "x"]).stderr).unwrap();
    assert!(stderr.contains("missing.jsonl"), "{stderr}");

    // Output under a regular file cannot be created: a runtime failure.
    fs::write(fx.path("blocker"), "").unwrap();
    let out = fx.arg("blocker/ckpt");
    assert_eq!(code(&["train", "--manifest", &manifest, "--config", &cfg, "--out", &out]), 2);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
}

#[test]
fn transfer_compares_against_baselines() {
    let fx = Fixture::new();
    let all = fx.arg("all.jsonl");
    let cfg = fx.arg("small.cfg");
    let args = [
        "transfer", "--manifest", &all, "--held-out", "g-c", "--config", &cfg, "--runs", "2", "--json",
    ];
    let v: Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(v["task"], "transfer");
    for key in ["trained.accuracy", "init.accuracy", "hash.accuracy", "trained.auc", "hash.hits"] {
        assert!(v["metrics"][key].is_object(), "missing {key}");
    }
    assert_eq!(ok(&args), ok(&args));
    let no_lp: Value = serde_json::from_str(&ok(&[
        "transfer", "--manifest", &all, "--held-out", "g-c", "--config", &cfg, "--runs", "2", "--json",
        "--no-link-prediction", "--mode", "cross_domain",
    ]))
    .unwrap();
    assert!(no_lp["metrics"]["trained.auc"].is_null());
    assert_eq!(code(&["transfer", "--manifest", &all, "--held-out", "zzz", "--config", &cfg]), 1);
    assert_eq!(code(&["transfer", "--manifest", &all, "--held-out", "g-c", "--mode", "sideways"]), 1);
}

#[test]
fn bench_reports_per_step_times() {
    let fx = Fixture::new();
    let v: Value = serde_json::from_str(&ok(&[
        "bench", "--manifest", &fx.arg("train.jsonl"), "--config", &fx.arg("small.cfg"), "--steps", "6", "--json",
    ]))
    .unwrap();
    assert_eq!(v["steps"], 6);
    assert_eq!(v["batch_size"], 16);
    let variants = v["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 2);
    assert_eq!(variants[0]["variant"], "full");
    assert_eq!(variants[1]["variant"], "no_bank");
    for r in variants {
        assert_eq!(r["step_ms"].as_array().unwrap().len(), 6);
        assert!(r["median_ms"].as_f64().unwrap() > 0.0);
    }
    assert!(v["speedup_median"].as_f64().unwrap() > 0.0);

    let one: Value = serde_json::from_str(&ok(&[
        "bench", "--manifest", &fx.arg("train.jsonl"), "--config", &fx.arg("small.cfg"), "--steps", "2",
        "--variant", "no_bank", "--json",
    ]))
    .unwrap();
    assert_eq!(one["variants"].as_array().unwrap().len(), 1);
    assert!(one["speedup_median"].is_null());
    assert_eq!(code(&["bench", "--variant", "warp"]), 1);
}
