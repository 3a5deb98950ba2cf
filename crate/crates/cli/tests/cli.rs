use std::path::Path;
use std::process::{Command, Output};

use ehrgen_cli::manifest::sha256_path;

fn ehrgen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ehrgen"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = ehrgen(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: &str = r#"{
  "seed": 4,
  "knowledge": { "rgcn": { "dims": [8, 8], "epochs": 5 }, "model_dim": 16, "k_hop": 1, "gate_init": 1.0 },
  "semantic_dim": 8,
  "model": { "factor_dim": 8, "model_dim": 16, "ffn_hidden": 32, "layers": 1, "heads": 2, "kv_heads": 1, "context_len": 256 },
  "train": { "max_epochs": 1, "batch_size": 8, "base_lr": 0.01 },
  "generate": { "sampler": { "max_tokens": 256 } },
  "scale_study": { "budgets": [1e9, 3e9], "model_dims": [8, 16, 32], "layers": 1 }
}"#;

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["simulate", "--out", "x", "--bogus"], &[]] {
        let out = ehrgen(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
    let help = ehrgen(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn stage_errors_exit_with_one_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = ehrgen(dir.path(), &["build-vocab", "--corpus", "missing.jsonl", "--out", "v.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("build-vocab failed"));
    std::fs::write(dir.path().join("bad.json"), r#"{ "seed": 1, "not_a_field": 0 }"#).unwrap();
    let out = ehrgen(dir.path(), &["pipeline", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pipeline failed"));
}

#[test]
fn subcommands_chain_and_leave_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.json"), SMALL).unwrap();
    ok(d, &["simulate", "--n", "150", "--seed", "4", "--out", "data"]);
    let data_digest = sha256_path(&d.join("data")).unwrap();
    ok(d, &["build-vocab", "--corpus", "data/train.jsonl", "--out", "vocab.json"]);
    ok(d, &["embed-kg", "--vocab", "vocab.json", "--config", "small.json", "--out", "kg"]);
    let common = ["--config", "small.json", "--corpus", "data", "--vocab", "vocab.json"];
    let train: Vec<&str> = ["train"].into_iter().chain(common).chain(["--embeddings", "kg/embeddings.bin", "--out", "train"]).collect();
    ok(d, &train);
    let scale: Vec<&str> =
        ["scale-study"].into_iter().chain(common).chain(["--embeddings", "kg/embeddings.bin", "--out", "scale"]).collect();
    ok(d, &scale);
    ok(
        d,
        &[
            "generate", "--model", "train/model.ckpt", "--vocab", "vocab.json", "--seeds", "data/train.jsonl", "--n", "30",
            "--config", "small.json", "--out", "syn.jsonl",
        ],
    );
    let syn_digest = sha256_path(&d.join("syn.jsonl")).unwrap();
    ok(
        d,
        &[
            "audit", "--in", "syn.jsonl", "--vocab", "vocab.json", "--out", "audited.jsonl", "--report", "audit.json",
            "--stub", "--compare", "data/test.jsonl", "--compare-n", "10",
        ],
    );
    ok(
        d,
        &[
            "evaluate", "--real", "data/train.jsonl", "--syn", "syn.jsonl", "--vocab", "vocab.json", "--test",
            "data/test.jsonl", "--spec", "data/spec.json", "--out", "eval",
        ],
    );
    ok(
        d,
        &[
            "attack", "--members", "data/train.jsonl", "--nonmembers", "data/test.jsonl", "--syn", "syn.jsonl",
            "--attribute", "race", "--out", "attack.json",
        ],
    );
    for f in [
        "data/manifest.json",
        "vocab.manifest.json",
        "kg/manifest.json",
        "kg/kg/edges.tsv",
        "train/manifest.json",
        "train/history.csv",
        "scale/manifest.json",
        "scale/points.csv",
        "syn.manifest.json",
        "syn.report.json",
        "syn.sequences.jsonl",
        "audited.manifest.json",
        "eval/manifest.json",
        "eval/bland_altman_unigram.csv",
        "eval/ecdf_visits_per_record.csv",
        "eval/cooccurrence_real.csv",
        "attack.manifest.json",
    ] {
        assert!(d.join(f).is_file(), "{f} missing");
    }
    assert_eq!(sha256_path(&d.join("data")).unwrap(), data_digest);
    assert_eq!(sha256_path(&d.join("syn.jsonl")).unwrap(), syn_digest);

    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n_synthetic"].as_u64().unwrap() as usize, load_len(&d.join("syn.jsonl")));
    assert!(metrics["fidelity"]["unigram"]["r2"].is_number());
    assert!(metrics["tstr"]["MORTALITY"].is_object());
    let attack: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("attack.json")).unwrap()).unwrap();
    assert_eq!(attack["aia"]["attribute"], "race");
    let fits: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("scale/fits.json")).unwrap()).unwrap();
    assert_eq!(fits["isoflop"].as_array().unwrap().len(), 2);

    // manifest paths are relative to the manifest's directory
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("train/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["args"]["vocab"], "../vocab.json");
    assert_eq!(m["seed"], 4);
}

fn load_len(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}
