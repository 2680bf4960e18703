use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn robokit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robokit"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = robokit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Two noiseless 32-dimensional feeds.
fn corpus(dir: &TempDir) -> PathBuf {
    let out = dir.path().join("corpus");
    ok(&[
        "synth",
        "--out-dir",
        path(&out),
        "--seed",
        "3",
        "--n-feeds",
        "2",
        "--noise-sigma",
        "0",
        "--dim",
        "32",
        "--interactive-fraction",
        "0.3",
    ]);
    out
}

/// Every JSON report names the manifest, and the manifest hashes every output.
fn check_run_dir(root: &Path) {
    let manifest = read_json(&root.join("manifest.json"));
    assert_eq!(manifest["schema_version"], 1);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for o in outputs {
        let rel = o["path"].as_str().unwrap();
        let file = root.join(rel);
        let bytes = std::fs::read(&file).unwrap();
        assert_eq!(
            o["sha256"].as_str().unwrap(),
            format!("{:x}", Sha256::digest(&bytes)),
            "{rel}"
        );
        // truth.json is generator ground truth, not a report
        if rel.ends_with(".json") && rel != "truth.json" {
            let report = read_json(&file);
            assert_eq!(report["schema_version"], 1, "{rel}");
            let m = report["manifest"].as_str().unwrap();
            let resolved = file.parent().unwrap().join(m).canonicalize().unwrap();
            assert_eq!(
                resolved,
                root.join("manifest.json").canonicalize().unwrap(),
                "{rel}"
            );
        }
    }
}

#[test]
fn pipeline_recovers_noiseless_campaigns() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir);
    let run = dir.path().join("run");
    ok(&[
        "pipeline",
        "--feed",
        path(&c.join("feed-a.jsonl")),
        "--embeddings",
        path(&c.join("feed-a.rcem")),
        "--truth",
        path(&c.join("feed-a.truth.jsonl")),
        "--feed-b",
        path(&c.join("feed-b.jsonl")),
        "--embeddings-b",
        path(&c.join("feed-b.rcem")),
        "--truth-b",
        path(&c.join("feed-b.truth.jsonl")),
        "--out-dir",
        path(&run),
    ]);
    check_run_dir(&run);
    check_run_dir(&c);
    let summary = read_json(&run.join("pipeline.json"));
    for feed in summary["feeds"].as_array().unwrap() {
        assert_eq!(feed["clusters"], 50);
        assert_eq!(feed["cluster_perfection"], 100.0);
        assert_eq!(feed["intra_cluster_precision"], 100.0);
    }
    let truth = read_json(&c.join("truth.json"));
    let mut planted: Vec<&str> = truth["voicemail_campaigns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    planted.sort();
    assert_eq!(
        summary["voicemail_flagged"].as_array().unwrap().len(),
        planted.len()
    );
    assert!(summary["matching"]["lcs_pairs"].as_u64().unwrap() > 0);
}

#[test]
fn subcommands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir);
    let d = dir.path();
    for feed in ["a", "b"] {
        let out = d.join(format!("cluster-{feed}"));
        ok(&[
            "cluster",
            "--feed",
            path(&c.join(format!("feed-{feed}.jsonl"))),
            "--embeddings",
            path(&c.join(format!("feed-{feed}.rcem"))),
            "--out-dir",
            path(&out),
        ]);
        check_run_dir(&out);
        assert_eq!(read_json(&out.join("campaigns.json"))["n_clusters"], 50);
    }

    let eval = d.join("eval");
    ok(&[
        "evaluate",
        "--embeddings",
        path(&c.join("feed-a.rcem")),
        "--labels",
        path(&d.join("cluster-a/labels.jsonl")),
        "--truth",
        path(&c.join("feed-a.truth.jsonl")),
        "--out-dir",
        path(&eval),
    ]);
    check_run_dir(&eval);
    let report = read_json(&eval.join("evaluation.json"));
    assert_eq!(report["cluster_perfection"], 100.0);
    assert_eq!(report["silhouette"], 1.0);

    let (ca, cb) = (
        d.join("cluster-a/campaigns.json"),
        d.join("cluster-b/campaigns.json"),
    );
    let matched = d.join("match");
    ok(&[
        "match",
        "--campaigns",
        path(&ca),
        "--campaigns-b",
        path(&cb),
        "--representatives",
        "3",
        "--out-dir",
        path(&matched),
    ]);
    check_run_dir(&matched);

    let callbacks = d.join("callbacks");
    ok(&[
        "callbacks",
        "--campaigns",
        path(&ca),
        "--campaigns",
        path(&cb),
        "--out-dir",
        path(&callbacks),
    ]);
    check_run_dir(&callbacks);

    let overlap = d.join("overlap");
    ok(&[
        "callerid-overlap",
        "--feed",
        path(&c.join("feed-a.jsonl")),
        "--feed-b",
        path(&c.join("feed-b.jsonl")),
        "--nanp-only",
        "--out-dir",
        path(&overlap),
    ]);
    check_run_dir(&overlap);

    let vm = d.join("voicemail");
    ok(&[
        "voicemail",
        "--feed",
        path(&c.join("feed-a.jsonl")),
        "--feed",
        path(&c.join("feed-b.jsonl")),
        "--campaigns",
        path(&ca),
        "--campaigns",
        path(&cb),
        "--out-dir",
        path(&vm),
    ]);
    check_run_dir(&vm);

    let trends = d.join("trends");
    ok(&[
        "trends",
        "--feed",
        path(&c.join("feed-a.jsonl")),
        "--campaigns",
        path(&ca),
        "--bucket",
        "day",
        "--out-dir",
        path(&trends),
    ]);
    check_run_dir(&trends);

    let pre = d.join("pre");
    ok(&[
        "preprocess",
        "--feed",
        path(&c.join("feed-a.jsonl")),
        "--min-transcript-chars",
        "100000",
        "--out-dir",
        path(&pre),
    ]);
    check_run_dir(&pre);
    let summary = read_json(&pre.join("preprocess.json"));
    assert_eq!(summary["retained"], 0);
    // only the feed header survives
    let retained = std::fs::read_to_string(pre.join("retained.jsonl")).unwrap();
    assert_eq!(retained.lines().count(), 1);
    assert!(retained.starts_with("{\"feed_header\""));
}

#[test]
fn missing_input_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.jsonl");
    let out = robokit(&[
        "preprocess",
        "--feed",
        path(&missing),
        "--out-dir",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.jsonl"));
}

#[test]
fn usage_and_validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(robokit(&["cluster", "--bogus"]).status.code(), Some(1));
    assert_eq!(robokit(&["--help"]).status.code(), Some(0));

    let c = corpus(&dir);
    let bad = robokit(&[
        "cluster",
        "--feed",
        path(&c.join("feed-a.jsonl")),
        "--embeddings",
        path(&c.join("feed-a.rcem")),
        "--min-cluster-size",
        "1",
        "--out-dir",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let threads = Command::new(env!("CARGO_BIN_EXE_robokit"))
        .env("ROBOKIT_THREADS", "zero")
        .args([
            "trends",
            "--feed",
            path(&c.join("feed-a.jsonl")),
            "--out-dir",
            path(&dir.path().join("t")),
        ])
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));
}

#[test]
fn malformed_record_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let feed = dir.path().join("bad.jsonl");
    std::fs::write(&feed, "{\"call_id\": 7}\n").unwrap();
    let out = robokit(&[
        "preprocess",
        "--feed",
        path(&feed),
        "--out-dir",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl"));
}
