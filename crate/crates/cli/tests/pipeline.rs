use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn gptrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gptrec"))
        .current_dir(dir)
        .env_remove("GPTREC_DATA_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gptrec(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Users walk forward through a ring of items, so the next item is
/// predictable from the last one.
fn write_ratings(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut text = String::new();
    for u in 1..=50 {
        let start = rng.random_range(0..24);
        for j in 0..rng.random_range(8..16) {
            text.push_str(&format!("{u}::{}::5::{}\n", (start + j) % 24 + 100, 1000 + j));
        }
    }
    std::fs::write(dir.join("ratings.dat"), text).unwrap();
}

const SMALL_MODEL: [&str; 8] = [
    "--set",
    "model.embed_dim=16",
    "--set",
    "model.num_heads=2",
    "--set",
    "model.num_blocks=1",
    "--set",
    "train.max_seq_items=20",
];

fn prepared() -> TempDir {
    let tmp = TempDir::new().unwrap();
    write_ratings(tmp.path());
    ok(
        tmp.path(),
        &["prepare", "--input", "ratings.dat", "--out", "run", "--set", "data.validation_users=10"],
    );
    tmp
}

fn trained(tokenise_args: &[&str]) -> TempDir {
    let tmp = prepared();
    let mut args = vec!["tokenise", "--out", "run"];
    args.extend_from_slice(tokenise_args);
    ok(tmp.path(), &args);
    let mut args = vec!["train", "--out", "run", "--epochs", "3", "--batch-size", "16"];
    args.extend_from_slice(&SMALL_MODEL);
    ok(tmp.path(), &args);
    tmp
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run/manifest.json")).unwrap()).unwrap()
}

#[test]
fn prepare_prints_summary_and_is_idempotent() {
    let tmp = prepared();
    let summary = std::fs::read_to_string(tmp.path().join("run/summary.txt")).unwrap();
    assert!(summary.starts_with("Number of users\t50\nNumber of items\t24\n"), "{summary}");
    let before = std::fs::read(tmp.path().join("run/dataset.bin")).unwrap();

    let again = ok(tmp.path(), &["prepare", "--input", "ratings.dat", "--out", "run"]);
    assert!(again.contains("up to date"), "{again}");
    assert_eq!(std::fs::read(tmp.path().join("run/dataset.bin")).unwrap(), before);

    let forced = ok(tmp.path(), &["prepare", "--input", "ratings.dat", "--out", "run", "--force"]);
    assert!(!forced.contains("up to date"));
    assert_eq!(std::fs::read(tmp.path().join("run/dataset.bin")).unwrap(), before);
}

#[test]
fn usage_errors_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let out = gptrec(tmp.path(), &["prepare", "--input", "missing.dat", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.dat"));

    let out = gptrec(tmp.path(), &["tokenise", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prepare"));

    let out = gptrec(tmp.path(), &["prepare", "--input", "x", "--set", "model.width=3"]);
    assert_eq!(out.status.code(), Some(2));

    let out = gptrec(tmp.path(), &["prepare", "--input", "x", "--config", "nope.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn next_k_with_sub_item_tokens_is_rejected() {
    let tmp = trained(&["-t", "2", "--values-per-token", "8"]);
    for cmd in [
        vec!["evaluate", "--out", "run", "--strategy", "next_k"],
        vec!["recommend", "--out", "run", "--strategy", "next-k", "--user", "1"],
        vec!["sweep", "--out", "run"],
    ] {
        let out = gptrec(tmp.path(), &cmd);
        assert_eq!(out.status.code(), Some(2), "{cmd:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("multi-token") && err.contains("t = 2"), "{err}");
    }
    let text = ok(tmp.path(), &["evaluate", "--out", "run", "--strategy", "top_k_multi_token"]);
    assert!(text.contains("NDCG@K"));
}

#[test]
fn one_token_pipeline_end_to_end() {
    let tmp = trained(&["--mode", "one-token"]);
    let run = tmp.path().join("run");
    let log = std::fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 4, "{log}");

    let first = ok(tmp.path(), &["evaluate", "--out", "run", "--ks", "1,5,10"]);
    let csv1 = std::fs::read(run.join("eval_top_k.csv")).unwrap();
    let second = ok(tmp.path(), &["evaluate", "--out", "run", "--ks", "1,5,10"]);
    assert_eq!(first, second);
    assert_eq!(std::fs::read(run.join("eval_top_k.csv")).unwrap(), csv1);
    assert!(first.lines().any(|l| l.trim_start().starts_with("10 ")), "{first}");

    let recs = ok(tmp.path(), &["recommend", "--out", "run", "--user", "3", "--user", "7", "-k", "4"]);
    let rows: Vec<Vec<&str>> = recs.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert!(r[0] == "3" || r[0] == "7");
        let item: u64 = r[2].parse().unwrap();
        assert!((100..124).contains(&item), "raw item ids are reported");
    }
    let unknown = gptrec(tmp.path(), &["recommend", "--out", "run", "--user", "999"]);
    assert_eq!(unknown.status.code(), Some(2));

    let sweep = ok(tmp.path(), &["sweep", "--out", "run", "--max-k", "3"]);
    let k1: Vec<&str> = sweep.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(k1[0], "1");
    assert_eq!(k1[1], k1[2]);
    assert_eq!(k1[3], "1.0000");

    let m = manifest(tmp.path());
    let commands: Vec<&str> = m["runs"].as_array().unwrap().iter().map(|r| r["command"].as_str().unwrap()).collect();
    assert_eq!(
        commands,
        ["prepare", "tokenise", "train", "evaluate", "evaluate", "recommend", "sweep"]
    );
    let train = &m["runs"][2];
    assert_eq!(train["seeds"]["train"], 0);
    assert_eq!(train["config"]["model"]["embed_dim"], 16);
    let ckpt = std::fs::read(run.join("model.ckpt")).unwrap();
    assert_eq!(
        train["artifacts"]["model.ckpt"].as_str().unwrap(),
        gptrec::binio::sha256_hex(&ckpt)
    );
    // later commands inherit the run's configuration
    assert_eq!(m["config"]["data"]["validation_users"], 10);
}

#[test]
fn same_seed_same_checkpoint() {
    let a = trained(&["-t", "2", "--values-per-token", "8"]);
    let b = trained(&["-t", "2", "--values-per-token", "8"]);
    for f in ["tokenisation.bin", "model.ckpt", "train_log.tsv"] {
        assert_eq!(
            std::fs::read(a.path().join("run").join(f)).unwrap(),
            std::fs::read(b.path().join("run").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn memory_report_reference_and_custom() {
    let tmp = TempDir::new().unwrap();
    let table = ok(tmp.path(), &["memory-report"]);
    assert!(table.contains("MovieLens-1M") && table.contains("Gowalla"));
    let csv = ok(
        tmp.path(),
        &["memory-report", "--dataset", "toy=1000", "--tv", "2:10", "--embed-dim", "8", "--csv"],
    );
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert!(lines[1].starts_with("toy,1000"), "{csv}");
    let bad = gptrec(tmp.path(), &["memory-report", "--tv", "2x10"]);
    assert_eq!(bad.status.code(), Some(2));
}
