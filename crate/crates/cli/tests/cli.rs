use std::path::Path;
use std::process::{Command, Output};

use detangle_core::embedding::read_embeddings;
use detangle_core::synthetic::text_reviews;

fn detangle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_detangle"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = detangle(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_csv(path: &Path, n: usize) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["id", "text", "sentiment", "topic"]).unwrap();
    for r in text_reviews(n, 3) {
        let s = if r.sentiment.class_index() == 1 { "1" } else { "0" };
        w.write_record([r.id.as_str(), r.text.as_str(), s, r.topic.as_str()])
            .unwrap();
    }
    w.flush().unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn import_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("in.csv");
    let corpus = dir.path().join("corpus.jsonl");
    write_csv(&csv, 60);
    let msg = ok(&["import", "--input", p(&csv), "--output", p(&corpus)]);
    assert!(msg.contains("imported 60 reviews"));

    let table = ok(&["stats", "--corpus", p(&corpus)]);
    assert!(table.contains("reviews: 60"));
    assert!(table.contains("positive"));

    let json: serde_json::Value = serde_json::from_str(&ok(&["stats", "--corpus", p(&corpus), "--json"])).unwrap();
    assert_eq!(json["total_count"], 60);
    assert_eq!(json["sentiment_fractions"]["positive"], 0.5);
}

#[test]
fn import_rejects_unknown_labels() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("in.csv");
    std::fs::write(&csv, "id,text,sentiment,topic\na,fine,meh,book\n").unwrap();
    let out = detangle(&["import", "--input", p(&csv), "--output", p(&dir.path().join("c.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn embed_and_project() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("in.csv");
    let corpus = dir.path().join("corpus.jsonl");
    write_csv(&csv, 80);
    ok(&["import", "--input", p(&csv), "--output", p(&corpus)]);

    let emb = dir.path().join("emb.bin");
    let msg = ok(&[
        "embed",
        "--corpus",
        p(&corpus),
        "--output",
        p(&emb),
        "--provider",
        "hashing",
        "--dimension",
        "24",
    ]);
    assert!(msg.contains("embedded 80 texts"));
    assert!(msg.contains("dimension 24"));

    let guard = dir.path().join("guard.json");
    let projected = dir.path().join("projected.jsonl");
    ok(&[
        "guard",
        "--corpus",
        p(&corpus),
        "--strategy",
        "mean_projection",
        "--embeddings",
        p(&emb),
        "--output",
        p(&guard),
        "--projected-output",
        p(&projected),
    ]);
    let fitted: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&guard).unwrap()).unwrap();
    let direction = fitted["direction"].as_array().unwrap();
    assert_eq!(direction.len(), 24);
    let norm: f64 = direction
        .iter()
        .map(|v| v.as_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt();
    assert!((norm - 1.0).abs() < 1e-9);
    let set = read_embeddings(&projected).unwrap();
    assert_eq!(set.len(), 80);
    for v in set.vectors.values() {
        let along: f64 = v.iter().zip(direction).map(|(x, d)| x * d.as_f64().unwrap()).sum();
        assert!(along.abs() < 1e-9);
    }
}

#[test]
fn guard_dry_run_renders_without_network() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("in.csv");
    let corpus = dir.path().join("corpus.jsonl");
    write_csv(&csv, 10);
    ok(&["import", "--input", p(&csv), "--output", p(&corpus)]);

    let out = ok(&[
        "guard",
        "--corpus",
        p(&corpus),
        "--strategy",
        "chain",
        "--model",
        "m",
        "--dry-run",
        "--limit",
        "3",
    ]);
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    let messages = lines[0]["transcript"]["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 3);
    assert!(!messages[0]["content"].as_str().unwrap().contains("[Review here]"));

    let out = detangle(&["guard", "--corpus", p(&corpus), "--strategy", "paraphrase", "--dry-run"]);
    assert!(!out.status.success());
}

#[test]
fn evaluate_writes_report_and_report_rerenders() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("in.csv");
    let corpus = dir.path().join("corpus.jsonl");
    write_csv(&csv, 120);
    ok(&["import", "--input", p(&csv), "--output", p(&corpus)]);
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        r#"
corpus = "corpus.jsonl"
output_dir = "out"

[embedder]
provider = "hashing"
dimension = 16

[[settings]]
strategy = "none"

[[settings]]
strategy = "mean_projection"
"#,
    )
    .unwrap();

    let table = ok(&["evaluate", "--config", p(&config), "--replicates", "20"]);
    assert!(table.contains("No disentanglement"));
    assert!(table.contains("Mean projection"));
    let report = dir.path().join("out/report.json");
    assert!(report.exists());

    let again = ok(&["run", "--config", p(&config), "--replicates", "20"]);
    assert_eq!(table, again);

    let rendered = ok(&["report", "--input", p(&report)]);
    assert_eq!(rendered, table);
    let json = ok(&["report", "--input", p(&report), "--json"]);
    assert_eq!(json, std::fs::read_to_string(&report).unwrap());
}

#[test]
fn evaluate_without_baseline_fails() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("in.csv");
    write_csv(&csv, 20);
    ok(&[
        "import",
        "--input",
        p(&csv),
        "--output",
        p(&dir.path().join("corpus.jsonl")),
    ]);
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        "corpus = \"corpus.jsonl\"\noutput_dir = \"out\"\n[[settings]]\nstrategy = \"mean_projection\"\n",
    )
    .unwrap();
    let out = detangle(&["evaluate", "--config", p(&config)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(detangle(&["stats"]).status.code(), Some(2));
    assert_eq!(detangle(&["nonsense"]).status.code(), Some(2));
}
