use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn anchor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchor")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn write_corpus(dir: &Path) -> String {
    let path = dir.join("corpus.jsonl");
    let lines: Vec<String> = (0..10)
        .map(|i| {
            format!(
                r#"{{"id":"t{i}","prompt":"op ⟦{}⟧ now","entry_check":[{{"in":"ab","out":"abab"}}],"difficulty":"{}"}}"#,
                ["d", "r", "s"][i % 3],
                ["easy", "hard"][i % 2]
            )
        })
        .collect();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path.display().to_string()
}

#[test]
fn neutral_strength_matches_unanchored() {
    let base = json(&anchor(&["generate", "--backend", "toy:seed=7:vocab=64", "--prompt", "ab ⟦cd⟧ e", "--json"]));
    let neutral = json(&anchor(&[
        "generate", "--backend", "toy:seed=7:vocab=64", "--prompt", "ab ⟦cd⟧ e", "--omega", "1", "--json",
    ]));
    assert_eq!(base["tokens"], neutral["tokens"]);
    assert_eq!(neutral["anchored_positions"], serde_json::json!([3, 4]));
    assert_eq!(neutral["score_calls"].as_u64().unwrap(), 2 * neutral["steps"].as_u64().unwrap());
}

#[test]
fn text_output_and_beam() {
    let o = anchor(&["generate", "--backend", "toy:seed=7:vocab=64", "--prompt", "x⟦y⟧", "--omega", "1.4", "--max-new", "4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().next().unwrap().starts_with("tokens:"));
    assert!(text.contains("score_calls:"));
    let beams = json(&anchor(&[
        "generate", "--backend", "toy:seed=7:vocab=64", "--prompt", "x⟦y⟧", "--beam", "3", "--max-new", "4", "--json",
    ]));
    assert_eq!(beams["candidates"].as_array().unwrap().len(), 3);
}

#[test]
fn usage_errors_exit_one() {
    let o = anchor(&["generate", "--prompt", "a⟦b⟧", "--mode", "confidence", "--omega", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--omega"), "{err}");
    assert_eq!(anchor(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(anchor(&["generate", "--prompt", "a", "--top-k", "3"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    assert_eq!(anchor(&["generate", "--prompt", "a⟦b"]).status.code(), Some(2));
    assert_eq!(anchor(&["tune", "--corpus", "/nonexistent/c.jsonl", "--evaluator", "tent:peak=1.3"]).status.code(), Some(2));
}

#[test]
fn version_and_help() {
    let o = anchor(&["--version"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains(env!("CARGO_PKG_VERSION")));
    assert!(stdout(&anchor(&["--help"])).contains("generate"));
}

#[test]
fn tune_recovers_tent_peak() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let out = dir.path().join("tune.json");
    let report = json(&anchor(&[
        "tune", "--corpus", &corpus, "--evaluator", "tent:peak=1.35", "--folds", "5", "--json",
        "--out", out.to_str().unwrap(),
    ]));
    assert_eq!(report["recommended"], 1.35);
    assert_eq!(report["folds"].as_array().unwrap().len(), 5);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(saved, report);
    let o = anchor(&["tune", "--corpus", &corpus, "--evaluator", "tent:peak=1.5", "--grid", "1.0,1.5,2.0"]);
    assert!(stdout(&o).contains("recommended: 1.5"));
    // A real evaluation over the toy model also completes.
    let r = json(&anchor(&[
        "tune", "--corpus", &corpus, "--backend", "toy:seed=7:vocab=64", "--grid", "1.0:1.2:0.1", "--folds", "2",
        "--max-new", "3", "--json",
    ]));
    assert!([1.0, 1.1, 1.2].contains(&r["recommended"].as_f64().unwrap()));
}

#[test]
fn eval_then_analyze_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let report_path = dir.path().join("report.json");
    let o = anchor(&[
        "eval", "--corpus", &corpus, "--backend", "toy:seed=7:vocab=64", "--omega", "1.3", "--activation",
        "on-failure", "--max-new", "4", "--workers", "2", "--out", report_path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("tasks: 10"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["tasks"].as_array().unwrap().len(), 10);
    let csv = std::fs::read_to_string(report_path.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);

    let o = anchor(&["analyze", "lengths", "--report", report_path.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("group,status,mean,median,count"));
    assert!(text.contains("easy,") && text.contains("hard,") && text.contains("overall,"));
}

#[test]
fn trace_then_dilution_and_gradients() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let o = anchor(&[
        "generate", "--backend", "toy:seed=7:vocab=64", "--prompt", "abc ⟦de⟧", "--omega", "1.2", "--attention",
        "--trace", trace.to_str().unwrap(), "--max-new", "5",
    ]);
    assert!(o.status.success());
    let steps = std::fs::read_to_string(&trace).unwrap().lines().count();
    let csv_path = dir.path().join("alpha.csv");
    assert!(anchor(&["analyze", "dilution", "--trace", trace.to_str().unwrap(), "--out", csv_path.to_str().unwrap()])
        .status
        .success());
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,alpha");
    assert_eq!(lines.len(), steps + 1);
    assert_eq!(lines[1], "0,1");

    let o = anchor(&["analyze", "gradients", "--tokens", "3,5,2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "position,token,score");
    assert_eq!(rows.len(), 4);
    assert!(rows[2].starts_with("1,5,"));
    assert_eq!(anchor(&["analyze", "gradients", "--backend", "remote:127.0.0.1:1", "--tokens", "3"]).status.code(), Some(2));
}

#[test]
fn serve_over_stdio() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_anchor"))
        .args(["serve", "--backend", "toy:seed=7", "--stdio"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"{\"v\":1,\"op\":\"meta\"}\n{\"v\":1,\"op\":\"score\",\"tokens\":[3,5,2]}\n{\"v\":2,\"op\":\"meta\"}\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["vocab_size"], 16);
    assert_eq!(lines[1]["logits"].as_array().unwrap().len(), 16);
    assert_eq!(lines[2]["code"], "unsupported_version");
}
