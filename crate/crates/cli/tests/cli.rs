use std::path::Path;
use std::process::{Command, Output};

fn factgcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factgcn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&out.stdout))
    })
}

const TINY: &str = r#"{
  "seed": 3,
  "synthetic": {"n_facts": 80, "n_questions": 30, "n_concepts": 10, "embedding_dim": 8},
  "relation_model": {"input_dim": 8, "hidden": 6},
  "relation_train": {"epochs": 2},
  "answer_model": {"text": {"input_dim": 8, "hidden": 6}, "gcn_width": 8, "mlp_hidden": 4},
  "answer_train": {"epochs": 1}
}"#;

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = factgcn(&["--config", &cfg, "--seed", "11", "--relation-topk", "gt", "--top-k-percent", "50", "--score-relation-words", "off", "show-config"]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["seed"], 11);
    assert_eq!(v["relation_mode"], "gt");
    assert_eq!(v["retrieval"]["top_k_percent"], 50);
    assert_eq!(v["retrieval"]["score_relation_words"], false);
    assert_eq!(v["synthetic"]["n_facts"], 80);
}

#[test]
fn bad_input_exits_with_one() {
    assert_eq!(factgcn(&["--top-k-percent", "0", "show-config"]).status.code(), Some(1));
    assert_eq!(factgcn(&["--relation-topk", "2", "show-config"]).status.code(), Some(1));
    assert_eq!(factgcn(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(factgcn(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let typo = dir.path().join("typo.json");
    std::fs::write(&typo, r#"{"sed": 1}"#).unwrap();
    assert_eq!(factgcn(&["--config", typo.to_str().unwrap(), "show-config"]).status.code(), Some(1));
    let missing = dir.path().join("nothing");
    let out = factgcn(&["--data-dir", missing.to_str().unwrap(), "eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = factgcn(&["inspect-checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_command_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let out_dir = dir.path().join("out");
    let base = ["--config", &cfg, "--data-dir", data.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().copied().chain(extra.iter().copied()).collect();
        let out = factgcn(&args);
        assert!(out.status.success(), "{extra:?}: {}", String::from_utf8_lossy(&out.stderr));
        json(&out)
    };
    assert_eq!(run(&["gen-synthetic"])["facts"], 80);
    assert!(run(&["train-relation"])["final_loss"].is_number());
    assert!(run(&["train-answer"])["final_loss"].is_number());
    let eval = run(&["eval"]);
    assert!(out_dir.join("metrics.json").exists());
    assert!(eval["top3"].as_f64().unwrap() >= eval["top1"].as_f64().unwrap());

    let qa = std::fs::read_to_string(data.join("test.jsonl")).unwrap();
    let sample: serde_json::Value = serde_json::from_str(qa.lines().next().unwrap()).unwrap();
    let concepts: Vec<&str> = sample["concepts"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    let joined = concepts.join(",");
    let ans = run(&["ask", sample["question"].as_str().unwrap(), "--concepts", &joined]);
    assert_eq!(ans["status"], "answered");
    assert!(!ans["supporting_facts"].as_array().unwrap().is_empty());
    let none = run(&["ask", "qqqz zzzq"]);
    assert_eq!(none["status"], "unanswerable");

    let ckpt = out_dir.join("answer.ckpt");
    let info = run(&["inspect-checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(info["seed"], 3);
    assert!(info["parameters"].as_u64().unwrap() > 0);
}
