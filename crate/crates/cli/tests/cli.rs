use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use socialalign_core::dataset::strip_hashtags;

const CONFIG: &str = "d_model = 16\nn_heads = 2\ncontext_len = 256\ngate_hidden = 8\nsteps = 6\ngrad_accum = 2\nmax_new_tokens = 6\ntop_k = 3\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_socialalign"))
        .args(args)
        .current_dir(dir)
        .env_remove("SOCIALALIGN_PROVIDER_URL")
        .env_remove("SOCIALALIGN_PROVIDER_KEY")
        .env_remove("SOCIALALIGN_PROVIDER_MODEL")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), CONFIG).unwrap();
    ok(dir.path(), &["synth", "--topics", "3", "--users", "10", "--posts-per-user", "6", "--seed", "2", "--out", "data"]);
    dir
}

fn train(dir: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", "data", "--config", "small.cfg", "--out", "train"];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn full_chain_writes_reports_and_manifests() {
    let tmp = workspace();
    let d = tmp.path();
    ok(d, &["persona", "--data", "data", "--topk", "3", "--out", "persona"]);
    ok(d, &["retrieve", "--data", "data", "--topk", "3", "--out", "retrieve"]);
    train(d, &["--personas", "persona/personas.jsonl"]);
    ok(d, &["generate", "--data", "data", "--model", "train/model", "--split", "test", "--out", "gen"]);
    let report = ok(d, &["evaluate", "--data", "data", "--generations", "gen/generations.jsonl", "--out", "eval"]);
    assert!(report.starts_with("metric\tvalue\naccuracy\t"));

    for stage in ["data/synth", "persona/persona", "retrieve/retrieve", "train/train", "gen/generate", "eval/evaluate"] {
        let m: Value = serde_json::from_str(&fs::read_to_string(d.join(format!("{stage}.manifest.json"))).unwrap()).unwrap();
        for a in m["outputs"].as_array().unwrap() {
            assert_eq!(a["sha256"].as_str().unwrap().len(), 64);
        }
        assert!(m["timings_ms"]["total"].is_u64());
    }
    let train_manifest = fs::read_to_string(d.join("train/train.manifest.json")).unwrap();
    assert!(train_manifest.contains("d_model = 16"));

    let metrics: Value = serde_json::from_str(&fs::read_to_string(d.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["topics"].as_array().unwrap().len(), 3);
    let dist = fs::read_to_string(d.join("eval/distributions.tsv")).unwrap();
    assert_eq!(dist.lines().count(), 1 + 3 * 7);
    let retrieval = fs::read_to_string(d.join("retrieve/retrieval.tsv")).unwrap();
    assert!(retrieval.starts_with("topic\tuser\trank\tpost_id\tscore\n"));
}

#[test]
fn gold_generations_score_perfectly() {
    let tmp = workspace();
    let d = tmp.path();
    let posts: std::collections::BTreeMap<String, Value> = jsonl(&d.join("data/posts.jsonl"))
        .into_iter()
        .map(|p| (p["post_id"].as_str().unwrap().to_string(), p))
        .collect();
    let mut lines = String::new();
    for t in jsonl(&d.join("data/topics.jsonl")) {
        for id in t["post_ids"].as_array().unwrap() {
            let p = &posts[id.as_str().unwrap()];
            let g = serde_json::json!({
                "topic_id": t["topic_id"],
                "user_id": p["user_id"],
                "post_id": id,
                "text": strip_hashtags(p["text"].as_str().unwrap()),
            });
            lines.push_str(&g.to_string());
            lines.push('\n');
        }
    }
    fs::write(d.join("gold.jsonl"), lines).unwrap();
    let report = ok(d, &["evaluate", "--data", "data", "--generations", "gold.jsonl", "--out", "eval"]);
    assert!(report.contains("accuracy\t100.0\n"), "{report}");
    assert!(report.contains("mean_js\t0.0\n"), "{report}");
}

#[test]
fn uniform_analyzing_gate_shows_equal_utilization() {
    let tmp = workspace();
    let d = tmp.path();
    train(d, &["--ablate", "no_analyzing_gate"]);
    let out = ok(d, &["experts", "--data", "data", "--model", "train/model", "--out", "experts"]);
    for line in out.lines().filter(|l| l.starts_with('t') && l.contains('\t') && !l.starts_with("topic")) {
        assert!(line.ends_with("0.333 0.333 0.333"), "{line}");
    }
    assert!(out.ends_with("max pairwise L1 0.0000\n"), "{out}");
    let tsv = fs::read_to_string(d.join("experts/utilization.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 3 * 3);
}

#[test]
fn sequential_flag_does_not_change_outputs() {
    let tmp = workspace();
    let d = tmp.path();
    train(d, &[]);
    ok(d, &["generate", "--data", "data", "--model", "train/model", "--out", "par"]);
    ok(d, &["generate", "--data", "data", "--model", "train/model", "--sequential", "--out", "seq"]);
    assert_eq!(fs::read(d.join("par/generations.jsonl")).unwrap(), fs::read(d.join("seq/generations.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(tmp.path(), &["bogus"]).status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["train"]).status.code(), Some(2));
}

#[test]
fn malformed_input_names_file_and_line() {
    let tmp = workspace();
    let d = tmp.path();
    let posts = d.join("data/posts.jsonl");
    let mut lines: Vec<String> = fs::read_to_string(&posts).unwrap().lines().map(String::from).collect();
    lines[1] = "{not json".into();
    fs::write(&posts, lines.join("\n") + "\n").unwrap();
    let out = run(d, &["persona", "--data", "data", "--out", "persona"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("posts.jsonl:2:"), "{err}");
    assert!(!d.join("persona/personas.jsonl").exists());
}

#[test]
fn missing_input_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["persona", "--data", "absent"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent"));
}

#[test]
fn bad_config_is_rejected_before_work() {
    let tmp = workspace();
    let d = tmp.path();
    fs::write(d.join("bad.cfg"), "d_model = 16\nwidth = 3\n").unwrap();
    let out = run(d, &["train", "--data", "data", "--config", "bad.cfg", "--out", "train"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("width"), "{err}");
    let out = run(d, &["train", "--data", "data", "--ablate", "no_brain", "--out", "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("train/model").exists());
}
