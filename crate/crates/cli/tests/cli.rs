//! Drives the `hopweave` binary end to end over the shared fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hopweave::dataset::{compute_stats, read_dataset, DatasetStats};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn hopweave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hopweave")).args(args).output().expect("binary runs")
}

fn run_all(work: &Path) -> Output {
    let f = fixtures();
    let p = |s: &str| f.join(s).display().to_string();
    hopweave(&[
        "--config",
        &p("run/config.json"),
        "run-all",
        "--scenes",
        &p("scenes/scenes.json"),
        "--videos",
        &p("run/videos.jsonl"),
        "--papers",
        &p("run/papers.jsonl"),
        "--work-dir",
        &work.display().to_string(),
    ])
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const PACKAGE_FILES: [&str; 4] =
    ["dataset/dataset.jsonl", "dataset/dataset.jsonl.manifest.json", "dataset/train.jsonl", "dataset/test.jsonl"];

#[test]
fn run_all_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_ok(&run_all(a.path()));
    assert_ok(&run_all(b.path()));
    for f in PACKAGE_FILES.iter().chain(&["filtered.jsonl", "audit.jsonl", "dataset/stats.json"]) {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
    let samples = read_dataset(&a.path().join("dataset/dataset.jsonl")).unwrap();
    let domains: std::collections::BTreeSet<_> = samples.iter().map(|s| s.domain).collect();
    assert_eq!(domains.len(), 3, "every domain should reach the dataset");
}

#[test]
fn rerun_skips_every_stage_and_changes_nothing() {
    let work = tempfile::tempdir().unwrap();
    assert_ok(&run_all(work.path()));
    let before: Vec<Vec<u8>> = PACKAGE_FILES.iter().map(|f| std::fs::read(work.path().join(f)).unwrap()).collect();
    let out = run_all(work.path());
    assert_ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let reports: Vec<serde_json::Value> =
        stdout.lines().filter(|l| l.contains("\"stage\"")).map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 9);
    assert!(reports.iter().all(|r| r["skipped"] == true), "{stdout}");
    let after: Vec<Vec<u8>> = PACKAGE_FILES.iter().map(|f| std::fs::read(work.path().join(f)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn interrupted_run_resumes_from_the_missing_stage() {
    let work = tempfile::tempdir().unwrap();
    assert_ok(&run_all(work.path()));
    let reference = std::fs::read(work.path().join("dataset/dataset.jsonl")).unwrap();
    // lose the QA stage's manifest and everything after it
    std::fs::remove_file(work.path().join("qa.jsonl.stage.json")).unwrap();
    std::fs::remove_dir_all(work.path().join("dataset")).unwrap();
    let out = run_all(work.path());
    assert_ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let skipped = |stage: &str| {
        stdout
            .lines()
            .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
            .find(|r| r["stage"] == stage)
            .map(|r| r["skipped"] == true)
            .unwrap()
    };
    assert!(skipped("augment") && skipped("gen-context"));
    assert!(!skipped("gen-qa") && !skipped("package"));
    // gen-qa reproduced its old output, so filter stays valid
    assert!(skipped("filter"));
    assert_eq!(std::fs::read(work.path().join("dataset/dataset.jsonl")).unwrap(), reference);
}

#[test]
fn filter_on_empty_input_writes_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.jsonl");
    std::fs::write(&input, "").unwrap();
    let output = dir.path().join("filtered.jsonl");
    let out = hopweave(&["filter", "--input", input.to_str().unwrap(), "--out", output.to_str().unwrap()]);
    assert_ok(&out);
    assert_eq!(std::fs::read(&output).unwrap(), b"");
}

#[test]
fn stats_matches_the_library_on_the_shared_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = fixtures().join("dataset/stats10.jsonl");
    let json = dir.path().join("stats.json");
    let out = hopweave(&["stats", "--dataset", dataset.to_str().unwrap(), "--json", json.to_str().unwrap()]);
    assert_ok(&out);
    let from_cli: DatasetStats = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(from_cli, compute_stats(&read_dataset(&dataset).unwrap()));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.lines().any(|l| l.split_whitespace().take(3).eq(["NI", "train", "3"])), "{table}");
}

#[test]
fn eval_scores_gold_answers_perfectly() {
    let work = tempfile::tempdir().unwrap();
    assert_ok(&run_all(work.path()));
    let test = work.path().join("dataset/test.jsonl");
    let items: Vec<serde_json::Value> =
        std::fs::read_to_string(&test).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!items.is_empty());
    let preds: String = items
        .iter()
        .map(|i| serde_json::json!({"id": i["id"], "response": i["answer"]}).to_string() + "\n")
        .collect();
    let pred_path = work.path().join("preds.jsonl");
    std::fs::write(&pred_path, preds).unwrap();
    let result = work.path().join("result.json");
    let out = hopweave(&[
        "eval",
        "--test",
        test.to_str().unwrap(),
        "--predictions",
        pred_path.to_str().unwrap(),
        "--out",
        result.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&result).unwrap()).unwrap();
    assert_eq!(r["overall"]["em"], 1.0);
    assert_eq!(r["overall"]["f1"], 1.0);
}

#[test]
fn user_errors_exit_with_one() {
    assert_eq!(hopweave(&["no-such-command"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"hop_bounds": {"SP": {"min": 1, "max": 5}}}"#).unwrap();
    let out = hopweave(&["--config", config.to_str().unwrap(), "default-config"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let diag: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(diag["kind"], "user_error");
    let missing = hopweave(&["filter", "--input", "/nonexistent/items.jsonl", "--out", "/tmp/never.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn provider_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let items = dir.path().join("ni.jsonl");
    let scenes = fixtures().join("scenes/scenes.json");
    assert_ok(&hopweave(&["ingest-scene", "--scenes", scenes.to_str().unwrap(), "--out", items.to_str().unwrap()]));
    // nothing listens on the discard port
    let config = dir.path().join("http.json");
    std::fs::write(
        &config,
        r#"{"provider": {"kind": "http", "base_url": "http://127.0.0.1:9/v1", "timeout_secs": 2},
            "retry": {"max_attempts": 1, "base_delay": 0, "max_delay": 0}}"#,
    )
    .unwrap();
    let out_path = dir.path().join("aug.jsonl");
    let out = hopweave(&[
        "--config",
        config.to_str().unwrap(),
        "augment",
        "--input",
        items.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out_path.exists(), "a failed stage writes nothing");
}

#[test]
fn stages_compose_like_run_all() {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).display().to_string();
    let config = f.join("run/config.json").display().to_string();
    let scenes = f.join("scenes/scenes.json").display().to_string();
    let steps: [Vec<&str>; 5] = [
        vec!["ingest-scene", "--scenes", &scenes, "--out"],
        vec!["augment", "--input"],
        vec!["gen-context", "--input"],
        vec!["gen-qa", "--input"],
        vec!["filter", "--input"],
    ];
    let names = ["ingest-scene.jsonl", "augmented.jsonl", "contexts.jsonl", "qa.jsonl", "filtered.jsonl"];
    for (i, step) in steps.iter().enumerate() {
        let mut args = vec!["--config", config.as_str()];
        args.extend(step.iter().copied());
        let prev = if i > 0 { d(names[i - 1]) } else { String::new() };
        if i > 0 {
            args.extend([prev.as_str(), "--out"]);
        }
        let out_path = d(names[i]);
        args.push(&out_path);
        assert_ok(&hopweave(&args));
    }
    let filtered = d("filtered.jsonl");
    let pkg = d("pkg");
    assert_ok(&hopweave(&["--config", &config, "package", "--input", &filtered, "--out-dir", &pkg]));

    let whole = tempfile::tempdir().unwrap();
    let out = hopweave(&["--config", &config, "run-all", "--scenes", &scenes, "--work-dir", whole.path().to_str().unwrap()]);
    assert_ok(&out);
    assert_eq!(
        std::fs::read(dir.path().join("pkg/dataset.jsonl")).unwrap(),
        std::fs::read(whole.path().join("dataset/dataset.jsonl")).unwrap()
    );
}
