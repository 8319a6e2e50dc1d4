use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn rationale(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rationale"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = rationale(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

/// Synthetic data plus a 50-document gold file.
fn fixture(dir: &Path) {
    ok(&["synth", "--out-dir", "data", "--seed", "3", "--n", "120"], dir);
    let pool = lines(&dir.join("data/pool.jsonl"));
    fs::write(dir.join("gold.jsonl"), pool[..50].join("\n") + "\n").unwrap();
}

#[test]
fn no_arguments_prints_usage_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = rationale(&[], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(rationale(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn augment_static_writes_eight_per_document() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let args = [
        "augment-static",
        "--in",
        "gold.jsonl",
        "--lexicon",
        "data/lexicon.tsv",
        "--per-doc",
        "7",
        "--seed",
        "1",
        "--out",
    ];
    ok(&[&args[..], &["a.jsonl"]].concat(), d);
    ok(&[&args[..], &["b.jsonl"]].concat(), d);
    let a = fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(lines(&d.join("a.jsonl")).len(), 400);
    assert_eq!(a, fs::read(d.join("b.jsonl")).unwrap());

    let first: Value = serde_json::from_str(&lines(&d.join("a.jsonl"))[50]).unwrap();
    assert_eq!(first["augmented"]["provenance"], "static");

    ok(
        &[
            "augment-static",
            "--in",
            "gold.jsonl",
            "--lexicon",
            "data/lexicon.tsv",
            "--seed",
            "1",
            "--method",
            "duplicate",
            "--per-doc",
            "3",
            "--out",
            "dup.jsonl",
        ],
        d,
    );
    assert_eq!(lines(&d.join("dup.jsonl")).len(), 200);

    // the seed is mandatory
    let out = rationale(
        &[
            "augment-static",
            "--in",
            "gold.jsonl",
            "--lexicon",
            "data/lexicon.tsv",
            "--out",
            "c.jsonl",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_input_exits_one_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let mut doc: Value = serde_json::from_str(&lines(&d.join("gold.jsonl"))[0]).unwrap();
    doc["rationales"] = json!([[0, 5]]);
    fs::write(d.join("bad.jsonl"), doc.to_string() + "\n").unwrap();
    let out = rationale(
        &[
            "augment-static",
            "--in",
            "bad.jsonl",
            "--lexicon",
            "data/lexicon.tsv",
            "--seed",
            "1",
            "--out",
            "x.jsonl",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("span [0,5]: length 5 exceeds 3 tokens"));

    fs::write(d.join("garbled.jsonl"), "{not json\n").unwrap();
    let out = rationale(&["ingest", "--in", "garbled.jsonl", "--out", "y.jsonl"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let out = rationale(&["ingest", "--in", "missing.jsonl", "--out", "y.jsonl"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn step_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    ok(&["ingest", "--in", "gold.jsonl", "--out", "gold2.jsonl"], d);
    assert_eq!(
        fs::read(d.join("gold.jsonl")).unwrap(),
        fs::read(d.join("gold2.jsonl")).unwrap()
    );

    ok(
        &[
            "augment-static",
            "--in",
            "gold.jsonl",
            "--lexicon",
            "data/lexicon.tsv",
            "--seed",
            "1",
            "--out",
            "train.jsonl",
        ],
        d,
    );
    let report = ok(
        &[
            "train",
            "--train",
            "train.jsonl",
            "--val",
            "data/val.jsonl",
            "--seed",
            "1",
            "--out",
            "m.bin",
        ],
        d,
    );
    let report: Value = serde_json::from_str(&report).unwrap();
    assert!(report["epochs_run"].as_u64().unwrap() >= 1);

    ok(
        &[
            "saliency",
            "--model",
            "m.bin",
            "--in",
            "gold.jsonl",
            "--k",
            "3",
            "--R",
            "0",
            "--seed",
            "1",
            "--out",
            "sal.jsonl",
        ],
        d,
    );
    let sal = lines(&d.join("sal.jsonl"));
    assert_eq!(sal.len(), 50);
    let row: Value = serde_json::from_str(&sal[0]).unwrap();
    assert!(row["model_rationales"].as_array().unwrap().len() <= 3);

    ok(
        &[
            "select",
            "--model",
            "m.bin",
            "--pool",
            "data/pool.jsonl",
            "--k",
            "10",
            "--balance",
            "--out",
            "ids.txt",
        ],
        d,
    );
    assert_eq!(lines(&d.join("ids.txt")).len(), 10);

    ok(
        &[
            "correct",
            "--model",
            "m.bin",
            "--in",
            "gold.jsonl",
            "--lexicon",
            "data/lexicon.tsv",
            "--seed",
            "1",
            "--out",
            "fix.jsonl",
        ],
        d,
    );
    assert_eq!(lines(&d.join("fix.jsonl")).len(), 350);
}

#[test]
fn loop_run_is_deterministic_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let out = ok(
        &[
            "loop",
            "run",
            "--config",
            "data/loop.json",
            "--root",
            "a",
            "--n-gold",
            "10",
        ],
        d,
    );
    ok(
        &[
            "loop",
            "run",
            "--config",
            "data/loop.json",
            "--root",
            "b",
            "--n-gold",
            "10",
        ],
        d,
    );
    let session = out.lines().next().unwrap().trim().to_string();
    let name = Path::new(&session).file_name().unwrap().to_owned();
    for file in [
        "datasets/final_train.jsonl",
        "models/dynamic.bin",
        "metrics.json",
        "state.json",
    ] {
        let a = fs::read(d.join("a").join(&name).join(file)).unwrap();
        let b = fs::read(d.join("b").join(&name).join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
    assert_eq!(
        lines(&d.join("a").join(&name).join("datasets/final_train.jsonl")).len(),
        480
    );

    let md = ok(&["report", "--in", &session], d);
    assert!(md.contains("| dynamic (480) |"), "{md}");
    let json = ok(&["report", "--in", &session, "--format", "json"], d);
    let parsed: Value = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed["arms"].as_array().unwrap().len(), 2);

    // human mode stops at the first pending documents
    let out = ok(
        &[
            "loop",
            "run",
            "--config",
            "data/loop.json",
            "--root",
            "h",
            "--mode",
            "human",
            "--n-gold",
            "10",
        ],
        d,
    );
    assert!(out.contains("waiting in phase marking for 10 documents"), "{out}");
    let out = ok(
        &[
            "loop",
            "run",
            "--config",
            "data/loop.json",
            "--root",
            "h",
            "--mode",
            "human",
            "--n-gold",
            "10",
            "--marks",
            "data/pool.jsonl",
        ],
        d,
    );
    assert!(out.contains("waiting in phase reviewing for 60 documents"), "{out}");

    let out = rationale(&["loop", "run", "--root", "z"], d);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_run_on_a_control_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let exp = json!({
        "base": {
            "data": { "synthetic": { "n": 80, "n_val": 40, "n_test": 60, "flip_in_ood": false } },
            "n_gold": 10,
            "round2": { "k_new": 10 }
        },
        "arms": [
            { "name": "Static", "overrides": { "per_doc": 0, "round2": null } },
            { "name": "Static+350", "overrides": { "round2": null } },
            { "name": "Dynamic" }
        ],
        "n_seeds": 2
    });
    fs::write(d.join("exp.json"), exp.to_string()).unwrap();
    let md = ok(
        &[
            "--jobs",
            "2",
            "eval",
            "run",
            "--config",
            "exp.json",
            "--out",
            "report.json",
        ],
        d,
    );
    assert!(md.contains("| Training data |"));
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    let arms = report["arms"].as_array().unwrap();
    assert_eq!(arms.len(), 3);
    for arm in arms {
        assert!(arm["failed"].is_null(), "{arm}");
        assert_eq!(arm["cells"].as_array().unwrap().len(), 2);
    }
    assert!(d.join("report.json.sessions/dynamic/seed-1/metrics.json").exists());

    ok(&["report", "--in", "report.json", "--out", "report.md"], d);
    assert!(fs::read_to_string(d.join("report.md"))
        .unwrap()
        .contains("| Dynamic (160) |"));
}
