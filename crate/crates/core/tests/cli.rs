use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cchmm::cli::LabeledGraph;
use cchmm::model::CONCEPT_LABELS;

const TINY: [&str; 7] = [
    "scenario.num_regions=4",
    "scenario.grid_cols=2",
    "scenario.timesteps=120",
    "scenario.steps_per_day=12",
    "train.latent_dim=4",
    "train.history=3",
    "train.batch_size=16",
];

fn cchmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cchmm"))
        .args(args)
        .env_remove("CCHMM_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn with_tiny<'a>(mut args: Vec<&'a str>, extra: &[&'a str]) -> Vec<&'a str> {
    for s in TINY.iter().chain(extra) {
        args.push("--set");
        args.push(s);
    }
    args
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn generate(dir: &Path, extra: &[&str]) {
    ok(&cchmm(&with_tiny(vec!["generate", "--out", p(dir)], extra)));
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    ok(&cchmm(&with_tiny(
        vec!["train", "--data", p(data), "--out", p(out)],
        &[&["train.epochs=1"], extra].concat(),
    )));
}

#[test]
fn generate_writes_a_reproducible_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, &[]);
    generate(&b, &[]);
    assert_eq!(files(&a), files(&b));
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(a.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta.as_object().unwrap().len(), 6);
    for entry in meta.as_object().unwrap().values() {
        assert!(a.join(entry["file"].as_str().unwrap()).exists());
    }
    assert!(a.join("config.json").exists());

    // The seed variable changes the data.
    let c = tmp.path().join("c");
    let out = Command::new(env!("CARGO_BIN_EXE_cchmm"))
        .args(with_tiny(vec!["generate", "--out", p(&c)], &[]))
        .env("CCHMM_SEED", "99")
        .output()
        .unwrap();
    ok(&out);
    assert_ne!(files(&a), files(&c));
}

#[test]
fn bad_config_keys_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cchmm(&["generate", "--out", p(tmp.path()), "--set", "scenario.bogus_key=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scenario.bogus_key"));

    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = cchmm(&["generate", "--out", p(&tmp.path().join("x")), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = Command::new(env!("CARGO_BIN_EXE_cchmm"))
        .args(["generate", "--out", p(&tmp.path().join("y"))])
        .env("CCHMM_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_outputs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, &[]);
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    train(&data, &r1, &[]);
    train(&data, &r2, &[]);
    let strip = |d: &Path| -> Vec<_> { files(d).into_iter().filter(|(f, _)| f != Path::new("run_info.json")).collect() };
    assert_eq!(strip(&r1), strip(&r2));

    let log = fs::read_to_string(r1.join("log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["split"], "val");
    for f in ["config.json", "A_final.json", "run_info.json", "checkpoint/model.json", "final/model.json"] {
        assert!(r1.join(f).exists(), "{f}");
    }
}

#[test]
fn zero_learning_rate_checkpoint_equals_init() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, &[]);
    let (init, still) = (tmp.path().join("init"), tmp.path().join("still"));
    train(&data, &init, &["train.epochs=0"]);
    train(&data, &still, &["train.epochs=2", "train.lr=0"]);
    let arrays = |d: &Path| files(&d.join("final/arrays"));
    assert_eq!(arrays(&init), arrays(&still));
    assert_eq!(files(&still.join("checkpoint/arrays")), arrays(&init));
}

#[test]
fn variants_change_the_exported_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, &[]);
    let run = tmp.path().join("no-scm");
    ok(&cchmm(&with_tiny(
        vec!["train", "--data", p(&data), "--out", p(&run), "--variant", "no-scm"],
        &["train.epochs=1"],
    )));
    let csv = ok(&cchmm(&["export-graph", "--checkpoint", p(&run.join("checkpoint")), "--format", "csv"]));
    let g = LabeledGraph::from_csv(&csv).unwrap();
    assert_eq!(g.labels, CONCEPT_LABELS);
    assert!(g.matrix.iter().flatten().all(|v| *v == 0.0));

    let full = tmp.path().join("full");
    train(&data, &full, &[]);
    let out = tmp.path().join("a.csv");
    ok(&cchmm(&[
        "export-graph",
        "--checkpoint",
        p(&full.join("final")),
        "--format",
        "csv",
        "--out",
        p(&out),
    ]));
    let csv = fs::read_to_string(&out).unwrap();
    let g = LabeledGraph::from_csv(&csv).unwrap();
    assert_eq!(g.to_csv(), csv);
    let json = ok(&cchmm(&["export-graph", "--checkpoint", p(&full.join("final"))]));
    let from_json: LabeledGraph = serde_json::from_str(&json).unwrap();
    assert_eq!(from_json, g);
    assert!(g.matrix.iter().flatten().any(|v| *v > 0.0));

    let bad = cchmm(&["train", "--data", p(&data), "--out", p(&tmp.path().join("z")), "--variant", "w/o-scm"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn eval_reports_are_complete_and_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, &[]);
    let base = ok(&cchmm(&["eval", "--data", p(&data), "--baseline", "persistence"]));
    let report: serde_json::Value = serde_json::from_str(&base).unwrap();
    assert_eq!(report["source"], "persistence");
    let per = report["metrics"]["per_modality"].as_array().unwrap();
    assert_eq!(per.len(), 4);
    // Persistence compared with itself.
    for pair in report["mae_vs_persistence"].as_array().unwrap() {
        assert_eq!(pair[1].as_f64(), Some(1.0));
    }

    let run = tmp.path().join("run");
    train(&data, &run, &[]);
    let ckpt = run.join("checkpoint");
    let a = ok(&cchmm(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--split", "val"]));
    let b = ok(&cchmm(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--split", "val"]));
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(report["metrics"]["per_modality"].as_array().unwrap().len(), 4);
    assert!(report["graph_recovery"]["auc"].is_number());

    let csv = tmp.path().join("f.csv");
    ok(&cchmm(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--csv", p(&csv)]));
    assert!(fs::read_to_string(&csv).unwrap().lines().count() > 1);

    // A model trained on a different condition width does not fit this data.
    let other = tmp.path().join("other");
    generate(&other, &["scenario.poi_dim=5"]);
    let out = cchmm(&["eval", "--data", p(&other), "--checkpoint", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));

    let out = cchmm(&["eval", "--data", p(&tmp.path().join("missing")), "--baseline", "persistence"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_backward() {
    let out = cchmm(&["gradcheck"]);
    let text = ok(&out);
    assert!(text.contains("causal"), "{text}");
    let bad = cchmm(&["gradcheck", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(4));
    assert!(!String::from_utf8_lossy(&bad.stderr).is_empty());
}
