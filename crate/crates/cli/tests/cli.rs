use std::path::Path;
use std::process::{Command, Output};

const START: &str = "rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1";
const SMALL: &[&str] = &[
    "--residual-blocks", "1", "--filters", "8", "--batch-size", "8", "--games", "3",
    "--max-plies", "40", "--checkpoint-every", "2",
];

fn iimap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iimap"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("IIMAP_STEPS")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn manifest(run: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(iimap(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(iimap(dir.path(), &["train", "--no-such-flag", "1"]).status.code(), Some(2));
    assert_eq!(iimap(dir.path(), &["explain", "--top-k", "many"]).status.code(), Some(2));
    assert_eq!(iimap(dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn missing_config_is_a_diagnosed_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = iimap(dir.path(), &["train", "--config", "missing.toml", "--run-dir", "r"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing.toml") && err.contains("No such file"), "{err}");
}

#[test]
fn explain_prints_grid_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&iimap(dir.path(), &["explain", "--fen", START, "--run-dir", "ex"]));
    let lines: Vec<&str> = stdout.lines().collect();
    let grid: Vec<&&str> = lines.iter().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).collect();
    assert_eq!(grid.len(), 8);
    assert!(grid.iter().all(|l| l.split_whitespace().count() == 9));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ex/explanation.json")).unwrap()).unwrap();
    assert_eq!(json["policy"].as_array().unwrap().len(), 5);
    assert_eq!(json["legal_moves"], 20);
    assert!(stdout.contains(json["best_move_arrow"].as_str().unwrap()));
    assert_eq!(manifest(&dir.path().join("ex"))["outputs"], serde_json::json!(["explanation.json"]));

    let bad = iimap(dir.path(), &["explain", "--fen", "not a fen", "--run-dir", "bad"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("FEN"));
}

#[test]
fn encode_writes_planes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&iimap(
        dir.path(),
        &["encode", "--moves", "e2e4 e7e5", "--history-length", "2", "--run-dir", "enc"],
    ));
    assert!(stdout.starts_with("shape 8x8x40"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("enc/planes.json")).unwrap()).unwrap();
    assert_eq!(json["data"].as_array().unwrap().len(), 64 * 40);
}

#[test]
fn config_precedence_is_flag_env_file_default() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "steps = 3\nbatch_size = 4\nfilters = 8\n").unwrap();
    let read = |run: &str| {
        let text = std::fs::read_to_string(dir.path().join(run).join("config.toml")).unwrap();
        let t: toml::Table = toml::from_str(&text).unwrap();
        (t["steps"].as_integer().unwrap(), t["batch_size"].as_integer().unwrap(), t["filters"].as_integer().unwrap(), t["games"].as_integer().unwrap())
    };
    let run = |args: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_iimap"));
        cmd.current_dir(dir.path()).env("RUST_LOG", "warn").args(args);
        match env {
            Some(v) => cmd.env("IIMAP_STEPS", v),
            None => cmd.env_remove("IIMAP_STEPS"),
        };
        ok(&cmd.output().unwrap());
    };
    run(&["teach", "--config", "c.toml", "--games", "1", "--max-plies", "4", "--run-dir", "a"], None);
    assert_eq!(read("a"), (3, 4, 8, 1));
    run(&["teach", "--config", "c.toml", "--games", "1", "--max-plies", "4", "--run-dir", "b"], Some("7"));
    assert_eq!(read("b"), (7, 4, 8, 1));
    run(
        &["teach", "--config", "c.toml", "--games", "1", "--max-plies", "4", "--steps", "9", "--run-dir", "c"],
        Some("7"),
    );
    assert_eq!(read("c"), (9, 4, 8, 1));
    run(&["teach", "--games", "1", "--max-plies", "4", "--run-dir", "d"], None);
    assert_eq!(read("d").0, 2000);

    let out = iimap(dir.path(), &["teach", "--steps", "lots", "--run-dir", "e"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let teach = ok(&iimap(d, &[&["teach", "--run-dir", "teach"], SMALL].concat()));
    assert!(teach.contains("positions"));
    let dataset = d.join("teach/teacher.jsonl");
    assert!(std::fs::read_to_string(&dataset).unwrap().lines().count() > 20);

    let train_args = [&["train", "--dataset", "teach/teacher.jsonl", "--steps", "4", "--run-dir", "train"], SMALL].concat();
    ok(&iimap(d, &train_args));
    let m = manifest(&d.join("train"));
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for f in ["config.toml", "ckpt-000000.ckpt", "ckpt-000002.ckpt", "ckpt-000004.ckpt", "train_log.csv", "eval_log.csv"] {
        assert!(outputs.contains(&f), "{outputs:?}");
        assert!(d.join("train").join(f).exists());
    }
    assert_eq!(m["summary"]["step"], 4);

    let resume_args = [
        &["train", "--dataset", "teach/teacher.jsonl", "--steps", "6", "--resume", "train/ckpt-000004.ckpt", "--run-dir", "resumed"],
        SMALL,
    ]
    .concat();
    ok(&iimap(d, &resume_args));
    assert!(d.join("resumed/ckpt-000006.ckpt").exists());

    let probe = ok(&iimap(
        d,
        &[
            "probe", "--checkpoints", "train", "--concepts", "in_check,random,material_advantage", "--games", "20",
            "--max-positions", "600", "--run-dir", "probe",
        ],
    ));
    assert!(probe.contains("positions"));
    let csv = std::fs::read_to_string(d.join("probe/probe_report.csv")).unwrap();
    assert!(csv.starts_with("checkpoint,layer,concept,lambda,corrected_accuracy,n_train,n_val,positive_rate"));
    assert!(csv.lines().count() > 1);
    let plot: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("probe/probe_plot.json")).unwrap()).unwrap();
    assert!(!plot["curves"].as_array().unwrap().is_empty());
    assert!(d.join("probe/probe_random.svg").exists());

    let unknown = iimap(d, &["probe", "--checkpoints", "train", "--concepts", "castled", "--run-dir", "p2"]);
    assert_eq!(unknown.status.code(), Some(1));

    let explain = ok(&iimap(
        d,
        &[
            "explain", "--checkpoint", "train", "--fen", "6k1/5ppp/8/8/8/8/8/R5K1 w - - 0 1", "--relocate", "g8:c6",
            "--run-dir", "explain",
        ],
    ));
    assert!(explain.contains("ckpt-000004"));
    assert!(explain.contains("difference"));
    let cf: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("explain/counterfactual.json")).unwrap()).unwrap();
    assert_eq!(cf["original"]["P"].as_array().unwrap().len(), 8);
    assert_eq!(cf["variant"]["P"].as_array().unwrap().len(), 8);

    std::fs::write(
        d.join("puzzles.csv"),
        format!("id,fen,best_move,rating\nforced,7k/8/5Q1K/8/8/8/8/8 b - - 0 1,h8g8,1200\nbroken,{START},e2e5,900\n"),
    )
    .unwrap();
    let puzzles = ok(&iimap(d, &["puzzles", "--file", "puzzles.csv", "--checkpoint", "train/ckpt-000004.ckpt", "--run-dir", "pz"]));
    assert!(puzzles.contains("solve rate 1.0000 over 1 puzzles"), "{puzzles}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("pz/puzzles.json")).unwrap()).unwrap();
    assert_eq!(report["skipped"][0]["id"], "broken");

    let sweep = ok(&iimap(
        d,
        &[&["sweep", "--dataset", "teach/teacher.jsonl", "--steps", "2", "--lambdas", "0.01,0", "--run-dir", "sweep"], SMALL].concat(),
    ));
    assert!(sweep.contains("agreement"));
    let rows = std::fs::read_to_string(d.join("sweep/sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(rows.lines().nth(1).unwrap().starts_with("0.0,") || rows.lines().nth(1).unwrap().starts_with("0,"));
    assert!(d.join("sweep/sweep.svg").exists());
}
