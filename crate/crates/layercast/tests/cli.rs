//! End-to-end checks of the command-line surface: pipeline runs, artifact
//! determinism, exit codes, and flag documentation.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_layercast")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn pipeline_synth_build_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = path_str(&dir.path().join("corpus.jsonl"));
    let graphs = path_str(&dir.path().join("graphs"));
    let out = path_str(&dir.path().join("run"));

    let gen = run(&[
        "synth-gen", "--count", "60", "--seed", "1", "--out", &corpus,
        "--width", "64", "--boundaries", "21",
    ]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    let build = run(&[
        "build-graphs", "--in", &corpus, "--out", &graphs,
        "--window", "5", "--stride", "3", "--l", "5", "--m", "15",
    ]);
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let n_files = fs::read_dir(&graphs).unwrap().count();
    assert_eq!(n_files, 60);
    // cache entries carry the shared edge structure
    let one: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&graphs).join("synth-0000.json")).unwrap())
            .unwrap();
    assert!(one["edges"].as_array().unwrap().len() > 60);
    assert_eq!(one["features_by_layer"].as_array().unwrap().len(), 5);
    assert_eq!(one["targets"].as_array().unwrap().len(), 64);

    let train = run(&[
        "train", "--data", &corpus, "--out", &out,
        "--d", "8", "--blocks", "1", "--heads", "2", "--epochs", "2", "--seed", "5",
    ]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(Path::new(&out).join("checkpoint.json").exists());
    let trace = fs::read_to_string(Path::new(&out).join("loss_trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,train_mse,val_mse,lr\n"));
    assert_eq!(trace.lines().count(), 3);

    let ckpt = path_str(&Path::new(&out).join("checkpoint.json"));
    let eval = run(&[
        "eval", "--checkpoint", &ckpt, "--data", &corpus, "--split-seed", "1", "--out", &out,
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join("eval_report.json")).unwrap())
            .unwrap();
    assert!(report["rmse"].as_f64().unwrap() >= 0.0);
    for p in ["1", "2", "5", "10"] {
        assert!(report["boundary"][p].as_f64().unwrap() >= 0.0);
    }
    let mae = fs::read_to_string(Path::new(&out).join("column_mae.csv")).unwrap();
    assert!(mae.starts_with("column,mae\n"));
    assert_eq!(mae.lines().count(), 65);

    // identical eval invocations produce byte-identical artifacts
    let out2 = path_str(&dir.path().join("run2"));
    let eval2 = run(&[
        "eval", "--checkpoint", &ckpt, "--data", &corpus, "--split-seed", "1", "--out", &out2,
    ]);
    assert!(eval2.status.success());
    assert_eq!(
        fs::read(Path::new(&out).join("eval_report.json")).unwrap(),
        fs::read(Path::new(&out2).join("eval_report.json")).unwrap()
    );
    assert_eq!(
        fs::read(Path::new(&out).join("column_mae.csv")).unwrap(),
        fs::read(Path::new(&out2).join("column_mae.csv")).unwrap()
    );
}

#[test]
fn synth_gen_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let a = path_str(&dir.path().join("a.jsonl"));
    let b = path_str(&dir.path().join("b.jsonl"));
    assert!(run(&["synth-gen", "--count", "3", "--seed", "7", "--width", "32",
        "--boundaries", "6", "--out", &a]).status.success());
    assert!(run(&["synth-gen", "--count", "3", "--seed", "7", "--width", "32",
        "--boundaries", "6", "--out", &b]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn train_rejects_malformed_config_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{ not json").unwrap();
    let out = run(&["train", "--config", &path_str(&cfg), "--data", "/nonexistent.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("parse error"), "{stderr}");
}

#[test]
fn train_rejects_invalid_model_config_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = path_str(&dir.path().join("c.jsonl"));
    assert!(run(&["synth-gen", "--count", "6", "--seed", "2", "--width", "16",
        "--boundaries", "4", "--out", &corpus]).status.success());
    // 10 is not divisible by 4 heads
    let out = run(&[
        "train", "--data", &corpus, "--min-layers", "3", "--l", "2", "--m", "1",
        "--d", "10", "--heads", "4", "--epochs", "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not divisible"), "{stderr}");
}

#[test]
fn load_failure_names_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("broken.jsonl");
    fs::write(&corpus, "{\"id\": \"x\"}\n").unwrap();
    let out = run(&["train", "--data", &path_str(&corpus), "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 1") || stderr.contains(":1:"), "{stderr}");
}

#[test]
fn unknown_flags_are_rejected() {
    let out = run(&["synth-gen", "--count", "1", "--out", "/tmp/x.jsonl", "--bogus"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--bogus"), "{stderr}");
}

#[test]
fn every_subcommand_documents_its_flags() {
    let checks: &[(&str, &[&str])] = &[
        ("synth-gen", &["--count", "--seed", "--out", "--width", "--boundaries"]),
        ("build-graphs", &["--in", "--out", "--window", "--stride", "--l", "--m", "--standard-haversine"]),
        (
            "train",
            &[
                "--data", "--config", "--out", "--seed", "--split-seed", "--epochs", "--lr",
                "--weight-decay", "--batch-size", "--scheduler", "--d", "--blocks", "--heads",
                "--sage-layers", "--dropout", "--alpha0", "--l", "--m", "--weighted-mean",
                "--shared-alpha", "--no-lr-skip", "--min-layers", "--window", "--stride",
            ],
        ),
        ("eval", &["--checkpoint", "--data", "--split-seed", "--out", "--per-record"]),
        ("ablate", &["--data", "--trials", "--epochs", "--out", "--alpha0"]),
        ("alpha-sweep", &["--n-blocks", "--alphas", "--trials", "--data"]),
        ("gradcheck", &["--seed", "--step", "--tolerance"]),
    ];
    for (cmd, flags) in checks {
        let out = run(&[cmd, "--help"]);
        assert!(out.status.success(), "{cmd} --help failed");
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in *flags {
            assert!(text.contains(flag), "{cmd} --help missing {flag}");
        }
    }
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = run(&["gradcheck", "--seed", "0"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("matmul"));
    assert!(stdout.contains("full model (tiny)"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn config_file_drives_training_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = path_str(&dir.path().join("c.jsonl"));
    assert!(run(&["synth-gen", "--count", "8", "--seed", "4", "--width", "24",
        "--boundaries", "8", "--out", &corpus]).status.success());
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        format!(
            r#"{{
  "model": {{"d": 8, "n_blocks": 1, "n_heads": 2, "l_sage": 1, "k": 3, "m": 2}},
  "train": {{"epochs": 2, "seed": 11}},
  "graph": {{"window": 4, "stride": 2}},
  "data": {{"records": "{corpus}", "min_layers": 5}}
}}"#
        ),
    )
    .unwrap();
    let out_dir = path_str(&dir.path().join("out"));
    // --epochs overrides the file's 2
    let out = run(&["train", "--config", &path_str(&cfg), "--out", &out_dir, "--epochs", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(Path::new(&out_dir).join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4, "3 epochs expected from the override");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("resolved config"), "{stderr}");
}

#[test]
fn alpha_sweep_emits_grid_rows() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = path_str(&dir.path().join("c.jsonl"));
    assert!(run(&["synth-gen", "--count", "8", "--seed", "6", "--width", "24",
        "--boundaries", "8", "--out", &corpus]).status.success());
    let out_dir = path_str(&dir.path().join("sweep"));
    let out = run(&[
        "alpha-sweep", "--data", &corpus, "--out", &out_dir,
        "--min-layers", "5", "--l", "3", "--m", "2",
        "--d", "8", "--heads", "2", "--epochs", "1", "--trials", "1",
        "--n-blocks", "1,2", "--alphas", "0.25,0.5,0.75",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&out_dir).join("alpha_sweep.json")).unwrap())
            .unwrap();
    assert_eq!(report.as_array().unwrap().len(), 6, "2 block counts x 3 alphas");
    let csv = fs::read_to_string(Path::new(&out_dir).join("alpha_sweep.csv")).unwrap();
    assert!(csv.starts_with("variant_flags,n_blocks,alpha0,trial,rmse,brmse_p1,brmse_p2,brmse_p5,brmse_p10\n"));
    assert_eq!(csv.lines().count(), 7, "header plus one row per grid cell");
    // single trial -> zero std everywhere
    for cell in report.as_array().unwrap() {
        assert_eq!(cell["aggregate"]["rmse_std"].as_f64().unwrap(), 0.0);
    }
}
