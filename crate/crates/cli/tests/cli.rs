use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn wildattr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wildattr")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthesizes the default scenario into `<root>/data`.
fn synth(root: &Path, seed: &str) -> PathBuf {
    let data = root.join("data");
    let out = wildattr(&["synth", "--seed", seed, "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    data
}

#[test]
fn ingest_validates_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "1");
    let out =
        wildattr(&["ingest", "--manifest", p(&data.join("test.manifest.jsonl")), "--out", p(&dir.path().join("ing"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ingested 1500 rows, dimension 16"));
    assert_eq!(
        std::fs::read(data.join("test.afv")).unwrap(),
        std::fs::read(dir.path().join("ing/dataset.afv")).unwrap()
    );
    assert!(dir.path().join("ing/resolved_config.json").exists());
}

#[test]
fn ingest_checksum_mismatch_names_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "1");
    let afv = data.join("wild.afv");
    let mut bytes = std::fs::read(&afv).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&afv, bytes).unwrap();
    let out =
        wildattr(&["ingest", "--manifest", p(&data.join("wild.manifest.jsonl")), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&out), 5);
    let err = stderr(&out);
    assert!(err.contains("error[checksum-mismatch]") && err.contains("wild.afv"), "{err}");
}

#[test]
fn ingest_truncated_has_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "1");
    let afv = data.join("labeled.afv");
    let bytes = std::fs::read(&afv).unwrap();
    std::fs::write(&afv, &bytes[..bytes.len() - 4]).unwrap();
    let out =
        wildattr(&["ingest", "--manifest", p(&data.join("labeled.manifest.jsonl")), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("error[truncated]"));
}

#[test]
fn ingest_csv_converts_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("v.csv");
    let meta = dir.path().join("v.jsonl");
    std::fs::write(&csv, "0.5,-1.25,3\n1e-3, 2.0 ,-0\n7,8,9\n").unwrap();
    std::fs::write(
        &meta,
        concat!(
            r#"{"source":"dalle3","role":"labeled","label":0}"#,
            "\n",
            r#"{"source":"sdxl","role":"test","label":1}"#,
            "\n",
            r#"{"source":"web","role":"wild"}"#,
            "\n"
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("conv");
    let out = wildattr(&["ingest", "--csv", p(&csv), "--metadata", p(&meta), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ds = wildattr::feature_store::load_dataset(&out_dir.join("dataset.manifest.jsonl")).unwrap();
    assert_eq!(ds.dimension(), 3);
    assert_eq!(ds.records()[1].features, vec![1e-3, 2.0, -0.0]);
    assert_eq!(ds.records()[2].source, "web");

    std::fs::write(&csv, "1,2\n3\n").unwrap();
    std::fs::write(&meta, "{\"source\":\"a\",\"role\":\"wild\"}\n{\"source\":\"a\",\"role\":\"wild\"}\n").unwrap();
    let out = wildattr(&["ingest", "--csv", p(&csv), "--metadata", p(&meta), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 3);

    std::fs::write(&csv, "1,nan\n").unwrap();
    std::fs::write(&meta, "{\"source\":\"a\",\"role\":\"wild\"}\n").unwrap();
    let out = wildattr(&["ingest", "--csv", p(&csv), "--metadata", p(&meta), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_finetune_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = synth(root, "2");
    let labeled = data.join("labeled.manifest.jsonl");
    let wild = data.join("wild.manifest.jsonl");
    let test = data.join("test.manifest.jsonl");
    let run = root.join("run");

    let out = wildattr(&["train", "--labeled", p(&labeled), "--seed", "2", "--out", p(&run.join("baseline"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let model = run.join("baseline/model.json");
    for mode in ["constrained", "pseudo"] {
        let out = wildattr(&[
            "finetune",
            "--mode",
            mode,
            "--model",
            p(&model),
            "--labeled",
            p(&labeled),
            "--wild",
            p(&wild),
            "--seed",
            "2",
            "--out",
            p(&run.join(mode)),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let cfg = std::fs::read_to_string(run.join("pseudo/resolved_config.json")).unwrap();
    assert!(cfg.contains("\"confidence_threshold\": 0.9") && !cfg.contains("alpha_multiplier"));
    for mode in ["baseline", "constrained", "pseudo"] {
        let out = wildattr(&[
            "eval",
            "--model",
            p(&run.join(mode).join("model.json")),
            "--test",
            p(&test),
            "--target-source",
            "target",
            "--hard-sources",
            "unseen_1,unseen_2,unseen_3",
            "--out",
            p(&run.join(mode)),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let csv = std::fs::read_to_string(run.join("constrained/eval_report.csv")).unwrap();
    assert!(csv.starts_with("source,ap,auroc,n_target,n_comparison\n"));
    assert!(csv.lines().last().unwrap().starts_with("__hard_average__,"));

    let out = wildattr(&["report", "--run", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let md = std::fs::read_to_string(run.join("report.md")).unwrap();
    assert!(md.contains("AUROC (cons. opt.)") && md.contains("| unseen_2 |") && md.contains("**hard average**"));
    let grid = std::fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 9 + 1);
}

#[test]
fn eval_warns_on_missing_default_hard_sources() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "3");
    let base = dir.path().join("b");
    assert_eq!(code(&wildattr(&["train", "--labeled", p(&data.join("labeled.manifest.jsonl")), "--out", p(&base)])), 0);
    let out = wildattr(&[
        "eval",
        "--model",
        p(&base.join("model.json")),
        "--test",
        p(&data.join("test.manifest.jsonl")),
        "--target-source",
        "target",
        "--out",
        p(&base),
    ]);
    assert_eq!(code(&out), 0);
    assert!(stderr(&out).contains("midjourney"));
    let csv = std::fs::read_to_string(base.join("eval_report.csv")).unwrap();
    assert!(csv.ends_with("__hard_average__,,,150,0\n"));
    let out = wildattr(&[
        "eval",
        "--model",
        p(&base.join("model.json")),
        "--test",
        p(&data.join("test.manifest.jsonl")),
        "--target-source",
        "nobody",
        "--out",
        p(&base),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn infeasible_constraint_exits_seven_and_echoes_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "4");
    let labeled = data.join("labeled.manifest.jsonl");
    let base = dir.path().join("b");
    assert_eq!(code(&wildattr(&["train", "--labeled", p(&labeled), "--out", p(&base)])), 0);
    let cfg = dir.path().join("tight.json");
    std::fs::write(&cfg, r#"{"constraint": {"alpha_tolerance": 0.0, "lambda_max_outer_iters": 1}}"#).unwrap();
    let out_dir = dir.path().join("c");
    let out = wildattr(&[
        "finetune",
        "--mode",
        "constrained",
        "--alpha-mult",
        "1",
        "--lambda-init",
        "1e6",
        "--config",
        p(&cfg),
        "--model",
        p(&base.join("model.json")),
        "--labeled",
        p(&labeled),
        "--wild",
        p(&data.join("wild.manifest.jsonl")),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 7, "{}", stderr(&out));
    let a = wildattr::ProbeModel::load(&base.join("model.json")).unwrap();
    let b = wildattr::ProbeModel::load(&out_dir.join("model.json")).unwrap();
    assert_eq!(a, b);
    let result = std::fs::read_to_string(out_dir.join("train_result.json")).unwrap();
    assert!(result.contains("\"infeasible\""));
}

#[test]
fn validation_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "5");
    let labeled = data.join("labeled.manifest.jsonl");
    // clap usage error
    assert_eq!(code(&wildattr(&["train", "--out", p(dir.path())])), 2);
    // bad config key
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"trian": {}}"#).unwrap();
    let out = wildattr(&["train", "--labeled", p(&labeled), "--config", p(&cfg), "--out", p(&dir.path().join("t"))]);
    assert_eq!(code(&out), 3);
    // alpha multiplier below 1
    let base = dir.path().join("b");
    assert_eq!(code(&wildattr(&["train", "--labeled", p(&labeled), "--out", p(&base)])), 0);
    let out = wildattr(&[
        "finetune",
        "--mode",
        "constrained",
        "--alpha-mult",
        "0.5",
        "--model",
        p(&base.join("model.json")),
        "--labeled",
        p(&labeled),
        "--wild",
        p(&data.join("wild.manifest.jsonl")),
        "--out",
        p(&dir.path().join("c")),
    ]);
    assert_eq!(code(&out), 3);
    // single-class labeled data
    let single = dir.path().join("single");
    let ds = wildattr::feature_store::load_dataset(&labeled).unwrap();
    let only_target = ds.filter(|r| r.label == Some(wildattr::Label::Target));
    wildattr::feature_store::write_dataset(&only_target, &single, "l").unwrap();
    let out = wildattr(&["train", "--labeled", p(&single.join("l.manifest.jsonl")), "--out", p(&dir.path().join("s"))]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("both classes"));
    // missing file
    let out = wildattr(&["train", "--labeled", p(&dir.path().join("nope.jsonl")), "--out", p(&dir.path().join("n"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_overrides_flags_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "6");
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 9, "train": {"max_steps": 3}}"#).unwrap();
    let out_dir = dir.path().join("t");
    let out = wildattr(&[
        "train",
        "--labeled",
        p(&data.join("labeled.manifest.jsonl")),
        "--seed",
        "1",
        "--config",
        p(&cfg),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 9);
    assert_eq!(resolved["train"]["max_steps"], 3);
    assert_eq!(resolved["train"]["seed"], 9);
    assert_eq!(resolved["split"]["seed"], wildattr::seed::derive(9, "split"));
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("train_result.json")).unwrap()).unwrap();
    assert_eq!(result["steps_taken"], 3);
}

#[test]
fn run_and_sweep_write_fixed_layout() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = wildattr(&["run", "--seed", "7", "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [
        "resolved_config.json",
        "report.md",
        "report.csv",
        "data/labeled.afv",
        "data/wild.manifest.jsonl",
        "baseline/model.json",
        "baseline/train_result.json",
        "pseudo/eval_report.json",
        "constrained/eval_report.csv",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let sweep = dir.path().join("sweep");
    let out = wildattr(&["sweep", "--axis", "leak-fraction", "--values", "0,0.5", "--seeds", "2", "--out", p(&sweep)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("leak_fraction,0.5,2,"));
    assert_eq!(code(&wildattr(&["sweep", "--axis", "bogus", "--values", "1", "--out", p(&sweep)])), 2);
}
