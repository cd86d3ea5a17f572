use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn emifuse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emifuse"))
        .args(args)
        .current_dir(cwd)
        .env("EMIFUSE_RUN_ROOT", cwd.join("runs"))
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn succeed(args: &[&str], cwd: &Path) -> Output {
    let o = emifuse(args, cwd);
    assert!(o.status.success(), "{args:?} failed:\n{}", stderr(&o));
    o
}

fn gen(cwd: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["gen-synth", "--n", "60", "--dims", "4:3:5", "--min-len", "3", "--max-len", "12", "--out", out];
    if !extra.contains(&"--seed") {
        args.extend_from_slice(&["--seed", "1"]);
    }
    args.extend_from_slice(extra);
    succeed(&args, cwd);
    cwd.join(out)
}

const TRAIN: &[&str] = &[
    "--dims", "4:3:5", "--hidden-dim", "6", "--align-len", "6", "--batch-size", "8", "--epochs", "2", "--lr", "1e-2",
];

fn train(cwd: &Path, data: &Path, run: &str) -> PathBuf {
    let manifest = data.join("manifest.csv");
    let mut args = vec!["train", "--manifest", manifest.to_str().unwrap(), "--run-dir", run];
    args.extend_from_slice(TRAIN);
    succeed(&args, cwd);
    cwd.join(run)
}

#[test]
fn gen_synth_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen(tmp.path(), "a", &[]);
    let b = gen(tmp.path(), "b", &[]);
    let c = gen(tmp.path(), "c", &["--seed", "2"]);
    let files = |d: &Path| {
        let mut names: Vec<PathBuf> = fs::read_dir(d.join("features")).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        names
    };
    assert_eq!(files(&a).len(), 60);
    for (x, y) in files(&a).iter().zip(files(&b)) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_eq!(fs::read(a.join("manifest.csv")).unwrap(), fs::read(b.join("manifest.csv")).unwrap());
    assert_ne!(fs::read(a.join("manifest.csv")).unwrap(), fs::read(c.join("manifest.csv")).unwrap());
}

#[test]
fn disjoint_sidecar_records_assignment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gen(tmp.path(), "d", &["--mode", "disjoint"]);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("synth.json")).unwrap()).unwrap();
    assert_eq!(side["assignment"], serde_json::json!([[0, 1], [2, 3], [4, 5]]));
    assert_eq!(side["spec"]["mode"], "disjoint");
    assert_eq!(side["counts"]["train"], 48);
}

#[test]
fn train_evaluate_predict_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "data", &[]);
    let run = train(tmp.path(), &data, "run");
    for f in ["config.json", "log.jsonl", "best.emic", "last.emic"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let best = run.join("best.emic");
    let best = best.to_str().unwrap();

    let o = succeed(&["evaluate", "--ckpt", best], tmp.path());
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["n"], 6);
    assert_eq!(report["p"].as_array().unwrap().len(), 6);
    let raw: serde_json::Value = serde_json::from_str(&stdout(&succeed(&["evaluate", "--ckpt", best, "--no-ema"], tmp.path()))).unwrap();
    assert_ne!(report["p_mean"], raw["p_mean"]);
    let both: serde_json::Value = serde_json::from_str(&stdout(&succeed(&["evaluate", "--ckpt", best, "--both"], tmp.path()))).unwrap();
    assert_eq!(both["ema"], report);
    assert_eq!(both["raw"], raw);

    let manifest = data.join("manifest.csv");
    let preds = tmp.path().join("preds.csv");
    succeed(
        &["predict", "--ckpt", best, "--manifest", manifest.to_str().unwrap(), "--out", preds.to_str().unwrap()],
        tmp.path(),
    );
    let text = fs::read_to_string(&preds).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "id,adm,amu,det,emp,exc,joy");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    for row in &rows {
        let values: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(values.len(), 6);
        assert!(values.iter().all(|v| (0.0..=1.0).contains(v)), "{row}");
    }
    let logits = tmp.path().join("logits.csv");
    succeed(
        &["predict", "--ckpt", best, "--manifest", manifest.to_str().unwrap(), "--out", logits.to_str().unwrap(), "--raw"],
        tmp.path(),
    );
    assert_ne!(fs::read_to_string(&logits).unwrap(), text);

    let o = succeed(&["inspect", "--ckpt", best], tmp.path());
    let out = stdout(&o);
    assert!(out.starts_with("magic EMIC\nversion 1\n"), "{out}");
    let count = |prefix: &str| -> usize {
        out.lines().find_map(|l| l.strip_prefix(prefix)).unwrap().split_whitespace().next().unwrap().parse().unwrap()
    };
    assert_eq!(count("parameters "), count("expected "));
    assert!(out.contains("ema/head.fc2.weight"));

    let feature = fs::read_dir(data.join("features")).unwrap().next().unwrap().unwrap().path();
    let out = stdout(&succeed(&["inspect", "--emif", feature.to_str().unwrap()], tmp.path()));
    assert!(out.starts_with("magic EMIF\nversion 1\nvisual "), "{out}");
    assert!(out.contains("×4") && out.contains("×3") && out.contains("×5"));
}

#[test]
fn training_is_reproducible_and_config_echo_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "data", &["--missing-text-rate", "0.2"]);
    let a = train(tmp.path(), &data, "a");
    let b = train(tmp.path(), &data, "b");
    for f in ["log.jsonl", "best.emic", "last.emic"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let saved = fs::read_to_string(a.join("config.json")).unwrap();
    let c = tmp.path().join("c");
    let o = succeed(&["train", "--config", a.join("config.json").to_str().unwrap(), "--run-dir", "c"], tmp.path());
    let echoed = stderr(&o);
    let json = &echoed[echoed.find('{').unwrap()..=echoed.find("\n}").unwrap() + 1];
    let mut echoed: serde_json::Value = serde_json::from_str(json).unwrap();
    let mut saved: serde_json::Value = serde_json::from_str(&saved).unwrap();
    assert_eq!(echoed["run_dir"], "c");
    echoed["run_dir"] = serde_json::Value::Null;
    saved["run_dir"] = serde_json::Value::Null;
    assert_eq!(echoed, saved);
    assert_eq!(fs::read(a.join("log.jsonl")).unwrap().len(), fs::read(c.join("log.jsonl")).unwrap().len());
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "data", &[]);
    let run = train(tmp.path(), &data, "run");
    let o = succeed(
        &["train", "--config", run.join("config.json").to_str().unwrap(), "--run-dir", "r2", "--epochs", "1", "--fusion", "average"],
        tmp.path(),
    );
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("r2/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["epochs"], 1);
    assert_eq!(cfg["fusion"], "average");
    assert_eq!(cfg["hidden_dim"], 6);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["epochs_run"], 1);
}

#[test]
fn default_run_dir_uses_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "data", &[]);
    let manifest = data.join("manifest.csv");
    let mut args = vec!["train", "--manifest", manifest.to_str().unwrap(), "--epochs", "1"];
    args.extend_from_slice(&TRAIN[..TRAIN.len() - 4]);
    succeed(&args, tmp.path());
    let runs: Vec<String> = fs::read_dir(tmp.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].starts_with("train-") && runs[0].len() == "train-".len() + 12, "{runs:?}");
}

#[test]
fn ablate_writes_eight_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "data", &["--mode", "disjoint"]);
    let manifest = data.join("manifest.csv");
    let mut args = vec!["ablate", "--manifest", manifest.to_str().unwrap(), "--out", "grid", "--seeds", "0,1"];
    args.extend_from_slice(&TRAIN[..TRAIN.len() - 4]);
    args.extend_from_slice(&["--epochs", "1", "--lr", "1e-2"]);
    succeed(&args, tmp.path());
    let table = fs::read_to_string(tmp.path().join("grid/ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 9);
    assert_eq!(lines[0], "row,method,fusion,use_vad,seeds,p_mean,p_spread,status");
    assert!(lines[1].starts_with("1,baseline,average,false,0 1,"));
    assert!(lines[2].starts_with("2,baseline,concat,false,"));
    assert!(lines[4].starts_with("4,baseline+multi_objective+vad,concat,true,"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",ok")));
    assert_eq!(fs::read_dir(tmp.path().join("grid")).unwrap().count(), 9);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "data", &[]);
    let manifest = data.join("manifest.csv");
    let m = manifest.to_str().unwrap();
    let code = |args: &[&str]| emifuse(args, tmp.path()).status.code();

    assert_eq!(code(&["train", "--manifest", m, "--dims", "4:3:5", "--bogus-flag"]), Some(1));
    assert_eq!(code(&["train", "--manifest", m]), Some(1));
    assert_eq!(code(&["train", "--manifest", m, "--dims", "4:3:5", "--dropout", "1.5"]), Some(1));
    assert_eq!(code(&["train", "--dims", "4:3:5"]), Some(1));
    assert_eq!(code(&["inspect"]), Some(1));
    assert_eq!(code(&["train", "--manifest", m, "--dims", "4:3:6", "--epochs", "1"]), Some(2));
    assert_eq!(code(&["inspect", "--emif", manifest.to_str().unwrap()]), Some(2));
    assert_eq!(code(&["inspect", "--emif", "missing.emif"]), Some(2));

    let mut args = vec!["train", "--manifest", m, "--run-dir", "blowup", "--lr", "1e300", "--weight-decay", "0"];
    args.extend_from_slice(&TRAIN[..TRAIN.len() - 2]);
    let o = emifuse(&args, tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(tmp.path().join("blowup/last.emic").exists());

    let bad_cfg = tmp.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"hiden_dim": 4}"#).unwrap();
    assert_eq!(code(&["train", "--config", bad_cfg.to_str().unwrap(), "--manifest", m]), Some(1));
}

#[test]
fn help_lists_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let o = emifuse(&["train", "--help"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let help = stdout(&o);
    for default in [
        "--hidden-dim <HIDDEN_DIM>",
        "[default: 256]",
        "[default: 0.2]",
        "[default: 32]",
        "[default: 1e-4]",
        "[default: 30]",
        "[default: 8]",
        "[default: 1.0]",
        "[default: 0.999]",
        "[default: 128]",
    ] {
        assert!(help.contains(default), "missing {default} in:\n{help}");
    }
}
