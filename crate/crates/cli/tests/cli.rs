use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use retino_bench::dataset::write_synthetic_corpus;
use retino_bench::report::{BEST_CSV, COMPARISON_CSV, HISTORY_CSV, METRICS_CSV, RECORD_FILE};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_retino-bench"));
    cmd.env_remove("RETINO_BENCH_RUNS_DIR").env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stub_config(dir: &Path, manifest: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "[dataset]\nmanifest = {manifest:?}\n\
         [model]\nbackbone = \"StubBackbone\"\nstub_input = [8, 8]\nstub_feature_dim = 16\n\
         [training]\nepochs = 3\nbatch_size = 8\n\
         [output]\nruns_dir = \"runs\"\n{extra}"
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn corpus(dir: &Path) -> PathBuf {
    write_synthetic_corpus(&dir.join("data"), 4, 12, 1).unwrap()
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    match fs::read_dir(root) {
        Ok(entries) => {
            let mut dirs: Vec<PathBuf> =
                entries.map(|e| e.unwrap().path()).filter(|p| p.join(RECORD_FILE).is_file()).collect();
            dirs.sort();
            dirs
        }
        Err(_) => Vec::new(),
    }
}

fn stdout_path(out: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8_lossy(&out.stdout).trim())
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_exits_1_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let cfg = stub_config(dir.path(), &manifest, "[training.extra]\nsurprise = 1\n");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(!dir.path().join("runs").exists());
    assert!(!stderr(&out).is_empty());
}

#[test]
fn missing_config_file_exits_1() {
    let out = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_backbone_flag_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let cfg = stub_config(dir.path(), &manifest, "");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--backbone", "AlexNet"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_manifest_exits_2_and_creates_no_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = stub_config(dir.path(), &dir.path().join("absent.csv"), "");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.csv"));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn missing_image_exits_2_and_creates_no_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    fs::remove_file(dir.path().join("data/Mild DR/0000.png")).unwrap();
    let cfg = stub_config(dir.path(), &manifest, "");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn diverging_training_exits_3_with_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let cfg = stub_config(dir.path(), &manifest, "[optimizer]\nlearning_rate = 1e300\n");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let runs: Vec<PathBuf> = fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].join("diagnostic.safetensors").is_file());
}

#[test]
fn split_writes_manifest_with_all_records_assigned() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let cfg = stub_config(dir.path(), &manifest, "");
    let target = dir.path().join("split.csv");
    let out = run(&["split", "--config", cfg.to_str().unwrap(), "--out", target.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&target).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("image_path,label,split"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.ends_with(",train") || r.ends_with(",validation")), "{rows:?}");
}

#[test]
fn train_evaluate_compare_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let cfg = stub_config(dir.path(), &manifest, "");
    let cfg = cfg.to_str().unwrap();

    let first = run(&["train", "--config", cfg]);
    assert!(first.status.success(), "{}", stderr(&first));
    let run_a = stdout_path(&first);
    let history = fs::read_to_string(run_a.join(HISTORY_CSV)).unwrap();
    assert_eq!(history.lines().count(), 1 + 3);
    assert!(run_a.join(METRICS_CSV).is_file());

    let second = run(&["train", "--config", cfg, "--epochs", "2", "--seed", "5"]);
    assert!(second.status.success(), "{}", stderr(&second));
    let run_b = stdout_path(&second);
    assert_ne!(run_a, run_b);
    assert_eq!(fs::read_to_string(run_b.join(HISTORY_CSV)).unwrap().lines().count(), 1 + 2);

    let eval_out = dir.path().join("eval");
    let checkpoint = run_a.join("checkpoint.safetensors");
    let evaluated = run(&[
        "evaluate",
        "--config",
        cfg,
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(evaluated.status.success(), "{}", stderr(&evaluated));
    assert_eq!(fs::read(eval_out.join(METRICS_CSV)).unwrap(), fs::read(run_a.join(METRICS_CSV)).unwrap());

    let runs_root = dir.path().join("runs");
    let ids: Vec<String> =
        [&run_a, &run_b].iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    let compared =
        bin().env("RETINO_BENCH_RUNS_DIR", &runs_root).args(["compare", &ids[0], &ids[1]]).output().unwrap();
    assert!(compared.status.success(), "{}", stderr(&compared));
    let out_dir = stdout_path(&compared);
    assert_eq!(out_dir, runs_root.join("comparison"));
    let merged = fs::read_to_string(out_dir.join(COMPARISON_CSV)).unwrap();
    assert!(merged.starts_with("model,metric,Mild DR,Moderate DR,No DR,Proliferate DR,Severe DR"), "{merged}");
    assert_eq!(merged.lines().count(), 1 + 2 * 8);
    assert!(out_dir.join(BEST_CSV).is_file());

    let unknown = bin().env("RETINO_BENCH_RUNS_DIR", &runs_root).args(["compare", "no-such-run"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn runs_dir_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let cfg = stub_config(dir.path(), &manifest, "");
    let elsewhere = dir.path().join("elsewhere");
    let out = bin()
        .env("RETINO_BENCH_RUNS_DIR", &elsewhere)
        .args(["train", "--config", cfg.to_str().unwrap(), "--epochs", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(run_dirs(&elsewhere).len(), 1);
    assert!(!dir.path().join("runs").exists());
}
