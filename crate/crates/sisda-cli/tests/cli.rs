//! Pipeline-level checks through the actual binary: exit codes, file
//! outputs, override precedence, resume, and rerun reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sisda() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sisda"));
    // Isolate from any ambient overrides.
    for var in ["SISDA_CONFIG", "SISDA_SEED", "SISDA_OUT", "SISDA_METHOD", "SISDA_CHECKPOINT"] {
        cmd.env_remove(var);
    }
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let output = cmd.output().unwrap();
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

/// Small enough to keep the whole pipeline in seconds.
const TINY_CONFIG: &str = r#"
seed = 9

[corpus]
alphabet = 6
shift = 2
min_len = 3
max_len = 6
source_train = 40
source_test = 10
target_adapt = 10
target_test = 10

[corpus.target]
kind = "noise"
p = 0.3
radius = 1

[model]
dim = 16
heads = 2
layers = 1
max_len = 32

[train]
epochs = 2

[adapt]
epochs = 1
beam_size = 3
keep_hypotheses = 2
max_output_len = 8

[eval]
beam_size = 2
max_output_len = 8
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, TINY_CONFIG).unwrap();
    path
}

fn split_files(dir: &Path) -> Vec<std::path::PathBuf> {
    ["source-train", "source-test", "target-adapt", "target-test"]
        .iter()
        .map(|s| dir.join(format!("{s}.tsv")))
        .collect()
}

#[test]
fn generate_is_reproducible_and_counts_match() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");

    let first = run_ok(sisda().args(["generate"]).arg("--config").arg(&config).arg("--out").arg(&out));
    let snapshots: Vec<Vec<u8>> = split_files(&out).iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(fs::read_to_string(out.join("source-train.tsv")).unwrap().lines().filter(|l| !l.starts_with('#')).count(), 40);
    assert!(String::from_utf8_lossy(&first.stdout).contains("wrote 10 utterances"));

    run_ok(sisda().args(["generate"]).arg("--config").arg(&config).arg("--out").arg(&out));
    for (path, before) in split_files(&out).iter().zip(&snapshots) {
        assert_eq!(&fs::read(path).unwrap(), before, "{} changed on rerun", path.display());
    }
    assert!(out.join("config-resolved.toml").exists());
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");
    let base = |args: &[&str]| {
        let mut cmd = sisda();
        cmd.args(args).arg("--config").arg(&config).arg("--out").arg(&out);
        cmd
    };

    run_ok(&mut base(&["generate"]));
    run_ok(&mut base(&["train-base"]));
    assert!(out.join("base.ckpt").exists());

    run_ok(base(&["adapt"]).args(["--method", "zero-shot"]));
    let with_anchor = run_ok(base(&["adapt"]).args(["--method", "self-train"]));
    assert!(String::from_utf8_lossy(&with_anchor.stdout).contains("werr"));
    assert!(out.join("adapted-self-train.ckpt").exists());
    assert!(out.join("adapted-self-train.epoch-1.ckpt").exists());

    let trace = fs::read_to_string(out.join("trace-self-train.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 10, "one record per (epoch, utterance)");
    for line in trace.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(record["method"], "self-train");
        assert_eq!(record["epoch"], 1);
        assert!(record["id"].as_str().unwrap().starts_with("target-adapt-"));
    }

    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "two records per adapt run");
    assert!(!metrics.contains("wall_clock"), "timing leaked into metrics");

    run_ok(&mut base(&["analyze"]));
    let analysis = fs::read_to_string(out.join("analysis.csv")).unwrap();
    assert_eq!(analysis.lines().count(), 1 + 10 + 1, "header, rows, pooled ALL");
    assert!(analysis.lines().last().unwrap().starts_with("ALL,"));

    let report = run_ok(&mut base(&["report"]));
    let table = String::from_utf8_lossy(&report.stdout);
    assert!(table.contains("zero-shot") && table.contains("self-train"));
    assert!(out.join("report.txt").exists() && out.join("report.csv").exists());
}

#[test]
fn metrics_files_are_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = |out: &Path| {
        for args in [
            vec!["generate"],
            vec!["train-base"],
            vec!["adapt", "--method", "zero-shot"],
            vec!["adapt", "--method", "self-train"],
        ] {
            run_ok(sisda().args(&args).arg("--config").arg(&config).arg("--out").arg(out));
        }
        fs::read(out.join("metrics.jsonl")).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b);
}

#[test]
fn seed_precedence_is_flag_env_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let resolved_seed = |out: &Path| -> String {
        let resolved = fs::read_to_string(out.join("config-resolved.toml")).unwrap();
        resolved
            .lines()
            .find(|l| l.starts_with("seed"))
            .unwrap()
            .to_string()
    };

    let from_file = dir.path().join("file");
    run_ok(sisda().args(["generate"]).arg("--config").arg(&config).arg("--out").arg(&from_file));
    assert_eq!(resolved_seed(&from_file), "seed = 9");

    let from_env = dir.path().join("env");
    run_ok(
        sisda()
            .args(["generate"])
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&from_env)
            .env("SISDA_SEED", "33"),
    );
    assert_eq!(resolved_seed(&from_env), "seed = 33");

    let from_flag = dir.path().join("flag");
    run_ok(
        sisda()
            .args(["generate", "--seed", "77"])
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&from_flag)
            .env("SISDA_SEED", "33"),
    );
    assert_eq!(resolved_seed(&from_flag), "seed = 77");
}

#[test]
fn zero_epoch_training_checkpoints_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.toml");
    fs::write(&config_path, TINY_CONFIG.replace("epochs = 2", "epochs = 0")).unwrap();
    let out = dir.path().join("run");
    run_ok(sisda().args(["generate"]).arg("--config").arg(&config_path).arg("--out").arg(&out));
    run_ok(sisda().args(["train-base"]).arg("--config").arg(&config_path).arg("--out").arg(&out));

    let checkpoint = sisda::adapt::Checkpoint::load(&out.join("base.ckpt")).unwrap();
    assert_eq!(checkpoint.epochs_done, 0);
    let expected = sisda::model::init_params(
        &sisda::model::ModelConfig {
            vocab_size: 6 + 5,
            dim: 16,
            heads: 2,
            layers: 1,
            max_len: 32,
        },
        sisda::seed::derive(9, "model/init"),
    )
    .unwrap();
    assert_eq!(checkpoint.params, expected);
}

#[test]
fn interrupted_training_resumes_to_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let one_epoch = dir.path().join("one.toml");
    let two_epochs = dir.path().join("two.toml");
    fs::write(&one_epoch, TINY_CONFIG.replace("epochs = 2", "epochs = 1")).unwrap();
    fs::write(&two_epochs, TINY_CONFIG).unwrap();

    let straight = dir.path().join("straight");
    run_ok(sisda().args(["generate"]).arg("--config").arg(&two_epochs).arg("--out").arg(&straight));
    run_ok(sisda().args(["train-base"]).arg("--config").arg(&two_epochs).arg("--out").arg(&straight));

    let resumed = dir.path().join("resumed");
    run_ok(sisda().args(["generate"]).arg("--config").arg(&one_epoch).arg("--out").arg(&resumed));
    run_ok(sisda().args(["train-base"]).arg("--config").arg(&one_epoch).arg("--out").arg(&resumed));
    let output = run_ok(sisda().args(["train-base"]).arg("--config").arg(&two_epochs).arg("--out").arg(&resumed));
    assert!(String::from_utf8_lossy(&output.stdout).contains("resuming"));

    assert_eq!(
        fs::read(straight.join("base.ckpt")).unwrap(),
        fs::read(resumed.join("base.ckpt")).unwrap()
    );
}

#[test]
fn failures_exit_nonzero_with_one_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let missing = dir.path().join("nothing-here");

    let cases: Vec<Vec<&str>> = vec![
        vec!["report"],
        vec!["adapt"],
        vec!["train-base"],
        vec!["analyze"],
    ];
    for args in cases {
        let output = sisda()
            .args(&args)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&missing)
            .output()
            .unwrap();
        assert!(!output.status.success(), "{args:?} should fail on an empty dir");
        let stderr = String::from_utf8_lossy(&output.stderr);
        assert_eq!(stderr.lines().count(), 1, "{args:?} stderr: {stderr}");
        assert!(stderr.starts_with("error: "), "{args:?} stderr: {stderr}");
    }

    let out = dir.path().join("run");
    run_ok(sisda().args(["generate"]).arg("--config").arg(&config).arg("--out").arg(&out));
    run_ok(sisda().args(["train-base"]).arg("--config").arg(&config).arg("--out").arg(&out));
    let output = sisda()
        .args(["adapt", "--method", "oracle"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("zero-shot") && stderr.contains("si-sda"), "{stderr}");
}

#[test]
fn unknown_config_keys_are_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    fs::write(&config, "sed = 9\n").unwrap();
    let out = dir.path().join("run");
    let output = sisda()
        .args(["generate"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("sed"));
    assert!(!out.exists(), "failed run created the output dir");
}
