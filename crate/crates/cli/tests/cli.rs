use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": {"n_train": 128, "n_test": 32},
  "stage1": {"train": {"steps": 12, "eval_every": 6}},
  "stage2": {"train": {"steps": 12, "eval_every": 6}},
  "finetune": {"train": {"steps": 4, "eval_every": 2}},
  "eval": {"sample_items": 4, "trace_items": 2, "random_partitions": 3, "n_baselines": 2, "n_interp": 2}
}"#;

fn hiermoe(args: &[&str], out: &Path, config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiermoe"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    ok(&hiermoe(&["gen-data"], &out, &cfg));
    let data = out.join("data");
    let with_data = |cmd: &[&str]| {
        let mut a: Vec<&str> = cmd.to_vec();
        a.extend(["--data", data.to_str().unwrap()]);
        hiermoe(&a, &out, &cfg)
    };
    for cmd in [
        &["train-stage1"][..],
        &["train-stage2"],
        &["finetune-routers", "--fraction", "0.5"],
        &["sample"],
        &["eval"],
        &["bottleneck"],
        &["attribute", "--items", "1"],
        &["routing-stats"],
    ] {
        ok(&with_data(cmd));
    }
    ok(&hiermoe(&["eval", "--checkpoint", out.join("checkpoints/stage2.json").to_str().unwrap()], &out, &cfg));
    ok(&hiermoe(&["report"], &out, &cfg));
    for f in [
        "data/train_s0.mrbd",
        "data/train_s0.mrbd.json",
        "data/test_s1.mrbd",
        "data/planted_s0.csv",
        "checkpoints/stage1.json",
        "checkpoints/stage1.bin",
        "checkpoints/stage2.json",
        "checkpoints/finetune_f0.5.json",
        "train-stage1/metrics.csv",
        "train-stage1/metrics.json",
        "train-stage1/stage1_loss.csv",
        "train-stage2/time_preference.csv",
        "finetune-routers/finetune_curve.csv",
        "sample/samples.csv",
        "sample/routing_trace.csv",
        "bottleneck/bottleneck.csv",
        "attribute/attribution.csv",
        "routing-stats/utilization.csv",
        "routing-stats/routing_trace.csv",
        "report/summary.csv",
        "report/report.md",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let bottleneck = fs::read_to_string(out.join("bottleneck/bottleneck.csv")).unwrap();
    assert_eq!(bottleneck.lines().count(), 1 + 6 + 1);
    assert!(bottleneck.lines().last().unwrap().starts_with("random,"));
    let eval = fs::read_to_string(out.join("eval/metrics.json")).unwrap();
    for key in ["cosine_img", "ridge_cosine_img", "rand_index", "sample_mse_unconditional"] {
        assert!(eval.contains(key), "eval metrics lack {key}");
    }
}

#[test]
fn same_seed_replays_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), TINY);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&hiermoe(&["train-stage1", "--seed", "7"], &a, &cfg));
    ok(&hiermoe(&["train-stage1", "--seed", "7"], &b, &cfg));
    ok(&hiermoe(&["train-stage1", "--seed", "8"], &c, &cfg));
    for f in ["train-stage1/metrics.json", "train-stage1/metrics.csv", "checkpoints/stage1.json", "checkpoints/stage1.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(
        fs::read(a.join("checkpoints/stage1.bin")).unwrap(),
        fs::read(c.join("checkpoints/stage1.bin")).unwrap()
    );
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let bad = config(tmp.path(), r#"{"data": {"world": {"groups": 5}}}"#);
    assert_eq!(hiermoe(&["train-stage1"], &out, &bad).status.code(), Some(2));
    let broken = config(tmp.path(), "{ not json");
    assert_eq!(hiermoe(&["gen-data"], &out, &broken).status.code(), Some(2));
    let missing = tmp.path().join("nope.json");
    assert_eq!(hiermoe(&["eval"], &out, &missing).status.code(), Some(2));
    let ok_cfg = config(tmp.path(), TINY);
    assert_eq!(hiermoe(&["finetune-routers", "--fraction", "1.5"], &out, &ok_cfg).status.code(), Some(2));
}

#[test]
fn divergence_exits_3_with_diagnostic_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        r#"{"data": {"n_train": 64, "n_test": 16}, "stage1": {"train": {"steps": 20, "adam": {"lr": 1e300}}}}"#,
    );
    let out = tmp.path().join("run");
    let o = hiermoe(&["train-stage1"], &out, &cfg);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoints/stage1_diverged.json").is_file());
    assert!(!out.join("checkpoints/stage1.json").exists());
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), TINY);
    let o = hiermoe(&["bottleneck"], &tmp.path().join("empty"), &cfg);
    assert_eq!(o.status.code(), Some(1));
}
