use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use physe_core::config::RunConfig;
use physe_core::train::{read_results_csv, read_train_log, RunReport};

const TINY: &str = r#"{"synth_length": 120, "epochs": 1, "hidden": 4, "heads": 1, "ffn_hidden": 4, "layers": 1, "batch_size": 32}"#;

fn physe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physe-inv"))
        .args(args)
        .current_dir(dir)
        .env_remove("PHYSE_INV_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    fs::write(dir.join("tiny.json"), TINY).unwrap();
    "tiny.json".into()
}

fn report(path: &Path) -> RunReport {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_full_length_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.csv", "b.csv"] {
        let o = physe(dir.path(), &["synth", "--length", "10958", "--seed", "1", "--out", name]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 10959);
}

#[test]
fn synth_refuses_short_series() {
    let dir = tempfile::tempdir().unwrap();
    let o = physe(dir.path(), &["synth", "--length", "5", "--out", "x.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("minimum"));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn train_then_eval_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = physe(dir.path(), &["synth", "--length", "120", "--out", "series.csv"]);
    assert!(o.status.success());
    let o = physe(dir.path(), &["train", "--config", &cfg, "--data", "series.csv", "--out-dir", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["report.json", "results.csv", "train_log.tsv", "checkpoint/manifest.json", "checkpoint/weights.bin"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    for f in ["config.json", "plot_timeseries.csv", "plot_box.json", "plot_histogram.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let r = report(&run.join("report.json"));
    assert_eq!(read_train_log(&run.join("train_log.tsv")).unwrap(), r.epochs);
    assert_eq!(read_results_csv(&run.join("results.csv")).unwrap()[0].outcome, Ok((r.test.mse, r.test.rmse)));
    assert_eq!(RunConfig::load(&run.join("config.json")).unwrap().data.unwrap(), Path::new("series.csv"));

    let o = physe(dir.path(), &["eval", "--checkpoint", "run/checkpoint", "--data", "series.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mse"].as_f64().unwrap(), r.test.mse);
    assert_eq!(v["rmse"].as_f64().unwrap(), r.test.rmse);
    assert_eq!(v["windows"].as_u64().unwrap() as usize, r.test_windows);
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = physe(dir.path(), &["eval", "--checkpoint", "missing"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"epochs": 1, "learnin_rate": 0.1}"#).unwrap();
    let o = physe(dir.path(), &["train", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learnin_rate"));
}

#[test]
fn invalid_config_value_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = physe(dir.path(), &["train", "--config", &cfg, "--split", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("split"));
}

#[test]
fn flag_beats_file_beats_env_beats_default() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, file: Option<&str>, flag: Option<&str>, out: &str| {
        let mut cfg: serde_json::Value = serde_json::from_str(TINY).unwrap();
        cfg["epochs"] = 0.into();
        if let Some(seed) = file {
            cfg["seed"] = seed.parse::<u64>().unwrap().into();
        }
        fs::write(dir.path().join("layered.json"), cfg.to_string()).unwrap();
        let mut args = vec!["train", "--config", "layered.json", "--out-dir", out];
        if let Some(seed) = flag {
            args.extend(["--seed", seed]);
        }
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_physe-inv"));
        cmd.args(&args).current_dir(dir.path()).env_remove("PHYSE_INV_SEED");
        if let Some(seed) = env {
            cmd.env("PHYSE_INV_SEED", seed);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        report(&dir.path().join(out).join("report.json")).seed
    };
    assert_eq!(run(None, None, None, "d"), RunConfig::default().seed);
    assert_eq!(run(Some("21"), None, None, "e"), 21);
    assert_eq!(run(Some("21"), Some("22"), None, "f"), 22);
    assert_eq!(run(Some("21"), Some("22"), Some("23"), "g"), 23);

    let o = Command::new(env!("CARGO_BIN_EXE_physe-inv"))
        .args(["train", "--config", "layered.json"])
        .current_dir(dir.path())
        .env("PHYSE_INV_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn same_flags_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for out in ["a", "b"] {
        let o = physe(dir.path(), &["train", "--config", &cfg, "--out-dir", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = report(&dir.path().join("a/report.json"));
    assert!(a.same_results(&report(&dir.path().join("b/report.json"))));
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/results.csv"), read("b/results.csv"));
    assert_eq!(read("a/checkpoint/weights.bin"), read("b/checkpoint/weights.bin"));
    assert_eq!(read("a/plot_timeseries.csv"), read("b/plot_timeseries.csv"));
}

#[test]
fn ablation_grid_has_sixty_rows_for_one_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = physe(
        dir.path(),
        &["ablate", "--config", &cfg, "--splits", "0.8,0.6,0.5", "--scl", "both", "--pe", "both", "--seeds", "5", "--out-dir", "ab"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_results_csv(&dir.path().join("ab/results.csv")).unwrap();
    assert_eq!(rows.len(), 60);
    assert!(rows.iter().all(|r| r.outcome.is_ok()));
    let summary = fs::read_to_string(dir.path().join("ab/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 12);
}

#[test]
fn gradcheck_default_run_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = physe(dir.path(), &["gradcheck"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    let listed = stdout(&physe(dir.path(), &["gradcheck", "--list"]));
    assert_eq!(text.lines().count(), listed.lines().count());
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
    assert!(listed.lines().any(|l| l == "composite"));
}

#[test]
fn gradcheck_impossible_tolerance_fails_and_names_the_op() {
    let dir = tempfile::tempdir().unwrap();
    let o = physe(dir.path(), &["gradcheck", "--op", "sigmoid", "--tolerance", "1e-12"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).starts_with("FAIL sigmoid"));
    assert!(stderr(&o).contains("sigmoid"));
}

#[test]
fn gradcheck_single_op_filter() {
    let dir = tempfile::tempdir().unwrap();
    let o = physe(dir.path(), &["gradcheck", "--op", "sigmoid"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().collect::<Vec<_>>().len(), 1);
    let o = physe(dir.path(), &["gradcheck", "--op", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn physics_forward_and_proxy() {
    let dir = tempfile::tempdir().unwrap();
    let o = physe(dir.path(), &["physics", "forward", "--hs", "0.3", "--fb", "0.4", "--rhos", "330"]);
    let h: f64 = stdout(&o).trim().parse().unwrap();
    assert!((h - 1.88224).abs() < 1e-5);
    let o = physe(dir.path(), &["physics", "proxy", "--sic", "0", "--albedo", "0"]);
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 0.0);
    let o = physe(dir.path(), &["physics", "residual", "--hs", "0.3", "--fb", "0.4", "--rhos", "330"]);
    let residual: f64 = stdout(&o).lines().nth(1).unwrap().split('\t').nth(2).unwrap().parse().unwrap();
    assert!(residual.abs() < 1e-9);
}

#[test]
fn physics_nonunique_lists_several_columns() {
    let dir = tempfile::tempdir().unwrap();
    let o = physe(dir.path(), &["physics", "nonunique", "--target", "1.88224"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut rows = text.lines();
    assert_eq!(rows.next(), Some("h_s,f_b"));
    let pairs: Vec<(f64, f64)> = rows
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert!(pairs.len() >= 2);
    for (hs, fb) in pairs {
        let h = (hs * (1024.0 - 330.0) - 1024.0 * fb) / (917.0 - 1024.0);
        assert!((h - 1.88224).abs() < 1e-5);
    }
    let o = physe(dir.path(), &["physics", "nonunique", "--target", "1.88224", "--out-dir", "pl"]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("pl/nonunique.csv")).unwrap(), text);
}

#[test]
fn physics_singular_constants_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = physe(dir.path(), &["physics", "--rho-w", "917", "forward", "--hs", "0.3", "--fb", "0.4", "--rhos", "330"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("singular"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(physe(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(physe(dir.path(), &["train", "--pe", "maybe"]).status.code(), Some(1));
    assert!(physe(dir.path(), &["--help"]).status.success());
}
