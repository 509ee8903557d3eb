#![allow(clippy::needless_range_loop)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rockstune"));
    c.env("RUST_LOG", "error");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tune(config: &Path, strategy: &str, budget: &str, repeats: &str, out: &Path) -> Output {
    run(&[
        "tune",
        "--config",
        config.to_str().unwrap(),
        "--strategy",
        strategy,
        "--budget",
        budget,
        "--repeats",
        repeats,
        "--out",
        out.to_str().unwrap(),
    ])
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn tune_writes_one_log_per_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let out = tune(&configs().join("synthetic.json"), "clustered-mt", "4", "5", dir.path());
    ok(&out);
    for seed in 0..5 {
        let log = dir.path().join("clustered-mt").join(format!("run-{seed}.jsonl"));
        let l = lines(&log);
        assert_eq!(l.len(), 5, "{}", log.display());
        assert_eq!(l[0]["tuner"]["seed"], seed);
        assert!(l[0]["baseline"]["values"]["iops"].is_number());
        assert_eq!(
            l[0]["baseline"],
            lines(&dir.path().join("clustered-mt/run-0.jsonl"))[0]["baseline"]
        );
    }
    // refuses to clobber existing logs
    let again = tune(&configs().join("synthetic.json"), "clustered-mt", "4", "5", dir.path());
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--resume"));
}

#[test]
fn resume_completes_a_truncated_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("synthetic.json");
    ok(&tune(&cfg, "gp", "6", "1", dir.path()));
    let log = dir.path().join("gp/run-0.jsonl");
    let full = fs::read_to_string(&log).unwrap();
    let cut: usize = full.split_inclusive('\n').take(4).map(str::len).sum();
    fs::write(&log, &full[..cut + 10]).unwrap();
    let resume = |budget: &str| {
        run(&[
            "tune",
            "--config",
            cfg.to_str().unwrap(),
            "--strategy",
            "gp",
            "--budget",
            budget,
            "--repeats",
            "1",
            "--out",
            dir.path().to_str().unwrap(),
            "--resume",
        ])
    };
    ok(&resume("6"));
    assert_eq!(fs::read_to_string(&log).unwrap(), full);
    // a different budget is a different tuner
    let out = resume("8");
    assert!(!out.status.success());
    assert!(stderr(&out).contains("differs"));
}

#[test]
fn clustered_strategy_requires_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(configs().join("synthetic.json")).unwrap()).unwrap();
    cfg.as_object_mut().unwrap().remove("clusters");
    cfg.as_object_mut().unwrap().remove("synthetic");
    let path = dir.path().join("noclusters.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = tune(&path, "clustered-mt", "3", "1", &dir.path().join("runs"));
    assert!(!out.status.success());
    assert!(stderr(&out).contains("clusters"), "{}", stderr(&out));
    assert!(!dir.path().join("runs/clustered-mt/run-0.jsonl").exists());
}

#[test]
fn malformed_config_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\n  \"space\": \"rocksdb\",\n  \"tasks\": [,]\n}\n").unwrap();
    let out = tune(&path, "gp", "3", "1", dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    fs::write(&path, r#"{"space": "rocksdb", "budgett": 3}"#).unwrap();
    let out = tune(&path, "gp", "3", "1", dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("budgett"), "{}", stderr(&out));

    let out = tune(&dir.path().join("missing.json"), "gp", "3", "1", dir.path());
    assert!(!out.status.success());
}

#[test]
fn report_is_deterministic_and_matches_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("synthetic.json");
    ok(&tune(&cfg, "random", "6", "3", dir.path()));
    ok(&tune(&cfg, "gp", "6", "3", dir.path()));
    let outdir = dir.path().to_str().unwrap();
    ok(&run(&["report", "--out", outdir]));
    let csv1 = fs::read(dir.path().join("convergence.csv")).unwrap();
    let sum1 = fs::read(dir.path().join("summary.json")).unwrap();
    ok(&run(&["report", "--out", outdir]));
    assert_eq!(fs::read(dir.path().join("convergence.csv")).unwrap(), csv1);
    assert_eq!(fs::read(dir.path().join("summary.json")).unwrap(), sum1);

    let csv = String::from_utf8(csv1).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "strategy,step,median,min,max");
    assert_eq!(csv.lines().count(), 1 + 2 * 6);

    let summary: Value = serde_json::from_slice(&sum1).unwrap();
    assert_eq!(summary["primary"], "iops");
    for strategy in ["random", "gp"] {
        let runs = summary["strategies"][strategy]["runs"].as_array().unwrap();
        assert_eq!(runs.len(), 3);
        for (seed, r) in runs.iter().enumerate() {
            let l = lines(&dir.path().join(strategy).join(format!("run-{seed}.jsonl")));
            let default = l[0]["baseline"]["values"]["iops"].as_f64().unwrap();
            let best = l[1..]
                .iter()
                .filter(|r| r["status"] == "ok")
                .map(|r| r["values"]["iops"].as_f64().unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(r["best_value"].as_f64().unwrap(), best);
            assert!((r["improvement_ratio"].as_f64().unwrap() - best / default).abs() <= 1e-12 * (best / default));
        }
    }
}

#[test]
fn replay_prints_model_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("synthetic.json");
    ok(&tune(&cfg, "clustered-mt", "7", "1", dir.path()));
    let log = dir.path().join("clustered-mt/run-0.jsonl");
    let out = run(&["replay", log.to_str().unwrap(), "--json"]);
    ok(&out);
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    let models = rep["models"].as_array().unwrap();
    assert_eq!(models.len(), 3);
    for m in models {
        let b = m["task_covariance"].as_array().unwrap();
        for i in 0..b.len() {
            assert!(b[i][i].as_f64().unwrap() > 0.0);
            for j in 0..b.len() {
                assert!((b[i][j].as_f64().unwrap() - b[j][i].as_f64().unwrap()).abs() <= 1e-12);
            }
        }
        // the synthetic surrogate is noise free here, so the fit explains each point
        let noise = m["noise_std"].as_f64().unwrap();
        for r in m["residuals"].as_array().unwrap() {
            assert!(r["max_abs"].as_f64().unwrap() <= 3.0 * noise.max(1e-3), "{m}");
        }
    }

    let text = run(&["replay", log.to_str().unwrap()]);
    ok(&text);
    assert!(String::from_utf8_lossy(&text.stdout).contains("lengthscales"));

    let mismatch = run(&["replay", log.to_str().unwrap(), "--strategy", "gp"]);
    assert!(!mismatch.status.success());
    assert!(stderr(&mismatch).contains("clustered-mt"));
}

#[test]
fn replay_flags_single_observation_fallback() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tune(&configs().join("synthetic.json"), "multitask", "1", "1", dir.path()));
    let out = run(&["replay", dir.path().join("multitask/run-0.jsonl").to_str().unwrap()]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("std = 1"));
}

#[test]
fn replay_rejects_random_logs() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tune(&configs().join("synthetic.json"), "random", "2", "1", dir.path()));
    let out = run(&["replay", dir.path().join("random/run-0.jsonl").to_str().unwrap()]);
    assert!(!out.status.success());
}
