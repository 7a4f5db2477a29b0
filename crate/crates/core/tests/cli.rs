#![cfg(feature = "cli")]

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vip"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn counts(plan: &Value) -> Vec<u64> {
    plan["allocations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["n_int"].as_u64().unwrap())
        .collect()
}

#[test]
fn allocate_and_check_the_worked_instance() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write(
        dir.path(),
        "problem.json",
        r#"{"family":"rloo","budget":9,"min":3,"max":8,"prompts":[{"id":"a","a":1.0},{"id":"b","a":4.0}]}"#,
    );
    let plan_path = dir.path().join("plan.json");
    let out = vip(&[
        "allocate",
        "--problem",
        &problem,
        "-o",
        plan_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let plan: Value = serde_json::from_slice(&std::fs::read(&plan_path).unwrap()).unwrap();
    assert_eq!(counts(&plan), [3, 6]);
    assert!((plan["lambda_star"].as_f64().unwrap() - 9.0 / 49.0).abs() <= 1e-8);

    let report = stdout_json(&vip(&[
        "check",
        "--problem",
        &problem,
        "--plan",
        plan_path.to_str().unwrap(),
    ]));
    assert_eq!(report["ok"], true);

    // flags override the file: budget 5 is below B·L
    let out = vip(&["allocate", "--problem", &problem, "--budget", "5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("B·L"));
}

#[test]
fn equal_coefficients_split_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let coeffs = write(
        dir.path(),
        "c.jsonl",
        "{\"id\":\"x\",\"p_hat\":0.5}\n{\"id\":\"y\",\"a\":1.0}\n{\"id\":\"z\",\"p_hat\":0.5}\n",
    );
    let plan = stdout_json(&vip(&[
        "allocate",
        "--coefficients",
        &coeffs,
        "--family",
        "drgrpo",
        "--budget",
        "24",
        "--min",
        "3",
        "--max",
        "16",
    ]));
    assert_eq!(counts(&plan), [8, 8, 8]);
    let out = vip(&["allocate", "--coefficients", &coeffs, "--budget", "24"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(vip(&["allocate"]).status.code(), Some(2));
    assert_eq!(vip(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(
        vip(&["allocate", "--problem", "/nonexistent/problem.json"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn mc_validate_is_deterministic() {
    let args = [
        "mc-validate",
        "--family",
        "rloo",
        "--p",
        "0.3,1",
        "--n",
        "4",
        "--z-mean",
        "1",
        "--trials",
        "20000",
        "--seed",
        "7",
    ];
    let a = vip(&args);
    let b = vip(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "family,rewards,n,p,z_mean,closed_form,monte_carlo,rel_error"
    );
    // p = 1 has no reward variance, so both columns are exactly zero
    assert!(
        lines[2].starts_with("rloo,binary,4,1,1,0e0,0e0,"),
        "{}",
        lines[2]
    );

    assert_eq!(
        vip(&["mc-validate", "--trials", "100"]).status.code(),
        Some(2)
    );
}

#[test]
fn assumption_tests_from_a_sample_file() {
    let dir = tempfile::tempdir().unwrap();
    let one = write(
        dir.path(),
        "one.jsonl",
        "{\"id\":\"g\",\"r\":[1,2,3,4,5,6],\"z\":[0.3,0.1,0.8,0.4,0.9,1.3]}\n",
    );
    let report_path = dir.path().join("r.json");
    let out = vip(&[
        "test",
        "--samples",
        &one,
        "--test",
        "fisher",
        "-o",
        report_path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("p_global"));
    let reports: Value = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    let p_global = reports[0]["p_global"].as_f64().unwrap();
    let p_group = reports[0]["per_group"][0]["value"].as_f64().unwrap();
    assert!((p_global - p_group).abs() <= 1e-9);

    let same = write(
        dir.path(),
        "same.jsonl",
        "{\"id\":\"a\",\"z\":[1,2,4,7]}\n{\"id\":\"b\",\"z\":[1,2,4,7]}\n{\"id\":\"c\",\"z\":[1,2,4,7]}\n",
    );
    let out = vip(&[
        "test",
        "--samples",
        &same,
        "--test",
        "levene",
        "obrien",
        "-o",
        report_path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let reports: Value = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert!((reports[0]["p_global"].as_f64().unwrap() - 1.0).abs() <= 1e-12);
}

#[test]
fn kernel_predict_update_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let emb = write(
        dir.path(),
        "emb.jsonl",
        "{\"id\":\"a\",\"embedding\":[0,0]}\n{\"id\":\"b\",\"embedding\":[1,0]}\n{\"id\":\"c\",\"embedding\":[0,3]}\n",
    );
    let cache = dir.path().join("k.vipk");
    let out = vip(&[
        "kernel",
        "--embeddings",
        &emb,
        "-o",
        cache.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let hash = String::from_utf8(out.stdout).unwrap().trim().to_string();
    assert_eq!(hash.len(), 64);

    let rewards = write(
        dir.path(),
        "rewards.jsonl",
        "{\"step\":0,\"id\":\"a\",\"rewards\":[1,1,1,-1]}\n{\"step\":1,\"id\":\"c\",\"rewards\":[-1,-1]}\n",
    );
    let belief = dir.path().join("belief.json");
    let out = vip(&[
        "update",
        "--kernel-cache",
        cache.to_str().unwrap(),
        "--embeddings",
        &emb,
        "--rewards",
        &rewards,
        "-o",
        belief.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let snap: Value = serde_json::from_slice(&std::fs::read(&belief).unwrap()).unwrap();
    assert_eq!(snap["iteration"], 2);
    assert_eq!(snap["kernel_ref"], hash.as_str());

    let out = vip(&[
        "predict",
        "--kernel-cache",
        cache.to_str().unwrap(),
        "--belief",
        belief.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let preds: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(preds.len(), 3);
    // median bandwidth is 3, so k(a, c) = e^(-1/2); the second batch pulls a towards c's clipped rate
    let k_ac = (-0.5f64).exp();
    let jitter = 1.0 + vip_core::belief::DEFAULT_JITTER;
    let m_c = k_ac * 3f64.ln() / jitter;
    let m_a = 3f64.ln() + k_ac * (-(99f64.ln()) - m_c) / jitter;
    assert!((preds[0]["p_hat"].as_f64().unwrap() - vip_core::belief::sigmoid(m_a)).abs() <= 1e-9);
    assert!((preds[2]["p_hat"].as_f64().unwrap() - 0.01).abs() <= 1e-9);

    // a belief built on one kernel does not load on another
    let other = dir.path().join("other.vipk");
    assert!(vip(&[
        "kernel",
        "--embeddings",
        &emb,
        "--bandwidth",
        "0.5",
        "-o",
        other.to_str().unwrap()
    ])
    .status
    .success());
    let out = vip(&[
        "predict",
        "--kernel-cache",
        other.to_str().unwrap(),
        "--belief",
        belief.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.toml",
        "strategies = [\"vip\", \"uniform\"]\nseeds = [0]\n\n[world]\nprompts = 24\ndim = 4\nclusters = 2\nbumps = 4\n\n[run]\nbudget = 48\nbatch_size = 6\nsteps = 5\n",
    );
    let run = |name: &str| {
        let summary = dir.path().join(name);
        let out = vip(&[
            "simulate",
            "--config",
            &cfg,
            "--seeds",
            "2",
            "--summary",
            summary.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(summary).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "strategy,seed,step,objective,mae,cum_correct"
    );
    // two seeds × two strategies × five steps
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 5);

    let bad = write(
        dir.path(),
        "bad.toml",
        "strategies = [\"vip\"]\nseeds = [0]\ncolour = 3\n",
    );
    let out = vip(&[
        "simulate",
        "--config",
        &bad,
        "--summary",
        dir.path().join("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
