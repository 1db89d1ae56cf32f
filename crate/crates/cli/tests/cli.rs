use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn qlqg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qlqg"))
        .args(args)
        .current_dir(dir)
        .env_remove("QLQG_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_scenario(dir: &Path, name: &str, doc: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(doc).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Data rows of a CSV written by the tool, header skipped.
fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

fn free_particle(t1: f64, dt: f64) -> Value {
    json!({
        "preset": { "free_particle": { "mass": 1.0, "hbar": 1.0 } },
        "cost": { "F": [[1.0, 0.0], [0.0, 0.0]], "Omega_T": [[1.0, 0.0], [0.0, 1.0]] },
        "grid": { "t1": t1, "dt": dt },
        "initial": { "mean": [1.0, 0.0], "cov": [[0.5, 0.0], [0.0, 0.5]] },
        "sim": { "n_traj": 200, "seed": 11, "record_stride": 500, "write_trajectories": 2 }
    })
}

fn run(dir: &TempDir, cmd: &str, scenario: &Path, extra: &[&str]) -> Output {
    let s = scenario.to_str().unwrap();
    let mut args = vec![cmd, "--scenario", s];
    args.extend_from_slice(extra);
    qlqg(&args, dir.path())
}

#[test]
fn build_prints_free_particle_matrices() {
    let dir = TempDir::new().unwrap();
    let s = write_scenario(dir.path(), "s.json", &free_particle(5.0, 1e-3));
    let out = run(&dir, "build", &s, &["--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["A"], json!([[0.0, 1.0], [0.0, 0.0]]));
    assert_eq!(doc["B"], json!([[0.0], [1.0]]));
    assert_eq!(doc["C"], json!([[2.0, 0.0]]));
    assert_eq!(doc["N"], json!([[0.0, 0.0], [0.0, 1.0]]));
    assert_eq!(doc["M"], json!([[0.0], [0.0]]));
    assert_eq!(read_json(&dir.path().join("o/coefficients.json")), doc);
}

#[test]
fn malformed_inputs_exit_2_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let model = |extra: (&str, Value)| {
        let mut m = json!({
            "m": 2, "d": 1, "J": [[0, 1], [-1, 0]], "R": [[0, 0], [0, 1]],
            "Lambda_re": [[1, 0]], "K_re": [[-0.5], [0]]
        });
        m[extra.0] = extra.1;
        json!({ "model": m })
    };
    let cases = [
        (model(("R", json!("oops"))), "`R`"),
        (model(("Lambda_re", json!([[1, 0, 0]]))), "Lambda_re"),
        (model(("Lambdax", json!(1))), "`Lambdax`"),
        (json!({ "preset": { "free_particle": {} }, "grid": { "t1": 1 }, "colour": 1 }), "`colour`"),
    ];
    for (i, (doc, key)) in cases.iter().enumerate() {
        let s = write_scenario(dir.path(), &format!("bad{i}.json"), doc);
        let out = run(&dir, "build", &s, &[]);
        assert_eq!(code(&out), 2, "case {i}");
        assert!(stderr(&out).contains(key), "case {i}: {}", stderr(&out));
    }
    std::fs::write(dir.path().join("broken.json"), "{ \"model\": ").unwrap();
    assert_eq!(code(&run(&dir, "build", &dir.path().join("broken.json"), &[])), 2);
    assert_eq!(code(&run(&dir, "build", &dir.path().join("missing.json"), &[])), 2);
    let s = write_scenario(dir.path(), "path.json", &json!({ "model_path": "nowhere.json" }));
    let out = run(&dir, "build", &s, &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("does not exist"));
}

#[test]
fn complex_drift_is_rejected_as_non_real() {
    let dir = TempDir::new().unwrap();
    let doc = json!({ "model": {
        "m": 2, "d": 1, "J": [[0, 1], [-1, 0]], "R": [[0, 0], [0, 1]], "R_im": [[0.5, 0], [0, 0]],
        "Lambda_re": [[1, 0]], "K_re": [[-0.5], [0]]
    }});
    let out = run(&dir, "build", &write_scenario(dir.path(), "s.json", &doc), &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("coefficient A has imaginary residue"), "{}", stderr(&out));
}

#[test]
fn model_file_matches_preset() {
    let dir = TempDir::new().unwrap();
    let model = json!({
        "m": 2, "d": 1, "hbar": 1.0, "J": [[0, 1], [-1, 0]], "R": [[0, 0], [0, 1]],
        "Lambda_re": [[1, 0]], "Lambda_im": [[0, 0]], "K_re": [[-0.5], [0]], "K_im": [[0], [0]]
    });
    write_scenario(dir.path(), "model.json", &model);
    let from_file = run(&dir, "build", &write_scenario(dir.path(), "a.json", &json!({ "model_path": "model.json" })), &[]);
    let preset = run(&dir, "build", &write_scenario(dir.path(), "b.json", &free_particle(1.0, 0.1)), &[]);
    assert_eq!(code(&from_file), 0, "{}", stderr(&from_file));
    assert_eq!(from_file.stdout, preset.stdout);
}

#[test]
fn filter_reaches_stationary_dispersions() {
    let dir = TempDir::new().unwrap();
    let mut doc = free_particle(20.0, 1e-3);
    doc["initial"]["cov"] = json!([[2.0, 0.0], [0.0, 2.0]]);
    let s = write_scenario(dir.path(), "s.json", &doc);
    let out = run(&dir, "riccati", &s, &["--direction", "filter", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = read_csv(&dir.path().join("o/sigma.csv"));
    let last = rows.last().unwrap();
    assert_eq!(last[0], 20.0);
    for (got, want) in last[1..].iter().zip([0.5, 0.5, 0.5, 1.0]) {
        assert!((got - want).abs() < 1e-6, "{last:?}");
    }
    assert!(!dir.path().join("o/omega.csv").exists());
}

#[test]
fn trivial_control_problem_has_constant_path() {
    let dir = TempDir::new().unwrap();
    let doc = json!({
        "model": { "m": 2, "d": 1, "J": [[0, 1], [-1, 0]], "R": [[0, 0], [0, 0]],
                   "Lambda_re": [[1, 0]], "K_re": [[0], [0]] },
        "cost": { "F": [[0, 0], [0, 0]], "G": [[0, 0]], "Omega_T": [[2, 0.3], [0.3, 1]] },
        "grid": { "t1": 2.0, "n_steps": 200 }
    });
    let out = run(&dir, "riccati", &write_scenario(dir.path(), "s.json", &doc), &["--direction", "control", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = read_csv(&dir.path().join("o/omega.csv"));
    assert_eq!(rows.len(), 201);
    for r in &rows {
        assert_eq!(&r[1..], &[2.0, 0.3, 0.3, 1.0]);
    }
}

#[test]
fn dual_control_output_is_reversed_filter_output() {
    let dir = TempDir::new().unwrap();
    let mut doc = free_particle(3.0, 1e-3);
    doc["initial"]["cov"] = json!([[1.0, 0.2], [0.2, 0.8]]);
    let s = write_scenario(dir.path(), "s.json", &doc);
    let out = run(&dir, "riccati", &s, &["--dual", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let sigma = read_csv(&dir.path().join("o/sigma.csv"));
    let omega = read_csv(&dir.path().join("o/omega.csv"));
    assert_eq!(sigma.len(), omega.len());
    let n = sigma.len() - 1;
    for k in 0..=n {
        for j in 1..5 {
            assert!((omega[n - k][j] - sigma[k][j]).abs() <= 1e-8, "k={k}");
        }
    }
    assert!(read_json(&dir.path().join("o/riccati.json"))["dual_max_deviation"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn riccati_blowup_exits_3() {
    let dir = TempDir::new().unwrap();
    // Hyperbolic drift with no output: Σ grows like e^{2t}.
    let doc = json!({
        "model": { "m": 2, "d": 1, "J": [[0, 1], [-1, 0]], "R": [[0, 1], [1, 0]],
                   "Lambda_re": [[0, 0]], "K_re": [[0], [0]] },
        "grid": { "t1": 20.0, "dt": 1e-2 },
        "initial": { "mean": [0, 0], "cov": [[1, 0], [0, 1]] }
    });
    let out = run(&dir, "riccati", &write_scenario(dir.path(), "s.json", &doc), &["--direction", "filter"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
}

#[test]
fn simulate_is_byte_deterministic() {
    let dir = TempDir::new().unwrap();
    let s = write_scenario(dir.path(), "s.json", &free_particle(5.0, 1e-3));
    let a = run(&dir, "simulate", &s, &["--out", "a"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = Command::new(env!("CARGO_BIN_EXE_qlqg"))
        .args(["simulate", "--scenario", s.to_str().unwrap(), "--out", "b"])
        .current_dir(dir.path())
        .env("QLQG_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&b), 0);
    assert_eq!(a.stdout, b.stdout);
    for f in ["summary.json", "trajectory_00000.csv", "trajectory_00001.csv"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert!(!dir.path().join("a/trajectory_00002.csv").exists());
    let summary = read_json(&dir.path().join("a/summary.json"));
    for key in ["mean_cost", "stderr", "n_traj", "seed", "analytic_cost", "z_score"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    assert_eq!(summary["seed"], 11);

    let c = run(&dir, "simulate", &s, &["--out", "c", "--seed", "12"]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn simulated_cost_agrees_with_total_cost() {
    let dir = TempDir::new().unwrap();
    let s = write_scenario(dir.path(), "s.json", &free_particle(5.0, 1e-3));
    let out = run(&dir, "simulate", &s, &["--n-traj", "10000", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = read_json(&dir.path().join("o/summary.json"));
    assert_eq!(summary["n_traj"], 10000);
    assert!(summary["z_score"].as_f64().unwrap().abs() <= 3.0, "{summary}");
}

#[test]
fn zero_trajectories_exit_2() {
    let dir = TempDir::new().unwrap();
    let s = write_scenario(dir.path(), "s.json", &free_particle(1.0, 1e-2));
    let out = run(&dir, "simulate", &s, &["--n-traj", "0"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("n_traj"));
}

#[test]
fn bad_thread_cap_exits_2() {
    let dir = TempDir::new().unwrap();
    for value in ["0", "many"] {
        let out = Command::new(env!("CARGO_BIN_EXE_qlqg"))
            .args(["validate", "--out", "o"])
            .current_dir(dir.path())
            .env("QLQG_THREADS", value)
            .output()
            .unwrap();
        assert_eq!(code(&out), 2, "{value}");
    }
}

fn qubit(scheme: &str, dt: f64) -> Value {
    json!({
        "finite_model": {
            "dim": 2,
            "H0": { "re": [[0, 0], [0, 0]] },
            "L_list": [{ "re": [[1, 0], [0, -1]] }]
        },
        "grid": { "t1": 1.0, "dt": dt },
        "sim": { "seed": 5 },
        "sme": {
            "psi0": { "re": [1, 1] },
            "scheme": scheme,
            "n_traj": 400,
            "record_stride": 10,
            "write_trajectories": 1,
            "observables": { "sx": { "re": [[0, 1], [1, 0]] } }
        }
    })
}

#[test]
fn sme_ensemble_tracks_master_flow() {
    let dir = TempDir::new().unwrap();
    let s = write_scenario(dir.path(), "s.json", &qubit("kraus", 1e-3));
    let out = run(&dir, "sme", &s, &["--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = read_json(&dir.path().join("o/sme_summary.json"));
    assert!(summary["min_eigenvalue"].as_f64().unwrap() >= -1e-8);
    assert!(summary["max_trace_deviation"].as_f64().unwrap() <= 1e-9);
    assert!(summary["trace_distance_to_master"].as_f64().unwrap() < 0.05, "{summary}");
    // ⟨σx⟩ of the master flow is e^{-2}.
    let sx = summary["final_ensemble_expectations"]["sx"].as_f64().unwrap();
    assert!((sx - (-2.0f64).exp()).abs() < 0.05, "{sx}");
    let rows = read_csv(&dir.path().join("o/sme_trajectory_00000.csv"));
    assert_eq!(rows.len(), 101);
    assert!((rows[0][1] - 1.0).abs() < 1e-12);
}

#[test]
fn coarse_euler_sme_exits_3() {
    let dir = TempDir::new().unwrap();
    let mut doc = qubit("euler", 0.5);
    doc["finite_model"]["L_list"] = json!([{ "re": [[3, 0], [0, -3]] }]);
    doc["sme"]["record_stride"] = json!(1);
    let out = run(&dir, "sme", &write_scenario(dir.path(), "s.json", &doc), &["--out", "o"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("positivity"), "{}", stderr(&out));
}

#[test]
fn free_particle_suite_passes() {
    let dir = TempDir::new().unwrap();
    let out = qlqg(&["free-particle", "--n-traj", "2000", "--seed", "3", "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "{}\n{}", String::from_utf8_lossy(&out.stdout), stderr(&out));
    let report = read_json(&dir.path().join("o/free_particle.json"));
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 7);
    assert!(checks.iter().all(|c| c["passed"] == true));
}

#[test]
fn validate_passes_and_flags_injected_fixtures() {
    let dir = TempDir::new().unwrap();
    let clean = qlqg(&["validate", "--out", "clean"], dir.path());
    assert_eq!(code(&clean), 0, "{}", String::from_utf8_lossy(&clean.stdout));
    let stdout = String::from_utf8_lossy(&clean.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 9);

    let again = qlqg(&["validate", "--out", "again"], dir.path());
    assert_eq!(code(&again), 0);
    assert_eq!(
        std::fs::read(dir.path().join("clean/validation.json")).unwrap(),
        std::fs::read(dir.path().join("again/validation.json")).unwrap()
    );

    let gain = qlqg(&["validate", "--inject", "gain-perturbation", "--out", "g"], dir.path());
    assert_eq!(code(&gain), 3);
    let stdout = String::from_utf8_lossy(&gain.stdout);
    let line = stdout.lines().find(|l| l.contains("optimality-probe")).unwrap();
    assert!(line.starts_with("FAIL") && line.contains("cost increase"), "{line}");

    let coarse = qlqg(&["validate", "--inject", "coarse-sme", "--out", "c"], dir.path());
    assert_eq!(code(&coarse), 3);
    let stdout = String::from_utf8_lossy(&coarse.stdout);
    let line = stdout.lines().find(|l| l.contains("sme-positivity")).unwrap();
    assert!(line.starts_with("FAIL") && line.contains("lost positivity"), "{line}");

    assert_eq!(code(&qlqg(&["validate", "--inject", "bogus"], dir.path())), 2);
}
