use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn phaselab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phaselab"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn with_config(dir: &Path, name: &str, json: &str, args: &[&str]) -> Output {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    let mut all = args.to_vec();
    all.extend(["--config", path.to_str().unwrap()]);
    phaselab(dir, &all)
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_phantom(dir: &Path) {
    let out = with_config(
        dir,
        "phantom.cfg.json",
        r#"{"dims": [12, 12], "support": {"type": "fixed", "sigma": 0.25}}"#,
        &["phantom", "--seed", "3"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn phantom_writes_files_and_envelope() {
    let dir = TempDir::new().unwrap();
    small_phantom(dir.path());
    for ext in ["truth.grid", "mask.json", "fdat", "json"] {
        assert!(dir.path().join(format!("phantom.{ext}")).exists(), "missing {ext}");
    }
    let r = report(&dir.path().join("phantom.json"));
    assert_eq!(r["tool"], "phaselab");
    assert_eq!(r["command"], "phantom");
    assert_eq!(r["seed"], 3);
    assert_eq!(r["config"]["dims"], serde_json::json!([12, 12]));
    let res = &r["result"];
    let (a, b) = (res["sum_moduli_sq"].as_f64().unwrap(), res["norm_sq"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-9 * b);
    assert_eq!(res["support_size"], 36);
}

#[test]
fn reconstruct_converges_and_reports() {
    let dir = TempDir::new().unwrap();
    small_phantom(dir.path());
    let out = phaselab(dir.path(), &["reconstruct", "--seed", "1"]);
    let r = report(&dir.path().join("reconstruct.json"));
    let res = &r["result"];
    assert_eq!(res["gamma"]["route"], "dense-traces");
    match out.status.code() {
        Some(0) => {
            assert_eq!(res["termination"], "converged");
            assert!(res["alignment"]["relative_distance"].as_f64().unwrap() < 1e-6);
            assert!(dir.path().join("reconstruct.solution.grid").exists());
        }
        Some(2) => assert_eq!(res["termination"], "max_iters"),
        other => panic!("unexpected exit {other:?}"),
    }
    let csv = fs::read_to_string(dir.path().join("reconstruct.iterations.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iteration,error,elapsed_secs"));
    assert_eq!(lines.count() as u64, res["iterations"].as_u64().unwrap());
}

#[test]
fn reconstruct_exit_codes() {
    let dir = TempDir::new().unwrap();
    small_phantom(dir.path());
    let capped = with_config(dir.path(), "c.json", r#"{"max_iters": 2, "gamma": {"mode": "hio"}}"#, &["reconstruct"]);
    assert_eq!(capped.status.code(), Some(2));
    let diverging = with_config(
        dir.path(),
        "d.json",
        r#"{"beta": 1e200, "gamma": {"mode": "explicit", "gamma1": 1e200, "gamma2": 1e200}, "max_iters": 50}"#,
        &["reconstruct"],
    );
    assert_eq!(diverging.status.code(), Some(3));
    assert_eq!(report(&dir.path().join("reconstruct.json"))["result"]["termination"], "diverged");
    assert!(dir.path().join("reconstruct.iterations.csv").exists());
    let typo = with_config(dir.path(), "t.json", r#"{"betta": 1.0}"#, &["reconstruct"]);
    assert_eq!(typo.status.code(), Some(4));
    let zero_beta = with_config(dir.path(), "z.json", r#"{"beta": 0.0}"#, &["reconstruct"]);
    assert_eq!(zero_beta.status.code(), Some(4));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = phaselab(dir.path(), &["gamma-opt", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn infeasible_packing_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = with_config(
        dir.path(),
        "p.json",
        r#"{"dims": [6], "kind": "real", "support": {"type": "atomic", "atom_count": 4, "width": 2}}"#,
        &["phantom"],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn sweep_with_empty_grid_writes_header_only() {
    let dir = TempDir::new().unwrap();
    small_phantom(dir.path());
    let out = with_config(dir.path(), "s.json", r#"{"modes": [], "seeds": [0]}"#, &["sweep"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.trim_end(), "phantom,label,beta,gamma1,gamma2,sigma,seed,iterations,converged,final_error,d_perp_sq");
}

#[test]
fn sweep_rows_do_not_depend_on_thread_count() {
    let dir = TempDir::new().unwrap();
    small_phantom(dir.path());
    let cfg = r#"{"gamma1": [-1.0, -0.8], "gamma2": [1.0], "modes": [{"mode": "optimal"}], "seeds": [0, 1], "max_iters": 300}"#;
    let one = with_config(dir.path(), "s.json", cfg, &["sweep", "--threads", "1"]);
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    let first = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(first.lines().count(), 1 + 3 * 2);
    let two = with_config(dir.path(), "s.json", cfg, &["sweep", "--threads", "2"]);
    assert!(two.status.success());
    let second = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(first, second);
    let r = report(&dir.path().join("sweep.json"));
    assert!(r["result"]["grid_minimizer"]["d_perp_sq"].is_number());
}

#[test]
fn traces_report_matches_closed_forms() {
    let dir = TempDir::new().unwrap();
    small_phantom(dir.path());
    let out = phaselab(dir.path(), &["traces"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir.path().join("traces.json"))["result"].clone();
    let t = &r["traces"];
    assert!((t["t2"].as_f64().unwrap() - 0.5).abs() < 1e-10);
    assert!((t["t12"].as_f64().unwrap() - 0.125).abs() < 1e-10);
    assert_eq!(r["perp_route"], "exact");
    let dim = 288.0;
    let expected_perp = t["t1"].as_f64().unwrap() + t["t2"].as_f64().unwrap() - 1.0 / dim;
    assert!((t["t_perp"].as_f64().unwrap() - expected_perp).abs() < 1e-10);
    assert!((r["explicit_sums"]["t_sfsf"].as_f64().unwrap() - t["t1212"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn gamma_opt_random_matrix_source() {
    let dir = TempDir::new().unwrap();
    let out = with_config(
        dir.path(),
        "g.json",
        r#"{"traces": {"source": "random-matrix", "sigma": 0.2, "t_f": 0.5}, "beta": 1.0}"#,
        &["gamma-opt"],
    );
    assert!(out.status.success());
    let r = report(&dir.path().join("gamma-opt.json"))["result"].clone();
    assert!((r["gamma_opt"]["gamma1"].as_f64().unwrap() + 4.64 / 3.84).abs() < 1e-12);
    assert!((r["gamma_opt"]["gamma2"].as_f64().unwrap() - 4.16 / 3.84).abs() < 1e-12);
    assert!(r["grid_scan_min"]["norm"].as_f64().unwrap() >= r["norm_at_opt"].as_f64().unwrap() - 1e-12);
}

#[test]
fn rmt_check_csv_and_summary() {
    let dir = TempDir::new().unwrap();
    let out = with_config(dir.path(), "r.json", r#"{"sizes": [3], "samples": 4000, "limit_sizes": [64]}"#, &["rmt-check"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("rmt.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16);
    assert!(csv.starts_with("n,rank1,rank2,exact2,mc2,se2,exact4,mc4,se4,z2,z4"));
    let r = report(&dir.path().join("rmt.json"))["result"].clone();
    assert_eq!(r["checks"], 32);
    assert!(r["within_3se"].as_u64().unwrap() >= 28);
}

#[test]
fn ensemble_avg_outputs() {
    let dir = TempDir::new().unwrap();
    let out = with_config(
        dir.path(),
        "e.json",
        r#"{"ensemble": {"type": "atomic", "dims": [16, 16], "atom_count": 8, "width": 1}, "samples": 50, "triplet_pairs": 8}"#,
        &["ensemble-avg", "--seed", "5"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("ensemble.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("sample,t_F,t_SF,t_SFSF"));
    assert_eq!(csv.lines().count(), 51);
    let r = report(&dir.path().join("ensemble.json"));
    assert_eq!(r["seed"], 5);
    assert!(r["result"]["report"]["dense_checked"].as_bool().unwrap());
    assert!(r["result"]["triplet"]["mean_re"].is_number());
}
