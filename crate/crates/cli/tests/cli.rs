use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn twophase(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twophase")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

const TWO_PLANE: &str = "seed = 3\n[grid]\nh = 0.03125\n[boundary]\nid = \"two_plane\"\nbeta = 1.0\n";

fn run_in(dir: &Path, command: &str, config: &str, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = write_config(dir, config);
    let out = dir.join(command);
    let mut args = vec![command, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (twophase(&args), out)
}

#[test]
fn solve_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = run_in(tmp.path(), "solve", TWO_PLANE, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["schema"], 1);
    assert_eq!(r["converged"], true);
    assert_eq!(r["seed"], 3);
    let field = fs::read_to_string(out.join("field.csv")).unwrap();
    assert!(field.lines().count() > 3000);

    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["grid"]["R"], 1.0);
    assert_eq!(m["config"]["viscosity"]["slack"], 0.03125);
    assert_eq!(m["config"]["barrier"]["gamma_b"], 2.0);
    assert_eq!(m["config"]["boundary"]["nu"], serde_json::json!([0.0, 1.0]));
    assert!(m["derived"]["solver.omega_on_grid"].as_f64().unwrap() > 1.0);
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TWO_PLANE);
    for dir in ["a", "b"] {
        let out = tmp.path().join(dir);
        let o = twophase(&["solve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    let ra = fs::read(tmp.path().join("a/report.json")).unwrap();
    let rb = fs::read(tmp.path().join("b/report.json")).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(fs::read(tmp.path().join("a/field.csv")).unwrap(), fs::read(tmp.path().join("b/field.csv")).unwrap());
}

#[test]
fn non_integer_cell_count_is_a_config_error_with_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = run_in(tmp.path(), "solve", "[grid]\nR = 1.0\nh = 0.03\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("exp.toml:3: grid.h"), "{err}");
    assert!(!out.join("report.json").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, _) = run_in(tmp.path(), "solve", "[grid]\nspacing = 0.1\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("spacing"));
    let (o, _) = run_in(tmp.path(), "solve", TWO_PLANE, &["--override", "solver.omgea=1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn override_and_seed_flags_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = run_in(tmp.path(), "solve", TWO_PLANE, &["--seed", "11", "--override", "grid.h=0.0625"]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["seed"], 11);
    assert_eq!(r["grid"]["h"], 0.0625);
}

#[test]
fn non_converged_solve_exits_3_with_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = format!("{TWO_PLANE}[solver]\nmax_iterations = 5\ncoarse_start = false\n");
    let (o, out) = run_in(tmp.path(), "solve", &cfg, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(report(&out)["converged"], false);
    assert!(out.join("field.csv").exists() && out.join("manifest.json").exists());
}

#[test]
fn analysis_commands_run_on_a_solved_field() {
    let tmp = tempfile::tempdir().unwrap();
    let harmonic = "[grid]\nh = 0.03125\n[boundary]\nid = \"harmonic_mode\"\namplitude = 4.0\nmode = 3\ncoeff = 0.3\n";
    let (o, solved) = run_in(tmp.path(), "solve", harmonic, &[]);
    assert_eq!(o.status.code(), Some(0));
    let field = solved.join("field.csv");
    let field = field.to_str().unwrap();

    let (o, out) = run_in(tmp.path(), "analyze", harmonic, &["--field", field]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert!(r["claim_decay"]["best_delta"].as_f64().unwrap() >= 0.125);
    assert!(r["dichotomy"]["lipschitz_holds"].as_bool().unwrap() || r["dichotomy"]["decay_holds"].as_bool().unwrap());
    assert!(!out.join("field.csv").exists());

    let (o, out) = run_in(tmp.path(), "viscosity-check", harmonic, &["--field", field]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["interior"]["violations"], 0);
    assert!(r["free_boundary"]["band_nodes"].as_u64().unwrap() > 0);

    let (o, out) = run_in(tmp.path(), "cascade", harmonic, &["--field", field]);
    assert_eq!(o.status.code(), Some(0));
    assert!(report(&out)["cascade"]["eps"].as_array().is_some_and(|e| !e.is_empty()));
}

#[test]
fn exact_two_plane_has_no_free_boundary_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = run_in(tmp.path(), "viscosity-check", TWO_PLANE, &[]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["free_boundary"]["case_1"], 0);
    assert_eq!(r["free_boundary"]["case_2"], 0);
    assert_eq!(r["solve"]["converged"], true);
}

#[test]
fn barrier_on_the_case_two_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "[grid]\nh = 0.015625\n[boundary]\nbeta = 0.02\nx0 = [0.0, -0.5]\n\
               [barrier]\nx0 = [0.0, -0.2]\nd = 0.3\n";
    let (o, out) = run_in(tmp.path(), "barrier", cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["laplacian_positive"], true);
    assert_eq!(r["case_two"]["construction"]["hypothesis_ok"], true);
    assert_eq!(r["case_two"]["comparison"]["holds"], true);
}

#[test]
fn limit_sweep_residuals_shrink_with_k() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = run_in(tmp.path(), "limit-sweep", TWO_PLANE, &["--override", "limit.k_list=[1.0, 8.0]"]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["band_residual_non_increasing"], true);
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!((rows[1]["g_ratio"].as_f64().unwrap() - 65f64.sqrt() / 8.0).abs() < 1e-12);
}

#[test]
fn suite_emits_one_summary_row_per_criterion() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("suite");
    let o = twophase(&["suite", "--seed", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("suite_summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "criterion_id,measured,threshold,pass");
    assert_eq!(lines.len(), 10);
    for (k, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{},", k + 1)));
        assert!(line.ends_with(",true") || line.ends_with(",false"));
    }
    assert!(out.join("timings.csv").exists());
    assert!(!fs::read_to_string(out.join("report.json")).unwrap().contains("seconds"));
}
