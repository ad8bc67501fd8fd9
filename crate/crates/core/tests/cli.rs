use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use serde_json::Value;

const FIXTURE: &str = "y,d1,d2\n3,1,1\n1,1,0\n2,0,1\n0,0,0\n2,1,0\n";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selective-ridge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn fixture(dir: &Path) -> String {
    let path = dir.join("data.csv");
    fs::write(&path, FIXTURE).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (headers, rows)
}

/// OLS of centered y on centered (focal, d1, d2), solved by QR.
fn centered_ols() -> DVector<f64> {
    let rows: Vec<[f64; 3]> = FIXTURE
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect();
    let n = rows.len();
    let mut x = DMatrix::from_fn(n, 3, |i, c| match c {
        0 => rows[i][1].max(rows[i][2]),
        _ => rows[i][c],
    });
    let mut y = DVector::from_fn(n, |i, _| rows[i][0]);
    for mut col in x.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let m = y.mean();
    y.add_scalar_mut(-m);
    let qr = x.qr();
    qr.r().solve_upper_triangular(&(qr.q().transpose() * y)).unwrap()
}

#[test]
fn fit_matches_centered_least_squares() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path());
    let out = dir.path().join("fit");
    let res = bin(&[
        "fit", "--input", &input, "--outcome", "y", "--treatments", "d1,d2", "--lambda", "0",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));

    let report: Value = serde_json::from_slice(&fs::read(out.join("fit.json")).unwrap()).unwrap();
    let printed: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(report, printed);
    let oracle = centered_ols();
    let coefs = report["coefficients"].as_array().unwrap();
    let names: Vec<&str> = coefs.iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["focal", "d1", "d2"]);
    for (c, o) in coefs.iter().zip(oracle.iter()) {
        assert!((c["estimate"].as_f64().unwrap() - o).abs() < 1e-12);
        assert!(c["se"].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(report["n"], 5);
    assert_eq!(report["k"], 2);
    assert_eq!(report["lambda_source"], "fixed");
    assert_eq!(report["tau_unconfounded_mode"], false);
    // centered focal [.2,.2,.2,-.8,.2], centered y [1.4,-.6,.4,-1.6,.4]: 1.6 / 0.8
    assert!((report["tau0"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(report["prevalences"][0]["value"].as_f64().unwrap(), 0.6);

    let manifest: Value =
        serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "fit");
    assert_eq!(manifest["config"]["data"]["nuisance"]["learner"], "mean_only");
    assert_eq!(manifest["input_digests"].as_object().unwrap().len(), 1);
}

#[test]
fn lambda_and_tune_are_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path());
    let out = dir.path().join("o");
    for flag in ["--tune", "--lambda-tune"] {
        let res = bin(&[
            "fit", "--input", &input, "--outcome", "y", "--treatments", "d1,d2", "--lambda", "0",
            flag, "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(res.status.code(), Some(2));
        assert!(stderr(&res).contains("cannot be used with"), "{}", stderr(&res));
    }
    assert!(!out.exists());
}

#[test]
fn missing_outcome_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path());
    let out = dir.path().join("o");
    let res = bin(&[
        "fit", "--input", &input, "--outcome", "revenue", "--treatments", "d1,d2", "--lambda",
        "0", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("revenue"), "{}", stderr(&res));
    assert!(res.stdout.is_empty());
    assert!(!out.exists());
}

#[test]
fn bad_treatment_cell_reports_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    fs::write(&input, "y,d1,d2\n1,1,0\n2,0,2\n").unwrap();
    let res = bin(&[
        "fit", "--input", input.to_str().unwrap(), "--outcome", "y", "--treatments", "d1,d2",
        "--lambda", "1", "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let msg = stderr(&res);
    assert!(msg.contains("d2") && msg.contains('2'), "{msg}");
}

fn f(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn sweep_paths_and_single_point_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path());
    let sweep = dir.path().join("sweep");
    let res = bin(&[
        "sweep", "--input", &input, "--outcome", "y", "--treatments", "d1,d2", "--grid",
        "0+log:1e-3:1e12:16", "--out", sweep.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let (headers, rows) = read_csv(&sweep.join("sweep.csv"));
    assert_eq!(headers, ["lambda", "coefficient_name", "beta_hat", "tau_hat", "tau0_hat", "se"]);
    assert_eq!(rows.len(), 17 * 3);

    let tau0 = f(&rows[0][4]);
    for r in &rows {
        assert!((f(&r[4]) - tau0).abs() <= 1e-8 * tau0.abs());
    }
    let scale = rows[..3].iter().map(|r| f(&r[2]).abs()).fold(0.0, f64::max);
    for r in &rows[rows.len() - 2..] {
        assert!(f(&r[2]).abs() < 1e-6 * scale, "{r:?}");
    }

    // A one-point sweep reproduces the fit report exactly.
    let one = dir.path().join("one");
    let fit = dir.path().join("fit");
    let common = ["--input", &input, "--outcome", "y", "--treatments", "d1,d2"];
    let res = bin(&[&["sweep"], &common[..], &["--grid", "2.5", "--out", one.to_str().unwrap()]].concat());
    assert!(res.status.success(), "{}", stderr(&res));
    let res = bin(&[&["fit"], &common[..], &["--lambda", "2.5", "--out", fit.to_str().unwrap()]].concat());
    assert!(res.status.success(), "{}", stderr(&res));
    let (_, rows) = read_csv(&one.join("sweep.csv"));
    let report: Value = serde_json::from_slice(&fs::read(fit.join("fit.json")).unwrap()).unwrap();
    for (r, c) in rows.iter().zip(report["coefficients"].as_array().unwrap()) {
        assert_eq!(f(&r[2]), c["estimate"].as_f64().unwrap());
        assert_eq!(f(&r[5]), c["se"].as_f64().unwrap());
    }
    assert_eq!(f(&rows[0][4]), report["tau0"].as_f64().unwrap());
    for (r, t) in rows[1..].iter().zip(report["tau"].as_array().unwrap()) {
        assert_eq!(f(&r[3]), t["value"].as_f64().unwrap());
    }
}

#[test]
fn tuned_fit_records_the_score_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("y,x,d1,d2\n");
    for i in 0..80u32 {
        let (d1, d2) = (u32::from(i % 3 == 0), u32::from(i % 5 == 0));
        let x = f64::from(i % 7) - 3.0;
        let y = 1.0 + 2.0 * f64::from(d1.max(d2)) + 0.5 * f64::from(d1) + x + f64::from(i % 4) * 0.1;
        text.push_str(&format!("{y},{x},{d1},{d2}\n"));
    }
    let input = dir.path().join("t.csv");
    fs::write(&input, text).unwrap();
    let out = dir.path().join("o");
    let res = bin(&[
        "fit", "--input", input.to_str().unwrap(), "--outcome", "y", "--treatments", "d1,d2",
        "--covariates", "x", "--nuisance", "linear", "--tune", "--grid", "0,1,10,100",
        "--covariance", "robust", "--seed", "3", "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let report: Value = serde_json::from_slice(&fs::read(out.join("fit.json")).unwrap()).unwrap();
    assert_eq!(report["lambda_source"], "tuned");
    assert_eq!(report["tuning"]["scores"].as_array().unwrap().len(), 4);
    assert_eq!(report["covariance_kind"], "robust");
    assert_eq!(report["tau_unconfounded_mode"], true);
    assert_eq!(report["d"], 1);
}

#[test]
fn simulate_recovers_the_first_target() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let res = bin(&[
        "simulate", "--paper-defaults", "--n", "100000", "--reps", "50", "--lambda", "0", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let (headers, rows) = read_csv(&out.join("paths.csv"));
    assert_eq!(headers[..3], ["lambda", "coefficient_name", "beta_hat"]);
    let d1 = rows.iter().find(|r| r[1] == "d1").unwrap();
    assert!((f(&d1[3]) - 7.1).abs() < 0.05, "{d1:?}");
    let (_, mse) = read_csv(&out.join("mse.csv"));
    assert_eq!(mse.len(), 6);
    let manifest: Value =
        serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["simulation"]["reps"], 50);
    assert!(manifest["rng"].as_str().unwrap().contains("ChaCha8"));
}

#[test]
fn simulate_refuses_a_single_rep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let res = bin(&["simulate", "--paper-defaults", "--reps", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("reps >= 2"), "{}", stderr(&res));
    assert!(!out.exists());
}

#[test]
fn simulate_is_byte_reproducible_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let args = [
            &["simulate", "--paper-defaults", "--n", "500", "--reps", "20", "--seed", "9"][..],
            extra,
            &["--out", out.to_str().unwrap()],
        ]
        .concat();
        let res = bin(&args);
        assert!(res.status.success(), "{}", stderr(&res));
        out
    };
    let a = run("a", &[]);
    let b = run("b", &["--serial"]);
    let replay = dir.path().join("r");
    let res = bin(&[
        "replay", a.join("manifest.json").to_str().unwrap(), "--out", replay.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    for file in ["paths.csv", "mse.csv", "summary.json"] {
        let reference = fs::read(a.join(file)).unwrap();
        assert_eq!(reference, fs::read(b.join(file)).unwrap(), "{file}");
        assert_eq!(reference, fs::read(replay.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn replay_detects_changed_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path());
    let out = dir.path().join("o");
    let res = bin(&[
        "sweep", "--input", &input, "--outcome", "y", "--treatments", "d1,d2", "--grid", "0,1",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let again = dir.path().join("again");
    let res = bin(&["replay", out.join("manifest.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert_eq!(fs::read(out.join("sweep.csv")).unwrap(), fs::read(again.join("sweep.csv")).unwrap());

    fs::write(&input, FIXTURE.replace("3,1,1", "4,1,1")).unwrap();
    let res = bin(&["replay", out.join("manifest.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("changed"), "{}", stderr(&res));
}
