use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn farfield(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_farfield"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

#[test]
fn validate_passes_on_the_scalar_laplacian() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "lap.toml", "defect = \"vacancy\"\nmodel = \"scalar-laplacian\"\n\n[greens]\nwindow = 11\n");
    let o = farfield(tmp.path(), &["validate", "--config", "lap.toml", "--out", "v"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("all") && !stdout.contains("FAIL"), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("v/validation.json")).unwrap()).unwrap();
    assert_eq!(report["model"], "scalar-laplacian");
}

#[test]
fn failing_oracles_exit_with_four() {
    // eight quadrature nodes are too coarse for the anisotropic kernels
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "coarse.toml", "defect = \"vacancy\"\n\n[greens]\nquadrature = 8\nwindow = 10\n");
    let o = farfield(tmp.path(), &["validate", "--config", "coarse.toml", "--out", "v"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn config_errors_exit_with_two_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "bad.toml", "defect = \"vacancy\"\n\n[study]\nradii = [4, 3]\n");
    let o = farfield(tmp.path(), &["study", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("study.radii") && e.contains("line 4"), "{e}");

    write(tmp.path(), "typo.toml", "defect = \"vacancy\"\n[solver]\ntolerence = 1e-8\n");
    let o = farfield(tmp.path(), &["relax", "--config", "typo.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tolerence"));

    // the default reference radius 20 is below twice 12
    let o = farfield(tmp.path(), &["study", "--radii", "4,12", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!tmp.path().join("x").exists(), "nothing is written for a bad config");
}

#[test]
fn solver_failures_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "short.toml", "defect = \"vacancy\"\n\n[solver]\nmax_iterations = 2\n");
    let o = farfield(tmp.path(), &["relax", "--config", "short.toml", "--radii", "3", "--out", "r"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn relax_honours_tolerance_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["relax", "--radii", "3", "--orders", "0,1", "--tol", "1e-8", "--out", "r"];
    let o = farfield(tmp.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = tmp.path().join("r");
    let trace = fs::read_to_string(out.join("relax_trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "order,phase,iteration,energy,residual");
    let last: Vec<&str> = trace.lines().last().unwrap().split(',').collect();
    assert_eq!(last[0], "1");
    assert!(last[4].parse::<f64>().unwrap() <= 1e-8);
    let echoed = farfield::config::StudyConfig::from_path(&out.join("relax_config.toml")).unwrap();
    assert_eq!(echoed.solver.tolerance, 1e-8);
    assert_eq!(echoed.study.orders, vec![0, 1]);
    for f in ["relax.xyz", "relax_residual.csv", "relax_moments.json", "relax_predictor.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let xyz = fs::read_to_string(out.join("relax.xyz")).unwrap();
    let n: usize = xyz.lines().next().unwrap().parse().unwrap();
    assert_eq!(xyz.lines().count(), n + 2);

    let again = farfield(tmp.path(), &args);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    let forced = farfield(tmp.path(), &[&args[..], &["--force"]].concat());
    assert_eq!(forced.status.code(), Some(0), "{}", stderr(&forced));
}

#[test]
fn study_writes_one_row_per_radius_and_order() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "small.toml", "defect = \"vacancy\"\n\n[study]\nradii = [2, 3, 4]\nreference_radius = 8\n");
    let o = farfield(tmp.path(), &["study", "--config", "small.toml", "--orders", "0,1", "--out", "s", "--deterministic"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = tmp.path().join("s");
    let csv = fs::read_to_string(out.join("study.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "defect,R,order,geom_err,energy_err,ME_1,ME_2,ME_3,iters,seconds");
    assert_eq!(lines.len(), 1 + 3 * 2);
    assert!(lines[1..].iter().all(|l| l.ends_with(",0.0000000000000000e0")));
    for f in ["study.json", "moments.json", "predictors.json", "geometry_error.svg", "moment_error_3.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let cached = fs::read_dir(out.join("cache")).unwrap().count();
    assert_eq!(cached, 2, "blob and sidecar");

    // the echoed config reproduces the run
    let o = farfield(tmp.path(), &["study", "--config", "s/study_config.toml", "--out", "s2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(tmp.path().join("s2/study.csv")).unwrap(), csv);
}
