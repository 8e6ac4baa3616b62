//! End-to-end tests of the `flowrecon` binary: artifact layout, exit codes,
//! determinism, and the design subcommands.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn flowrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowrecon"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn density2d_config(out: &Path) -> String {
    format!(
        "task = density2d\n\
         seed = 11\n\
         output_dir = {}\n\
         model.coupling = spline\n\
         model.flow_steps = 2\n\
         model.couplings_per_step = 2\n\
         model.hidden_width = 16\n\
         sampler.scheme = lpss\n\
         train.steps = 2000\n\
         train.batch_size = 64\n\
         train.learning_rate = 5e-3\n\
         eval.samples = 1000\n\
         eval.real_samples = 1000\n\
         problem.phantom = two_blob\n\
         problem.phantom_size = 16\n",
        out.display()
    )
}

#[test]
fn density2d_run_produces_artifacts_and_coverage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run1");
    let cfg = write_config(tmp.path(), "d2.cfg", &density2d_config(&out));

    let res = flowrecon(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&res.stdout),
        String::from_utf8_lossy(&res.stderr)
    );
    for artifact in [
        "config.resolved",
        "model.bin",
        "loss_history.csv",
        "samples.f32",
        "samples.f32.json",
        "mean.pgm",
        "std.pgm",
        "mean.f32",
        "std.f32",
        "metrics.csv",
    ] {
        assert!(out.join(artifact).exists(), "missing artifact {artifact}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let coverage: f64 = metrics
        .lines()
        .find(|l| l.starts_with("coverage,"))
        .and_then(|l| l.split(',').nth(1))
        .and_then(|v| v.parse().ok())
        .expect("coverage row");
    assert!(coverage >= 0.7, "coverage {coverage}\n{metrics}");
}

#[test]
fn rerun_is_byte_identical_and_snapshot_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let out1 = tmp.path().join("a");
    let out2 = tmp.path().join("b");
    let out3 = tmp.path().join("c");
    let mut body = density2d_config(&out1);
    body = body.replace("train.steps = 2000", "train.steps = 120");
    let cfg = write_config(tmp.path(), "d2.cfg", &body);

    let res = flowrecon(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let res = flowrecon(&["run", "--config", cfg.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let a = fs::read(out1.join("samples.f32")).unwrap();
    let b = fs::read(out2.join("samples.f32")).unwrap();
    assert_eq!(a, b, "samples.f32 differs between identical runs");
    let ma = fs::read(out1.join("metrics.csv")).unwrap();
    let mb = fs::read(out2.join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);

    // The snapshot is a sufficient config: re-running from it reproduces.
    let snap = out1.join("config.resolved");
    let res = flowrecon(&[
        "run",
        "--config",
        snap.to_str().unwrap(),
        "--out",
        out3.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let c = fs::read(out3.join("samples.f32")).unwrap();
    assert_eq!(a, c, "snapshot rerun differs");
}

#[test]
fn missing_seed_exits_2_and_names_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.cfg",
        &format!("task = density2d\noutput_dir = {}\n", tmp.path().join("x").display()),
    );
    let res = flowrecon(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("seed"), "stderr: {err}");
}

#[test]
fn missing_file_exits_2_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.cfg",
        &format!(
            "task = mri\nseed = 1\noutput_dir = {}\nproblem.image = /nope/missing.pgm\n",
            tmp.path().join("x").display()
        ),
    );
    let res = flowrecon(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("/nope/missing.pgm"), "stderr: {err}");
}

#[test]
fn design_study_writes_rows_and_validates_replicates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("study.csv");
    let res = flowrecon(&[
        "design-study",
        "--schemes",
        "srs,lhs,lpss,sobol",
        "--n",
        "64",
        "--d",
        "2",
        "--replicates",
        "100",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5, "header + 4 rows:\n{text}");
    let lhs_row = lines.iter().find(|l| l.starts_with("lhs,")).expect("lhs row");
    let ratio: f64 = lhs_row.split(',').nth(2).unwrap().parse().unwrap();
    assert!(ratio < 1.0, "lhs ratio {ratio}");

    let res = flowrecon(&[
        "design-study",
        "--schemes",
        "srs",
        "--n",
        "8",
        "--d",
        "2",
        "--replicates",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));

    let res = flowrecon(&[
        "design-study",
        "--schemes",
        "warp",
        "--n",
        "8",
        "--d",
        "2",
        "--replicates",
        "50",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn export_design_writes_expected_points() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sobol.csv");
    let res = flowrecon(&[
        "export-design",
        "--scheme",
        "sobol",
        "--n",
        "4",
        "--d",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "dim0,dim1");
    assert_eq!(lines[1], "0,0");
    assert_eq!(lines[2], "0.5,0.5");
    assert_eq!(lines[3], "0.75,0.25");
    assert_eq!(lines[4], "0.25,0.75");

    // LHS export is column-stratified, verifiable from the file.
    let out = tmp.path().join("lhs.csv");
    let res = flowrecon(&[
        "export-design",
        "--scheme",
        "lhs",
        "--n",
        "4",
        "--d",
        "2",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let rows: Vec<Vec<f64>> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    for col in 0..2 {
        let mut seen = [false; 4];
        for row in &rows {
            let k = (row[col] * 4.0).floor() as usize;
            assert!(!seen[k]);
            seen[k] = true;
        }
    }
}
