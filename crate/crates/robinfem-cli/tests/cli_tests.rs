//! End-to-end tests that drive the `robinfem` binary exactly the way a
//! user would: write a config file, run subcommands, inspect the files
//! they leave behind and the exit codes they return.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robinfem"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

/// Small enough to solve in well under a second but still exercising the
/// full data pipeline (refined exact data, noise, projection, inversion).
const TINY_ELLIPTIC: &str = "\
model = elliptic
q_true_breakpoints = 1
q_true_values = 1.2 1.2
q_init_breakpoints = 1
q_init_values = 1 1
deltas = 1e-2
seeds = 1
h0 = 0.5
alpha0 = 1.6e-4
max_iterations = 3
";

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn invert_writes_history_reconstruction_and_charts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.cfg", TINY_ELLIPTIC);
    let out_dir = tmp.path().join("out");

    let out = run(&[
        "invert",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("e_q"), "summary line should report the error: {text}");

    let history = fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("# robinfem v"));
    assert!(history.contains("config_sha256="));
    assert!(history.contains("k,J,J_energy,J_robin,J_l2,e_q,step"));
    let data_rows = history
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with('k') && !l.is_empty())
        .count();
    assert!(data_rows >= 2, "expected iterate rows, got {data_rows}");

    let recon = fs::read_to_string(out_dir.join("reconstruction.csv")).unwrap();
    assert!(recon.contains("s,q_star,q_dag"));

    for chart in ["history.svg", "reconstruction.svg"] {
        let svg = fs::read_to_string(out_dir.join(chart)).unwrap();
        assert!(svg.contains("<svg"), "{chart} should be an SVG document");
        assert!(!svg.contains("NaN"), "{chart} should not contain NaN coordinates");
    }
}

#[test]
fn invert_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.cfg", TINY_ELLIPTIC);
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");

    for dir in [&dir_a, &dir_b] {
        let out = run(&[
            "invert",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    }

    for file in ["history.csv", "reconstruction.csv"] {
        let a = fs::read(dir_a.join(file)).unwrap();
        let b = fs::read(dir_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} should be byte-identical across reruns");
    }
}

#[test]
fn unknown_config_key_is_named_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.cfg",
        "model = elliptic\nbanana = 7\n",
    );
    let out = run(&["invert", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("banana"),
        "stderr should name the offending key: {}",
        stderr_of(&out)
    );
}

#[test]
fn parabolic_config_without_time_step_anchor_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.cfg",
        "\
model = parabolic
t_final = 10
q_true_breakpoints = 1
q_true_values = 1 1
q_init_breakpoints = 1
q_init_values = 1 1
deltas = 1e-2
seeds = 1
h0 = 0.5
alpha0 = 1.6e-5
",
    );
    let out = run(&["invert", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("tau0"),
        "stderr should point at the missing anchor: {}",
        stderr_of(&out)
    );
}

#[test]
fn sweep_records_schedule_columns_and_withholds_rate_below_three_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "two_levels.cfg",
        "\
model = elliptic
q_true_breakpoints = 1
q_true_values = 1.2 1.2
q_init_breakpoints = 1
q_init_values = 1 1
deltas = 1e-2 5e-3
seeds = 1
h0 = 0.5
alpha0 = 1.6e-4
max_iterations = 3
",
    );
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert!(csv.contains("delta,h,tau,alpha,seed,e_q,J,iters,seconds"));
    assert!(
        !csv.contains("# rate"),
        "two noise levels are not enough for a slope fit"
    );
    let rows: Vec<&str> = csv
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("delta") && !l.is_empty())
        .collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 9);
        assert!(fields[2].is_empty(), "elliptic rows leave tau blank: {row}");
    }
    assert!(out_dir.join("sweep.svg").exists());
}

#[test]
fn rate_recovers_an_exact_power_law_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("sweep.csv");
    fs::write(
        &csv,
        "\
# robinfem v0.0.0 config_sha256=unused
delta,h,tau,alpha,seed,e_q,J,iters,seconds
1.0000000000000000e-2,1,,1,1,1.0000000000000000e-2,1,1,0.1
1.0000000000000000e-3,1,,1,1,1.0000000000000000e-3,1,1,0.1
1.0000000000000000e-4,1,,1,1,1.0000000000000000e-4,1,1,0.1
",
    )
    .unwrap();
    let out = run(&["rate", "--csv", csv.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(
        text.contains("slope = 1.0000"),
        "exact power law should fit to slope one: {text}"
    );
}

#[test]
fn plot_rebuilds_every_chart_kind_from_its_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.cfg", TINY_ELLIPTIC);
    let out_dir = tmp.path().join("out");

    for sub in ["invert", "sweep"] {
        let out = run(&[
            sub,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{sub} stderr: {}", stderr_of(&out));
    }

    for name in ["history", "reconstruction", "sweep"] {
        let svg_path = out_dir.join(format!("{name}.svg"));
        fs::remove_file(&svg_path).unwrap();
        let csv_path = out_dir.join(format!("{name}.csv"));
        let out = run(&["plot", "--csv", csv_path.to_str().unwrap()]);
        assert!(out.status.success(), "plot {name} stderr: {}", stderr_of(&out));
        let svg = fs::read_to_string(&svg_path).unwrap();
        assert!(svg.contains("<svg"), "{name}.svg should be regenerated");
    }
}

#[test]
fn mesh_and_forward_write_portable_text_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.cfg", TINY_ELLIPTIC);
    let out_dir = tmp.path().join("out");

    let out = run(&[
        "mesh",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let mesh = fs::read_to_string(out_dir.join("mesh.txt")).unwrap();
    assert!(mesh.starts_with("# robinfem v"));
    assert!(mesh.contains("trimesh v1"));

    let out = run(&[
        "forward",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let obs = fs::read_to_string(out_dir.join("observations.txt")).unwrap();
    assert!(obs.contains("obsdata v1"));
    assert!(
        obs.contains("seed=7"),
        "the --seed flag should override the config seed list"
    );
}
