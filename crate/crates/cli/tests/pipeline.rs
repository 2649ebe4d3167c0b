//! End-to-end tests of the command-line pipeline: artifact determinism,
//! exit-code contract, and schema rejection, all through the real binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = r#"
[layout]
p = 1
m = 1
q = 1
lag = 3
n_state = 1

[kernel]
r_y = [[[1.0]], [[-0.5]]]
r_u = [[[-1.0]], [[-0.3]]]
r_d = [[[-1.0]], [[0.2]]]

[noise]
s_d = [[0.4]]
s_u = [[0.2]]
s_n = [[0.3, 0.0, 0.0], [0.0, 0.25, 0.0], [0.0, 0.0, 0.2]]

[mixtures]
kind = "randomized"
seed = 11

[data]
trajectories = 120
steps = 50

[seeds]
data = 7
simulate = 900
"#;

fn config_with(extra: &str) -> String {
    format!("{BASE}\n{extra}")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probgain")).args(args).output().unwrap()
}

fn run_ok(subcommand: &str, config: &Path, out: &Path) -> String {
    let output = run(&[
        subcommand,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        output.status.code(),
        Some(0),
        "{subcommand} failed: {}{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn exit_code(args: &[&str]) -> i32 {
    run(args).status.code().expect("process terminated by signal")
}

#[test]
fn pipeline_artifacts_are_reproducible() {
    let body = config_with(
        "[design]\nmode = \"general\"\ngamma1_sq = 8.0\ngamma2_sq = 8.0\n\n\
         [simulate]\nhorizon = 25\ncohort = 60\nouter_groups = 3\ntraj_panels = 1\nrecord_dumps = 1\n",
    );
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        fs::create_dir_all(&out).unwrap();
        let config = write_config(&out, &body);
        run_ok("generate", &config, &out);
        run_ok("design", &config, &out);
        run_ok("simulate", &config, &out);
        run_ok("report", &config, &out);
        dirs.push(out);
    }

    let deterministic = [
        "dataset.txt",
        "basis.txt",
        "are.txt",
        "design.txt",
        "cdf_general_seed900_T25.txt",
        "outer_general_seed900_T25.txt",
        "rollout_general_seed900_T25.txt",
        "traj_general_seed900_T25.txt",
        "fig_inner_general.txt",
        "fig_outer_general_T25_seed900.txt",
        "fig_trajectories_general_T25_seed900.txt",
    ];
    for file in deterministic {
        let a = fs::read(dirs[0].join(file)).unwrap_or_else(|_| panic!("missing {file}"));
        let b = fs::read(dirs[1].join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }

    // Every artifact opens with the config hash and the seed manifest.
    for file in deterministic {
        let text = fs::read_to_string(dirs[0].join(file)).unwrap();
        let mut lines = text.lines();
        let first = lines.next().unwrap();
        assert!(first.starts_with("# config "), "{file}: {first}");
        assert_eq!(first.len(), "# config ".len() + 12, "{file} hash width");
        assert!(lines.next().unwrap().starts_with("# seeds "), "{file}");
    }

    let summary =
        fs::read_to_string(dirs[0].join("summary_general_seed900_T25.txt")).unwrap();
    for key in ["label general", "inner_strict pass", "outer pass", "diverged 0"] {
        assert!(summary.contains(key), "summary missing `{key}`:\n{summary}");
    }
}

#[test]
fn infeasible_gain_exits_with_design_code() {
    let body = config_with("[design]\nmode = \"zero\"\ngamma2_sq = 0.3\n");
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    fs::create_dir_all(&out).unwrap();
    let config = write_config(&out, &body);
    run_ok("generate", &config, &out);
    let code = exit_code(&[
        "design",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(!out.join("design.txt").exists(), "no artifact for an infeasible design");
}

#[test]
fn diverging_cohort_exits_with_divergence_code() {
    let body = config_with(
        "[design]\nmode = \"general\"\ngamma1_sq = 8.0\ngamma2_sq = 8.0\n\n\
         [simulate]\nhorizon = 20\ncohort = 20\noverflow_cap = 1e-12\ndivergence_threshold = 0.5\n",
    );
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    fs::create_dir_all(&out).unwrap();
    let config = write_config(&out, &body);
    run_ok("generate", &config, &out);
    run_ok("design", &config, &out);
    let code = exit_code(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
    // The summary still records the diverged cohort before the exit.
    let summary =
        fs::read_to_string(out.join("summary_general_seed900_T20.txt")).unwrap();
    assert!(summary.contains("diverged 20"), "{summary}");
}

#[test]
fn schema_and_usage_violations_exit_with_input_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    fs::create_dir_all(&out).unwrap();
    let out_s = out.to_str().unwrap().to_owned();

    // Unknown TOML field.
    let bad = write_config(&out, "[layout]\nbogus = 1\n");
    assert_eq!(exit_code(&["design", "--config", bad.to_str().unwrap(), "--out", &out_s]), 4);

    // Valid schema, but design needs a dataset first.
    let body = config_with("[design]\nmode = \"general\"\ngamma1_sq = 8.0\ngamma2_sq = 8.0\n");
    let config = write_config(&out, &body);
    assert_eq!(exit_code(&["design", "--config", config.to_str().unwrap(), "--out", &out_s]), 4);

    // Report with nothing to aggregate.
    assert_eq!(exit_code(&["report", "--config", config.to_str().unwrap(), "--out", &out_s]), 4);

    // Data section too short to ever cover the excitation window.
    let short = config_with("[design]\nmode = \"general\"\ngamma1_sq = 8.0\ngamma2_sq = 8.0\n")
        .replace("steps = 50", "steps = 3");
    let short_cfg = out.join("short.toml");
    fs::write(&short_cfg, short).unwrap();
    assert_eq!(
        exit_code(&["generate", "--config", short_cfg.to_str().unwrap(), "--out", &out_s]),
        4
    );

    // Cohort override of zero.
    run_ok("generate", &config, &out);
    assert_eq!(
        exit_code(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            &out_s,
            "--cohort",
            "0",
        ]),
        4
    );

    // Unknown flags and missing arguments are input errors, not clap's 2.
    assert_eq!(exit_code(&["design", "--config"]), 4);
    assert_eq!(exit_code(&["frobnicate"]), 4);
}

#[test]
fn check_and_are_verify_a_designed_artifact() {
    let body = config_with("[design]\nmode = \"general\"\ngamma1_sq = 8.0\ngamma2_sq = 8.0\n");
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    fs::create_dir_all(&out).unwrap();
    let config = write_config(&out, &body);
    run_ok("generate", &config, &out);
    run_ok("design", &config, &out);

    let stdout = run_ok("check", &config, &out);
    assert!(stdout.contains("design artifact verifies"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");

    let are = run_ok("are", &config, &out);
    assert!(are.contains("basis source: learned"), "{are}");
    assert!(are.contains("relative riccati residual"), "{are}");

    // A fresh directory falls back to the exact kernel basis.
    let fresh = tmp.path().join("fresh");
    fs::create_dir_all(&fresh).unwrap();
    let fresh_cfg = write_config(&fresh, &body);
    let are_exact = run_ok("are", &fresh_cfg, &fresh);
    assert!(are_exact.contains("basis source: exact kernel null space"), "{are_exact}");
}

#[test]
fn help_and_version_exit_cleanly() {
    assert_eq!(exit_code(&["--help"]), 0);
    assert_eq!(exit_code(&["--version"]), 0);
    assert_eq!(exit_code(&["simulate", "--help"]), 0);
}
