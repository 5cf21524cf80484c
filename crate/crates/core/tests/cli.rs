use std::fs;
use std::path::Path;

use serde_json::Value;
use wentzell::cli::{main_with_args, run, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use wentzell::config::ExperimentConfig;

const SIMULATE: &str = r#"
[geometry]
kind = "disk"
n_r = 6
n_theta = 16

[physics]
initial = { kind = "constant", value = 1.0 }

[time]
t_final = 1.0
steps = 40

[control]
mode = "simulate"
"#;

const HUM: &str = r#"
[geometry]
kind = "disk"
n_r = 6
n_theta = 16

[physics]
initial = { kind = "constant", value = 1.0 }

[time]
t_final = 1.0
steps = 40

[control]
mode = "hum"
region = { kind = "disk", center = [0.0, 0.0], radius = 0.5 }
epsilon = 1e-3
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn simulate_writes_trajectory_and_conserves_mass() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SIMULATE);
    let out = tmp.path().join("out");
    let code = main_with_args([
        "wentzell",
        "run",
        &cfg,
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(out.join("trajectory.csv").exists());
    assert!(out.join("trajectory.bin").exists());
    let m = manifest(&out);
    assert_eq!(m["mode"], "simulate");
    let drift = m["headline"]["mass_drift"].as_f64().unwrap();
    assert!(drift <= 1e-11, "{drift}");
    for name in m["artifacts"].as_array().unwrap() {
        assert!(out.join(name.as_str().unwrap()).exists(), "{name}");
    }
}

#[test]
fn hum_manifest_reports_the_identity_residual() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(HUM).unwrap();
    let out = tmp.path().join("hum");
    run(&cfg, &out, None).unwrap();
    let m = manifest(&out);
    let summary = &m["headline"]["summary"];
    let terminal = summary["terminal_norm"].as_f64().unwrap();
    let identity = m["headline"]["identity_residual"].as_f64().unwrap();
    let phi = m["headline"]["phi_hat_norm"].as_f64().unwrap();
    assert!(terminal > 0.0);
    assert!(identity <= 10.0 * 1e-8 * phi, "{identity} vs {phi}");
    // y(T) = -ε φ̂ ties the two headline numbers together
    assert!((terminal - 1e-3 * phi).abs() <= 1e-6 * terminal.max(1e-300) + identity);
    for name in ["state.csv", "control.csv", "cg_history.csv", "phi_hat.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn missing_time_block_is_a_usage_error_naming_time() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SIMULATE.replace("[time]\nt_final = 1.0\nsteps = 40\n", "");
    let err = ExperimentConfig::from_toml(&text).unwrap_err();
    assert!(err.to_string().contains("time"), "{err}");
    let cfg = write_config(tmp.path(), &text);
    assert_eq!(main_with_args(["wentzell", "run", &cfg]), EXIT_USAGE);
}

#[test]
fn unknown_fields_are_rejected() {
    let text = SIMULATE.replace("steps = 40", "steps = 40\nstpes = 3");
    let err = ExperimentConfig::from_toml(&text).unwrap_err();
    assert!(err.to_string().contains("stpes"), "{err}");
}

#[test]
fn out_of_range_parameters_are_rejected() {
    for (from, to) in [
        ("steps = 40", "steps = 0"),
        ("t_final = 1.0", "t_final = -1.0"),
    ] {
        let text = SIMULATE.replace(from, to);
        assert!(ExperimentConfig::from_toml(&text).is_err(), "{to}");
    }
}

#[test]
fn config_survives_a_round_trip() {
    let cfg = ExperimentConfig::from_toml(HUM).unwrap();
    let text = toml::to_string(&cfg).unwrap();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(toml::to_string(&back).unwrap(), text);
}

#[test]
fn unknown_suite_lists_the_valid_ones() {
    let err = wentzell::verify::run_suite("bogus").unwrap_err();
    let msg = err.to_string();
    for s in wentzell::verify::SUITES {
        assert!(msg.contains(s), "{msg}");
    }
    assert_eq!(main_with_args(["wentzell", "verify", "bogus"]), EXIT_USAGE);
}

#[test]
fn operators_suite_passes() {
    assert_eq!(main_with_args(["wentzell", "verify", "operators"]), EXIT_OK);
}

#[test]
fn missing_config_file_fails() {
    let code = main_with_args(["wentzell", "run", "/nonexistent/config.toml"]);
    assert!(code == EXIT_FAILURE || code == EXIT_USAGE);
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(main_with_args(["wentzell", "frobnicate"]), EXIT_USAGE);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 3);
}
