//! End-to-end contract tests for the command-line interface: exit codes, file
//! formats, canonicalization and the CLI-vs-library parity check.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_panel-glmm")
}

fn work_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("panel-glmm-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 3 individuals × 3 times, one feature, balanced.
const TOY_CSV: &str = "\
id,time,y,x1
a,1,0.5,0.1
a,2,1.0,0.4
a,3,0.0,-0.2
b,1,1.5,0.9
b,2,0.6,0.3
b,3,1.1,0.5
c,1,-0.3,-0.8
c,2,0.2,0.0
c,3,0.7,0.2
";

fn gaussian_config() -> String {
    serde_json::json!({
        "family": "gaussian",
        "link": "identity",
        "intercept": true,
        "seed": 7,
        "fit": {
            "lambda_grid": [0.0, 0.1, 1.0],
            "max_outer_iter": 80,
            "tol": 1e-7
        }
    })
    .to_string()
}

#[test]
fn fit_toy_csv_round_trips() {
    let dir = work_dir("fit-toy");
    let data = dir.join("data.csv");
    let config = dir.join("config.json");
    let out = dir.join("fit.json");
    write(&data, TOY_CSV);
    write(&config, &gaussian_config());
    let output = run(&[
        "fit",
        "--data",
        path_str(&data),
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["format_version"], 1);
    assert_eq!(value["n_individuals"], 3);
    assert_eq!(value["n_times"], 3);
    assert_eq!(value["ids"], serde_json::json!(["a", "b", "c"]));
    assert_eq!(value["params"]["beta"].as_array().unwrap().len(), 2);
    assert_eq!(
        value["lambda_path"].as_array().unwrap().len(),
        value["n_iter"].as_u64().unwrap() as usize
    );
    // round-trip: parse → serialize → parse gives the same document
    let again: serde_json::Value =
        serde_json::from_str(&serde_json::to_string(&value).unwrap()).unwrap();
    assert_eq!(value, again);
}

#[test]
fn missing_cell_exits_2() {
    let dir = work_dir("missing-cell");
    let data = dir.join("data.csv");
    let config = dir.join("config.json");
    // drop one (id, time) cell
    let truncated: String = TOY_CSV.lines().take(9).collect::<Vec<_>>().join("\n");
    write(&data, &truncated);
    write(&config, &gaussian_config());
    let output = run(&[
        "fit",
        "--data",
        path_str(&data),
        "--config",
        path_str(&config),
        "--out",
        path_str(&dir.join("fit.json")),
    ]);
    assert_eq!(exit_code(&output), 2);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("\"c\"") && stderr.contains("3"), "stderr: {stderr}");
}

#[test]
fn duplicate_cell_exits_2() {
    let dir = work_dir("dup-cell");
    let data = dir.join("data.csv");
    let config = dir.join("config.json");
    let duplicated = format!("{TOY_CSV}c,3,0.7,0.2\n");
    write(&data, &duplicated);
    write(&config, &gaussian_config());
    let output = run(&[
        "fit",
        "--data",
        path_str(&data),
        "--config",
        path_str(&config),
        "--out",
        path_str(&dir.join("fit.json")),
    ]);
    assert_eq!(exit_code(&output), 2);
}

#[test]
fn config_violations_exit_3() {
    let dir = work_dir("bad-config");
    let data = dir.join("data.csv");
    write(&data, TOY_CSV);
    // unknown key
    let config = dir.join("unknown.json");
    write(
        &config,
        &serde_json::json!({
            "family": "gaussian",
            "link": "identity",
            "unknown_key": 1
        })
        .to_string(),
    );
    let output = run(&[
        "fit",
        "--data",
        path_str(&data),
        "--config",
        path_str(&config),
        "--out",
        path_str(&dir.join("fit.json")),
    ]);
    assert_eq!(exit_code(&output), 3);

    // unsupported family/link pair
    let config = dir.join("pair.json");
    write(
        &config,
        &serde_json::json!({"family": "poisson", "link": "identity"}).to_string(),
    );
    let output = run(&[
        "fit",
        "--data",
        path_str(&data),
        "--config",
        path_str(&config),
        "--out",
        path_str(&dir.join("fit.json")),
    ]);
    assert_eq!(exit_code(&output), 3);

    // K = 0 requested for fit-hd
    let config = dir.join("k0.json");
    write(
        &config,
        &serde_json::json!({
            "family": "gaussian",
            "link": "identity",
            "sc": {"n_components": 0}
        })
        .to_string(),
    );
    let output = run(&[
        "fit-hd",
        "--data",
        path_str(&data),
        "--config",
        path_str(&config),
        "--out",
        path_str(&dir.join("fit.json")),
    ]);
    assert_eq!(exit_code(&output), 3);

    // unsupported format_version
    let config = dir.join("version.json");
    write(
        &config,
        &serde_json::json!({
            "format_version": 9,
            "family": "gaussian",
            "link": "identity"
        })
        .to_string(),
    );
    let output = run(&[
        "fit",
        "--data",
        path_str(&data),
        "--config",
        path_str(&config),
        "--out",
        path_str(&dir.join("fit.json")),
    ]);
    assert_eq!(exit_code(&output), 3);
}

fn sim_spec(seed: u64) -> String {
    serde_json::json!({
        "n_individuals": 6,
        "n_times": 4,
        "family": "poisson",
        "link": "log",
        "beta": [0.4, 0.5, -0.3],
        "sigma1_sq": 0.2,
        "sigma2_sq": 0.1,
        "rho": 0.4,
        "intercept": true,
        "seed": seed
    })
    .to_string()
}

fn poisson_fit_config() -> String {
    serde_json::json!({
        "family": "poisson",
        "link": "log",
        "intercept": true,
        "fit": {
            "lambda_grid": [0.0, 0.01, 0.1, 1.0],
            "max_outer_iter": 100,
            "tol": 1e-7
        }
    })
    .to_string()
}

#[test]
fn simulate_is_deterministic_and_refittable() {
    let dir = work_dir("simulate");
    let spec = dir.join("spec.json");
    write(&spec, &sim_spec(42));
    let csv_a = dir.join("a.csv");
    let csv_b = dir.join("b.csv");
    for out in [&csv_a, &csv_b] {
        let output = run(&[
            "simulate",
            "--config",
            path_str(&spec),
            "--out",
            path_str(out),
        ]);
        assert_eq!(exit_code(&output), 0);
    }
    // same seed → identical bytes
    assert_eq!(std::fs::read(&csv_a).unwrap(), std::fs::read(&csv_b).unwrap());

    // truth.json carries exactly the spec's true parameters
    let truth: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("a.csv.truth.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(truth["params"]["beta"], serde_json::json!([0.4, 0.5, -0.3]));
    assert_eq!(truth["params"]["rho"], serde_json::json!(0.4));
    assert_eq!(truth["xi2"].as_array().unwrap().len(), 4);

    // generated file re-ingests without error
    let config = dir.join("config.json");
    write(&config, &poisson_fit_config());
    let output = run(&[
        "fit",
        "--data",
        path_str(&csv_a),
        "--config",
        path_str(&config),
        "--out",
        path_str(&dir.join("fit.json")),
    ]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn shuffled_rows_produce_identical_fit() {
    let dir = work_dir("shuffle");
    let spec = dir.join("spec.json");
    write(&spec, &sim_spec(77));
    let csv = dir.join("data.csv");
    let output = run(&["simulate", "--config", path_str(&spec), "--out", path_str(&csv)]);
    assert_eq!(exit_code(&output), 0);

    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let header = lines.remove(0);
    lines.reverse();
    lines.rotate_left(5);
    let shuffled_path = dir.join("shuffled.csv");
    write(&shuffled_path, &format!("{header}\n{}\n", lines.join("\n")));

    let config = dir.join("config.json");
    write(&config, &poisson_fit_config());
    let out_a = dir.join("fit_sorted.json");
    let out_b = dir.join("fit_shuffled.json");
    for (data, out) in [(&csv, &out_a), (&shuffled_path, &out_b)] {
        let output = run(&[
            "fit",
            "--data",
            path_str(data),
            "--config",
            path_str(&config),
            "--out",
            path_str(out),
        ]);
        assert_eq!(exit_code(&output), 0);
    }
    assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());
}

#[test]
fn cli_fit_matches_library_api() {
    // the CLI is a thin shell: replaying the same scenario through the
    // library reproduces the written estimates exactly
    let dir = work_dir("parity");
    let spec_path = dir.join("spec.json");
    write(&spec_path, &sim_spec(4242));
    let csv = dir.join("data.csv");
    let output = run(&[
        "simulate",
        "--config",
        path_str(&spec_path),
        "--out",
        path_str(&csv),
    ]);
    assert_eq!(exit_code(&output), 0);
    let config = dir.join("config.json");
    write(&config, &poisson_fit_config());
    let out = dir.join("fit.json");
    let output = run(&[
        "fit",
        "--data",
        path_str(&csv),
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(exit_code(&output), 0);
    let fit_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();

    // library path on the identical data (CSV floats round-trip exactly)
    let layout = panel_glmm::PanelLayout::new(6, 4).unwrap();
    let spec = panel_glmm::SimSpec64 {
        layout,
        params: panel_glmm::ModelParams64::new(
            ndarray::array![0.4, 0.5, -0.3],
            0.2,
            0.1,
            0.4,
        )
        .unwrap(),
        family: panel_glmm::FamilyLink64::PoissonLog,
        x_gen: panel_glmm::simulate::XGenerator {
            n_features: 2,
            intercept: true,
            pairwise_correlation: None,
        },
        seed: 4242,
    };
    let panel = panel_glmm::gen_panel(&spec).unwrap();
    let designs = panel_glmm::build_designs(layout, panel.x).unwrap();
    let fit_config = panel_glmm::FitConfig64 {
        lambda_grid: vec![0.0, 0.01, 0.1, 1.0],
        max_outer_iter: 100,
        tol: 1e-7,
        penalty: panel_glmm::ridge_em::PenaltyMask::UnpenalizedFirstColumn,
        ..panel_glmm::FitConfig64::default()
    };
    let lib = panel_glmm::fit(
        &panel.y.view(),
        &designs,
        &panel_glmm::FamilyLink64::PoissonLog,
        &fit_config,
        None,
    )
    .unwrap();
    let cli_beta: Vec<f64> = fit_json["params"]["beta"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(cli_beta.len(), lib.params.beta.len());
    for (a, b) in cli_beta.iter().zip(lib.params.beta.iter()) {
        assert_eq!(a, b, "CLI and library estimates must match exactly");
    }
    assert_eq!(fit_json["params"]["rho"].as_f64().unwrap(), lib.params.rho);
    assert_eq!(fit_json["n_iter"].as_u64().unwrap() as usize, lib.n_iter);
}

#[test]
fn fit_hd_wide_csv_and_cv_table() {
    let dir = work_dir("fit-hd");
    // p = 3·n wide design written directly
    let n_ind = 4;
    let n_time = 3;
    let n = n_ind * n_time;
    let p = 3 * n;
    let mut csv = String::from("id,time,y");
    for j in 0..p {
        csv.push_str(&format!(",x{}", j + 1));
    }
    csv.push('\n');
    let mut state = 123456789u64;
    let mut next = || {
        // small deterministic LCG for test data
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    for a in 0..n_ind {
        for t in 0..n_time {
            csv.push_str(&format!("{},{},{:.6}", a + 1, t + 1, next() + 0.5));
            for _ in 0..p {
                csv.push_str(&format!(",{:.6}", next()));
            }
            csv.push('\n');
        }
    }
    let data = dir.join("wide.csv");
    write(&data, &csv);
    let config = dir.join("config.json");
    write(
        &config,
        &serde_json::json!({
            "family": "gaussian",
            "link": "identity",
            "seed": 5,
            "fit": {"max_outer_iter": 15, "tol": 1e-4},
            "sc": {
                "s": 0.5, "l": 1.0, "n_components": 2,
                "cv_folds": 2,
                "n_restarts": 2, "max_opt_iter": 40
            }
        })
        .to_string(),
    );
    let out = dir.join("fit.json");
    let output = run(&[
        "fit-hd",
        "--data",
        path_str(&data),
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(value["hd"]["n_components"], 2);
    assert_eq!(value["hd"]["selected_by_cv"], false);
    assert_eq!(value["params"]["beta"].as_array().unwrap().len(), p + 1);

    // candidate grids with more than one entry trigger cross-validation;
    // the CV table carries |s|·|l|·|K|·folds rows
    write(
        &config,
        &serde_json::json!({
            "family": "gaussian",
            "link": "identity",
            "seed": 5,
            "fit": {"max_outer_iter": 10, "tol": 1e-4},
            "sc": {
                "cv_folds": 2,
                "s_grid": [0.2, 0.8], "l_grid": [1.0], "k_grid": [1],
                "n_restarts": 2, "max_opt_iter": 30
            }
        })
        .to_string(),
    );
    let output = run(&[
        "fit-hd",
        "--data",
        path_str(&data),
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(value["hd"]["selected_by_cv"], true);
    assert_eq!(value["hd"]["cv_table"].as_array().unwrap().len(), 2 * 1 * 1 * 2);
}

fn study_config() -> String {
    serde_json::json!({
        "flavor": "ridge",
        "family": "poisson",
        "link": "log",
        "beta": [0.3, 0.4],
        "sigma1_sq": 0.2,
        "sigma2_sq": 0.1,
        "rho": 0.3,
        "intercept": true,
        "cells": [
            {"n_individuals": 5, "n_times": 3},
            {"n_individuals": 7, "n_times": 4}
        ],
        "n_replicates": 2,
        "seed": 99,
        "fit": {
            "lambda_grid": [0.0, 0.1],
            "max_outer_iter": 50,
            "tol": 1e-6
        }
    })
    .to_string()
}

#[test]
fn study_outputs_and_row_counts() {
    let dir = work_dir("study");
    let config = dir.join("study.json");
    write(&config, &study_config());
    let out = dir.join("result.json");
    let csv = dir.join("result.csv");
    let output = run(&[
        "study",
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
        "--csv",
        path_str(&csv),
    ]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    // rows = cells × replicates × parameters (+ header)
    let n_params = 2 + 3;
    assert_eq!(text.lines().count(), 1 + 2 * 2 * n_params);
    let value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(value["cells"].as_array().unwrap().len(), 2);
    assert_eq!(value["n_replicates"], 2);

    // single-cell single-replicate study collapses to one fit's diagnostics
    let mini = dir.join("mini.json");
    write(
        &mini,
        &serde_json::json!({
            "flavor": "ridge",
            "family": "poisson",
            "link": "log",
            "beta": [0.3, 0.4],
            "sigma1_sq": 0.2,
            "sigma2_sq": 0.1,
            "rho": 0.3,
            "cells": [{"n_individuals": 5, "n_times": 3}],
            "n_replicates": 1,
            "seed": 7,
            "fit": {"lambda_grid": [0.1], "max_outer_iter": 40}
        })
        .to_string(),
    );
    let out_mini = dir.join("mini_result.json");
    let csv_mini = dir.join("mini_result.csv");
    let output = run(&[
        "study",
        "--config",
        path_str(&mini),
        "--out",
        path_str(&out_mini),
        "--csv",
        path_str(&csv_mini),
    ]);
    assert_eq!(exit_code(&output), 0);
    let text = std::fs::read_to_string(&csv_mini).unwrap();
    assert_eq!(text.lines().count(), 1 + n_params);
}

#[test]
fn study_total_failure_exits_1() {
    // every replicate trips the Poisson mean-overflow guard → runtime failure
    let dir = work_dir("study-fail");
    let config = dir.join("study.json");
    write(
        &config,
        &serde_json::json!({
            "flavor": "ridge",
            "family": "poisson",
            "link": "log",
            "beta": [25.0, 0.4],
            "sigma1_sq": 0.2,
            "sigma2_sq": 0.1,
            "rho": 0.3,
            "cells": [{"n_individuals": 4, "n_times": 3}],
            "n_replicates": 2,
            "seed": 1,
            "fit": {"lambda_grid": [0.1]}
        })
        .to_string(),
    );
    let output = run(&[
        "study",
        "--config",
        path_str(&config),
        "--out",
        path_str(&dir.join("result.json")),
    ]);
    assert_eq!(exit_code(&output), 1);
}
