//! Acceptance criterion 11: identical seeds yield byte-identical fit.json and
//! study CSVs across repeated runs and across `--threads` settings.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_panel-glmm")
}

fn work_dir(name: &str) -> PathBuf {
    let dir =
        std::env::temp_dir().join(format!("panel-glmm-accept-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(args: &[&str]) {
    let out = Command::new(bin()).args(args).output().expect("binary runs");
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn criterion_11_byte_identical_outputs() {
    let dir = work_dir("determinism");
    let spec = dir.join("spec.json");
    std::fs::write(
        &spec,
        serde_json::json!({
            "n_individuals": 8,
            "n_times": 5,
            "family": "poisson",
            "link": "log",
            "beta": [0.5, 0.4, -0.3],
            "sigma1_sq": 0.2,
            "sigma2_sq": 0.12,
            "rho": 0.5,
            "seed": 2024
        })
        .to_string(),
    )
    .unwrap();
    let data = dir.join("data.csv");
    run_ok(&["simulate", "--config", path_str(&spec), "--out", path_str(&data)]);

    let config = dir.join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "family": "poisson",
            "link": "log",
            "seed": 11,
            "fit": {"lambda_grid": [0.0, 0.05, 0.5], "max_outer_iter": 80, "tol": 1e-7}
        })
        .to_string(),
    )
    .unwrap();
    let mut fit_outputs = Vec::new();
    for (tag, threads) in [("a", "1"), ("b", "1"), ("c", "4")] {
        let out = dir.join(format!("fit_{tag}.json"));
        run_ok(&[
            "fit",
            "--data",
            path_str(&data),
            "--config",
            path_str(&config),
            "--out",
            path_str(&out),
            "--threads",
            threads,
        ]);
        fit_outputs.push(std::fs::read(&out).unwrap());
    }
    let fit_ok = fit_outputs[0] == fit_outputs[1] && fit_outputs[0] == fit_outputs[2];

    let study = dir.join("study.json");
    std::fs::write(
        &study,
        serde_json::json!({
            "flavor": "ridge",
            "family": "poisson",
            "link": "log",
            "beta": [0.4, 0.3],
            "sigma1_sq": 0.2,
            "sigma2_sq": 0.1,
            "rho": 0.4,
            "cells": [
                {"n_individuals": 5, "n_times": 3},
                {"n_individuals": 6, "n_times": 4}
            ],
            "n_replicates": 3,
            "seed": 303,
            "fit": {"lambda_grid": [0.0, 0.1], "max_outer_iter": 50}
        })
        .to_string(),
    )
    .unwrap();
    let mut study_json = Vec::new();
    let mut study_csv = Vec::new();
    for (tag, threads) in [("a", "1"), ("b", "1"), ("c", "4")] {
        let out = dir.join(format!("study_{tag}.json"));
        let csv = dir.join(format!("study_{tag}.csv"));
        run_ok(&[
            "study",
            "--config",
            path_str(&study),
            "--out",
            path_str(&out),
            "--csv",
            path_str(&csv),
            "--threads",
            threads,
        ]);
        study_json.push(std::fs::read(&out).unwrap());
        study_csv.push(std::fs::read(&csv).unwrap());
    }
    let study_ok = study_json[0] == study_json[1]
        && study_json[0] == study_json[2]
        && study_csv[0] == study_csv[1]
        && study_csv[0] == study_csv[2];

    let pass = fit_ok && study_ok;
    println!(
        "acceptance criterion 11 (byte-identical outputs across runs and --threads): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}
