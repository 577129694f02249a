#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub fn demads(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demads"))
        .args(args)
        .current_dir(dir)
        .env("DEMADS_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = demads(dir, args);
    assert!(
        out.status.success(),
        "demads {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn write(dir: &Path, name: &str, contents: &str) {
    fs::write(dir.join(name), contents).unwrap();
}

/// Every regular file under `root`, relative path and bytes, sorted by path.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Grids, a 35-day scenario with an inverted inverter from day 20 and the
/// configs of every downstream command, written into `dir`.
pub fn pipeline_inputs(dir: &Path, pretrain_days: u32, epochs: usize) {
    ok(
        dir,
        &[
            "gen-grid",
            "--buses",
            "10",
            "--pv-buses",
            "1",
            "--seed",
            "31",
            "--out",
            "site",
        ],
    );
    for s in ["41", "42", "43"] {
        ok(
            dir,
            &[
                "gen-grid",
                "--buses",
                "10",
                "--pv-buses",
                "2",
                "--seed",
                s,
                "--out",
                &format!("pre{s}"),
            ],
        );
    }
    let grid: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("site/grid.json")).unwrap()).unwrap();
    let bus = grid["inverters"][0]["bus"].as_u64().unwrap();
    write(
        dir,
        "scenario.json",
        &format!(
            r#"{{"grid": "site/grid.json", "days": 35, "seed": 77, "highres_step_s": 300,
                "schedule": {{"inverter_bus": {bus}, "variant": "Inverted", "start_day": 20}}}}"#
        ),
    );
    write(
        dir,
        "estimator.json",
        r#"{"grid": "site/grid.json", "seed": 8}"#,
    );
    write(
        dir,
        "detector.json",
        &format!(
            r#"{{"grids": ["pre41/grid.json", "pre42/grid.json", "pre43/grid.json"],
                "days": {pretrain_days}, "seed": 1,
                "train": {{"optimizer": {{"Adam": {{"lr": 0.003, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}}}},
                          "epochs": {epochs}, "batch_size": 16, "loss": "CrossEntropy", "seed": 0}}}}"#
        ),
    );
    write(
        dir,
        "monitor.json",
        &format!(
            r#"{{"grid": "site/grid.json", "measurements": "meas", "estimator": "est/estimator.json",
                "detectors": [{{"bus": {bus}, "model": "det/detector.json"}}]}}"#
        ),
    );
    write(
        dir,
        "evaluate.json",
        r#"{"report": "mon/report.jsonl", "measurements": "meas"}"#,
    );
}

pub fn run_pipeline(dir: &Path) {
    ok(
        dir,
        &["simulate", "--config", "scenario.json", "--out", "meas"],
    );
    ok(
        dir,
        &[
            "train-estimator",
            "--config",
            "estimator.json",
            "--out",
            "est",
        ],
    );
    ok(
        dir,
        &[
            "pretrain-detector",
            "--config",
            "detector.json",
            "--out",
            "det",
        ],
    );
    ok(
        dir,
        &["monitor", "--config", "monitor.json", "--out", "mon"],
    );
    ok(
        dir,
        &["evaluate", "--config", "evaluate.json", "--out", "eval"],
    );
}
