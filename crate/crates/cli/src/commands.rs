//! One function per subcommand.
//!
//! Seeds: a command's master seed (config `seed`, overridden by `--seed`)
//! feeds `rng::derive_seed(master, tag, indices)` with the tags listed next
//! to each stage below.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use demads_core::eval::{run_benchmark, BenchmarkConfig, MetricsReport};
use demads_core::features::ClassLabel;
use demads_core::grid::generate::{generate_radial_grid, GridGenParams};
use demads_core::grid::GridFile;
use demads_core::load_estimation::{
    build_training_set, train_estimator, LoadEstimator, TrainingSetParams,
};
use demads_core::orchestrator::{
    monitor_period, report_jsonl, report_markdown, CentralPipeline, DayOutcome, DeviceDetector,
    ReportLine,
};
use demads_core::rng::derive_seed;
use demads_core::rt::{pretrain, simulate_labeled_windows, RtModel};
use demads_core::scenario::{
    household_loads, read_measurement_set, run_scenario, write_measurement_set, GridContext,
    MeasurementMetadata, MeasurementSet, ScenarioConfig,
};
use serde::Serialize;
use serde_json::Value;

use crate::config::{
    read_json, read_text, resolve, DetectorJob, EstimatorJob, EvaluateJob, MonitorJob,
};
use crate::error::CliError;
use crate::{require_out, Cli, Command, Format};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenGrid {
            buses,
            feeders,
            pv_buses,
        } => gen_grid(cli, *buses, *feeders, *pv_buses),
        Command::Simulate => simulate(cli),
        Command::TrainEstimator => train_estimator_cmd(cli),
        Command::PretrainDetector => pretrain_detector(cli),
        Command::Monitor => monitor(cli),
        Command::Benchmark => benchmark(cli),
        Command::Evaluate => evaluate(cli),
    }
}

fn require_config(cli: &Cli) -> Result<&PathBuf, CliError> {
    cli.config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config <path> is required".into()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes") + "\n"
}

fn echo(
    cli: &Cli,
    csv: impl FnOnce() -> String,
    md: impl FnOnce() -> String,
    json: impl FnOnce() -> String,
) {
    let text = match cli.format {
        None => return,
        Some(Format::Csv) => csv(),
        Some(Format::Md) => md(),
        Some(Format::Json) => json(),
    };
    print!("{text}");
}

fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        s += &format!("{},{l}\n", i + 1);
    }
    s
}

fn gen_grid(
    cli: &Cli,
    buses: Option<usize>,
    feeders: Option<usize>,
    pv_buses: Option<usize>,
) -> Result<(), CliError> {
    let mut params = match &cli.config {
        Some(path) => read_json::<GridGenParams>(path)?,
        None => GridGenParams::new(buses.unwrap_or(10), 2, 1, 0),
    };
    params.buses = buses.unwrap_or(params.buses);
    params.feeders = feeders.unwrap_or(params.feeders);
    params.pv_buses = pv_buses.unwrap_or(params.pv_buses);
    params.seed = cli.seed.unwrap_or(params.seed);
    if params.buses < 2 {
        return Err(CliError::Usage("--buses must be at least 2".into()));
    }
    if params.feeders < 1 || params.feeders >= params.buses {
        return Err(CliError::Usage("--feeders must lie in 1..buses".into()));
    }
    let grid = generate_radial_grid(&params)?;
    let out = require_out(cli)?;
    create_dir(out)?;
    let json = grid.to_json() + "\n";
    write_file(&out.join("grid.json"), &json)?;
    log::info!(
        "grid {} with {} buses",
        grid.fingerprint(),
        grid.buses.len()
    );
    echo(
        cli,
        || {
            let mut s = String::from("from,to,r_pu,x_pu\n");
            for l in &grid.lines {
                s += &format!("{},{},{},{}\n", l.from, l.to, l.r_pu, l.x_pu);
            }
            s
        },
        || {
            format!(
                "grid `{}`: {} buses, {} inverters\n",
                grid.fingerprint(),
                grid.buses.len(),
                grid.inverters.len()
            )
        },
        || json.clone(),
    );
    Ok(())
}

/// Scenario config with `grid` given as a path and `loads` optional
/// (household loads on every bus when absent).
fn scenario_from_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let mut v: Value = read_json(path)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| CliError::parse(path, "expected a JSON object"))?;
    let grid_path = obj
        .get("grid")
        .and_then(Value::as_str)
        .ok_or_else(|| CliError::parse(path, "`grid` must be a path"))?;
    let grid = GridFile::load(resolve(path, Path::new(grid_path)))?;
    if let Some(s) = seed {
        obj.insert("seed".into(), s.into());
    }
    let seed = obj
        .get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| CliError::parse(path, "missing integer `seed`"))?;
    if !obj.contains_key("loads") {
        let loads = household_loads(grid.buses.len(), derive_seed(seed, "loads", &[]));
        obj.insert(
            "loads".into(),
            serde_json::to_value(loads).expect("loads serialize"),
        );
    }
    obj.insert(
        "grid".into(),
        serde_json::to_value(&grid).expect("grid serializes"),
    );
    serde_json::from_value(v).map_err(|e| CliError::parse(path, e))
}

fn voltage_summary(set: &MeasurementSet, md: bool) -> String {
    let mut s = if md {
        String::from("| day | min V (pu) | max V (pu) |\n|---|---|---|\n")
    } else {
        String::from("day,min_v_pu,max_v_pu\n")
    };
    for d in &set.days {
        let vs = d.meters.values().flatten();
        let lo = vs.clone().fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = vs.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        s += &if md {
            format!("| {} | {lo:.5} | {hi:.5} |\n", d.day)
        } else {
            format!("{},{lo},{hi}\n", d.day)
        };
    }
    s
}

/// Tags: `loads` (household models when the config has none).
fn simulate(cli: &Cli) -> Result<(), CliError> {
    let config = scenario_from_config(require_config(cli)?, cli.seed)?;
    let out = require_out(cli)?;
    let set = run_scenario(&config)?;
    write_measurement_set(&set, out)?;
    log::info!("simulated {} days into {}", set.days.len(), out.display());
    echo(
        cli,
        || voltage_summary(&set, false),
        || voltage_summary(&set, true),
        || pretty(&set.metadata),
    );
    Ok(())
}

#[derive(Serialize)]
struct EstimatorSummary<'a> {
    grid_fingerprint: &'a str,
    holdout_mae_kw: f64,
    loss_history: &'a [f64],
}

/// Tags: `estimator-set`, `estimator-init`, `estimator-shuffle`.
fn train_estimator_cmd(cli: &Cli) -> Result<(), CliError> {
    let path = require_config(cli)?;
    let job: EstimatorJob = read_json(path)?;
    let out = require_out(cli)?;
    let seed = cli.seed.unwrap_or(job.seed);
    let grid = GridFile::load(resolve(path, &job.grid))?;
    let ctx = GridContext::new(&grid)?;
    let params = TrainingSetParams::new(
        job.samples,
        job.load_range_kw,
        derive_seed(seed, "estimator-set", &[]),
    );
    let mut cfg = job.estimator.clone();
    cfg.init_seed = derive_seed(seed, "estimator-init", &[]);
    cfg.train.seed = derive_seed(seed, "estimator-shuffle", &[]);
    let set = build_training_set(&ctx, &params)?;
    let est = train_estimator(&set, &cfg)?;
    create_dir(out)?;
    est.save(&out.join("estimator.json"))?;
    let summary = EstimatorSummary {
        grid_fingerprint: &est.topology_fingerprint.0,
        holdout_mae_kw: est.holdout_mae,
        loss_history: &est.loss_history,
    };
    write_file(&out.join("estimator_report.json"), &pretty(&summary))?;
    log::info!("estimator holdout MAE {:.4} kW", est.holdout_mae);
    echo(
        cli,
        || loss_csv(&est.loss_history),
        || format!("holdout MAE: {:.4} kW per bus\n", est.holdout_mae),
        || pretty(&summary),
    );
    Ok(())
}

/// Tags: `pretrain-scenario` (per grid index), `rt-init`, `rt-shuffle`.
fn pretrain_detector(cli: &Cli) -> Result<(), CliError> {
    let path = require_config(cli)?;
    let job: DetectorJob = read_json(path)?;
    let out = require_out(cli)?;
    let seed = cli.seed.unwrap_or(job.seed);
    let mut windows = Vec::new();
    for (i, g) in job.grids.iter().enumerate() {
        let grid = GridFile::load(resolve(path, g))?;
        let mut sc = ScenarioConfig::standard(
            grid,
            job.days,
            derive_seed(seed, "pretrain-scenario", &[i as u64]),
        );
        sc.params.highres_step_s = job.highres_step_s;
        windows.extend(simulate_labeled_windows(&sc, job.use_case)?);
    }
    let model = RtModel::new(
        job.rt.clone(),
        job.use_case,
        derive_seed(seed, "rt-init", &[]),
    )?;
    let mut train = job.train.clone();
    train.seed = derive_seed(seed, "rt-shuffle", &[]);
    let (model, report) = pretrain(&model, &windows, &train)?;
    create_dir(out)?;
    model.save(&out.join("detector.json"))?;
    write_file(&out.join("pretrain_report.json"), &pretty(&report))?;
    log::info!(
        "pretrained on {} windows from {} grids",
        windows.len(),
        report.grids
    );
    echo(
        cli,
        || loss_csv(&report.loss_history),
        || {
            format!(
                "{} grids, {} correct and {} {} windows, final loss {:.4}\n",
                report.grids,
                report.correct_windows,
                report.malfunction_windows,
                job.use_case,
                report.loss_history.last().copied().unwrap_or(f64::NAN)
            )
        },
        || pretty(&report),
    );
    Ok(())
}

fn outcomes_csv(outcomes: &[DayOutcome]) -> String {
    let mut s = String::from("day,transformer_verdict,fusion,flags,window_size\n");
    for o in outcomes {
        let flags: Vec<String> = o
            .flags
            .iter()
            .map(|f| format!("{}@{}", f.use_case, f.bus))
            .collect();
        s += &format!(
            "{},{},{},{},{}\n",
            o.report.day,
            o.report.transformer_verdict,
            o.fusion.name(),
            flags.join(" "),
            o.report.window_size_after
        );
    }
    s
}

/// Tags: `svm` (only when `--seed` is given).
fn monitor(cli: &Cli) -> Result<(), CliError> {
    let path = require_config(cli)?;
    let job: MonitorJob = read_json(path)?;
    let out = require_out(cli)?;
    let grid = GridFile::load(resolve(path, &job.grid))?;
    let ctx = GridContext::new(&grid)?;
    let set = read_measurement_set(&resolve(path, &job.measurements))?;
    if set.metadata.grid_fingerprint != ctx.fingerprint {
        return Err(CliError::Fingerprint(format!(
            "measurements were recorded on grid {}, config names grid {}",
            set.metadata.grid_fingerprint, ctx.fingerprint
        )));
    }
    let estimator = LoadEstimator::load(&resolve(path, &job.estimator))?;
    let mut cfg = job.orchestrator.clone();
    if let Some(s) = cli.seed {
        cfg.svm.seed = derive_seed(s, "svm", &[]);
    }
    let pipeline = CentralPipeline::new(&ctx, &estimator, &cfg, set.metadata.highres_step_s)?;
    let mut detectors = Vec::with_capacity(job.detectors.len());
    for d in &job.detectors {
        if !set.metadata.meter_buses.contains(&d.bus) {
            return Err(CliError::Parse(format!(
                "no meter at detector bus {}",
                d.bus
            )));
        }
        detectors.push(DeviceDetector {
            bus: d.bus,
            model: RtModel::load(&resolve(path, &d.model))?,
            threshold: d.threshold.unwrap_or(cfg.detector_threshold),
        });
    }
    let outcomes = monitor_period(&set, &pipeline, &detectors)?;
    create_dir(out)?;
    let jsonl = report_jsonl(&outcomes);
    let md = report_markdown(&outcomes);
    write_file(&out.join("report.jsonl"), &jsonl)?;
    write_file(&out.join("report.md"), &md)?;
    echo(
        cli,
        || outcomes_csv(&outcomes),
        || md.clone(),
        || jsonl.clone(),
    );
    Ok(())
}

fn benchmark(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => read_json::<BenchmarkConfig>(path)?,
        None => BenchmarkConfig::default(),
    };
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    let out = require_out(cli)?;
    let result = run_benchmark(&cfg)?;
    result.write(out)?;
    echo(
        cli,
        || result.to_csv(),
        || result.to_markdown(),
        || pretty(&result),
    );
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    days: usize,
    transformer: MetricsReport,
    fusion: MetricsReport,
}

fn metrics_csv(e: &Evaluation) -> String {
    let mut s = String::from("scope,label,precision,recall,f,support,undefined,macro_f\n");
    for (scope, m) in [("transformer", &e.transformer), ("fusion", &e.fusion)] {
        for k in &m.per_class {
            s += &format!(
                "{scope},{},{:.6},{:.6},{:.6},{},{},{:.6}\n",
                k.label, k.precision, k.recall, k.f, k.support, k.undefined, m.macro_f
            );
        }
    }
    s
}

fn metrics_md(e: &Evaluation) -> String {
    let mut s = String::from(
        "| scope | class | precision | recall | F | support |\n|---|---|---|---|---|---|\n",
    );
    for (scope, m) in [("transformer", &e.transformer), ("fusion", &e.fusion)] {
        for k in &m.per_class {
            s += &format!(
                "| {scope} | {} | {:.3} | {:.3} | {:.3}{} | {} |\n",
                k.label,
                k.precision,
                k.recall,
                k.f,
                if k.undefined { " (undefined)" } else { "" },
                k.support
            );
        }
        s += &format!("| {scope} | macro | | | {:.3} | |\n", m.macro_f);
    }
    s
}

/// Ground truth per monitored day comes from the measurement metadata's
/// malfunction schedule. Fusion verdicts are scored as Correct vs Abnormal.
fn evaluate(cli: &Cli) -> Result<(), CliError> {
    let path = require_config(cli)?;
    let job: EvaluateJob = read_json(path)?;
    let out = require_out(cli)?;
    let report_path = resolve(path, &job.report);
    let meta_path = resolve(path, &job.measurements).join("metadata.json");
    let meta: MeasurementMetadata = read_json(&meta_path)?;
    let lines = read_text(&report_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str::<ReportLine>(l).map_err(|e| CliError::parse(&report_path, e))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let truth = |day: u32| match &meta.schedule {
        Some(s) if day >= s.start_day => ClassLabel::from(s.variant),
        _ => ClassLabel::Correct,
    };
    let predicted: Vec<ClassLabel> = lines.iter().map(|l| l.transformer_verdict).collect();
    let grouped = predicted.contains(&ClassLabel::Abnormal);
    let truths: Vec<ClassLabel> = lines
        .iter()
        .map(|l| {
            if grouped {
                truth(l.day).grouped()
            } else {
                truth(l.day)
            }
        })
        .collect();
    let labels: Vec<ClassLabel> = predicted
        .iter()
        .chain(&truths)
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let fused: Vec<ClassLabel> = lines
        .iter()
        .map(|l| {
            if l.fusion.is_malfunction() {
                ClassLabel::Abnormal
            } else {
                ClassLabel::Correct
            }
        })
        .collect();
    let fused_truths: Vec<ClassLabel> = lines.iter().map(|l| truth(l.day).grouped()).collect();
    let eval = Evaluation {
        days: lines.len(),
        transformer: MetricsReport::evaluate(&predicted, &truths, &labels)?,
        fusion: MetricsReport::evaluate(
            &fused,
            &fused_truths,
            &[ClassLabel::Correct, ClassLabel::Abnormal],
        )?,
    };
    create_dir(out)?;
    write_file(&out.join("metrics.json"), &pretty(&eval))?;
    write_file(&out.join("metrics.csv"), &metrics_csv(&eval))?;
    write_file(&out.join("metrics.md"), &metrics_md(&eval))?;
    echo(
        cli,
        || metrics_csv(&eval),
        || metrics_md(&eval),
        || pretty(&eval),
    );
    Ok(())
}
