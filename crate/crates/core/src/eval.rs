//! Metrics and the detection benchmark over grid setups and class cases.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::der::ControlCurveVariant;
use crate::features::ClassLabel;
use crate::grid::generate::{generate_radial_grid, GridGenParams};
use crate::grid::GridError;
use crate::load_estimation::{
    build_training_set, train_estimator, EstimatorConfig, EstimatorError, LoadEstimator,
    TrainingSetParams,
};
use crate::orchestrator::{CentralDay, CentralPipeline, OrchestratorConfig, OrchestratorError};
use crate::rng;
use crate::scenario::{simulate_day, ScenarioConfig, ScenarioError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("label {0} is not in the label order")]
    UnknownLabel(ClassLabel),
    #[error("nothing to evaluate")]
    Empty,
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

/// `counts[i][j]`: samples of true label `labels[i]` predicted `labels[j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<ClassLabel>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, i: usize) -> usize {
        self.counts[i].iter().sum()
    }
}

pub fn confusion(
    predictions: &[ClassLabel],
    truths: &[ClassLabel],
    labels: &[ClassLabel],
) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if truths.is_empty() {
        return Err(EvalError::Empty);
    }
    let index = |l: &ClassLabel| {
        labels
            .iter()
            .position(|x| x == l)
            .ok_or(EvalError::UnknownLabel(*l))
    };
    let mut counts = vec![vec![0; labels.len()]; labels.len()];
    for (p, t) in predictions.iter().zip(truths) {
        counts[index(t)?][index(p)?] += 1;
    }
    Ok(ConfusionMatrix {
        labels: labels.to_vec(),
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: ClassLabel,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub support: usize,
    /// Some ratio was 0/0 and was reported as 0.
    pub undefined: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn f_score(m: &ConfusionMatrix, class: usize) -> ClassScore {
    let tp = m.counts[class][class];
    let predicted: usize = m.counts.iter().map(|row| row[class]).sum();
    let actual = m.support(class);
    let (precision, p_undef) = ratio(tp, predicted);
    let (recall, r_undef) = ratio(tp, actual);
    let (f, f_undef) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    ClassScore {
        label: m.labels[class],
        precision,
        recall,
        f,
        support: actual,
        undefined: p_undef || r_undef || f_undef,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassScore>,
    pub macro_f: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let per_class: Vec<ClassScore> = (0..confusion.labels.len())
            .map(|i| f_score(&confusion, i))
            .collect();
        let macro_f = per_class.iter().map(|s| s.f).sum::<f64>() / per_class.len() as f64;
        MetricsReport {
            per_class,
            macro_f,
            confusion,
        }
    }

    pub fn evaluate(
        predictions: &[ClassLabel],
        truths: &[ClassLabel],
        labels: &[ClassLabel],
    ) -> Result<Self, EvalError> {
        Ok(Self::from_confusion(confusion(
            predictions,
            truths,
            labels,
        )?))
    }
}

/// The four class configurations of the detection table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkCase {
    CorrectVsWrong,
    CorrectVsInverted,
    CorrectVsWrongVsInverted,
    CorrectVsAbnormal,
}

impl BenchmarkCase {
    pub const ALL: [BenchmarkCase; 4] = [
        BenchmarkCase::CorrectVsWrong,
        BenchmarkCase::CorrectVsInverted,
        BenchmarkCase::CorrectVsWrongVsInverted,
        BenchmarkCase::CorrectVsAbnormal,
    ];

    pub fn title(self) -> &'static str {
        match self {
            BenchmarkCase::CorrectVsWrong => "correct vs. wrong",
            BenchmarkCase::CorrectVsInverted => "correct vs. inverted",
            BenchmarkCase::CorrectVsWrongVsInverted => "correct vs. wrong vs. inverted",
            BenchmarkCase::CorrectVsAbnormal => "correct vs. abnormal",
        }
    }

    /// Classes simulated as counterparts.
    pub fn malfunctions(self) -> Vec<ClassLabel> {
        match self {
            BenchmarkCase::CorrectVsWrong => vec![ClassLabel::Wrong],
            BenchmarkCase::CorrectVsInverted => vec![ClassLabel::Inverted],
            _ => vec![ClassLabel::Wrong, ClassLabel::Inverted],
        }
    }

    pub fn grouped(self) -> bool {
        self == BenchmarkCase::CorrectVsAbnormal
    }

    /// Label order of the confusion matrix.
    pub fn labels(self) -> Vec<ClassLabel> {
        if self.grouped() {
            vec![ClassLabel::Correct, ClassLabel::Abnormal]
        } else {
            let mut l = vec![ClassLabel::Correct];
            l.extend(self.malfunctions());
            l
        }
    }

    /// Ground-truth variant of each evaluation day, balanced over the
    /// case's labels (Abnormal splits its share between both
    /// malfunctions), in a seeded order.
    pub fn evaluation_variants(self, days: usize, seed: u64) -> Vec<ControlCurveVariant> {
        let mut v: Vec<ControlCurveVariant> = if self.grouped() {
            let half = days / 2;
            let mut v = vec![ControlCurveVariant::Correct; days - half];
            v.extend((0..half).map(|i| {
                if i % 2 == 0 {
                    ControlCurveVariant::Wrong
                } else {
                    ControlCurveVariant::Inverted
                }
            }));
            v
        } else {
            let labels = self.labels();
            (0..days)
                .map(|i| {
                    labels[i % labels.len()]
                        .variant()
                        .expect("simulatable label")
                })
                .collect()
        };
        v.shuffle(&mut rng::substream(seed, "eval-order", &[self as u64]));
        v
    }
}

impl fmt::Display for BenchmarkCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.title())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSetup {
    pub name: String,
    pub grid: GridGenParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub setups: Vec<BenchmarkSetup>,
    pub cases: Vec<BenchmarkCase>,
    pub eval_days: usize,
    /// First day index of the evaluation period; calibration uses the
    /// days before the window ends.
    pub eval_first_day: u32,
    pub highres_step_s: u32,
    pub estimator_samples: usize,
    pub estimator_load_range_kw: (f64, f64),
    pub estimator: EstimatorConfig,
    pub orchestrator: OrchestratorConfig,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            setups: vec![
                BenchmarkSetup {
                    name: "A'".into(),
                    grid: GridGenParams::new(10, 2, 1, 101),
                },
                BenchmarkSetup {
                    name: "B'".into(),
                    grid: GridGenParams::new(16, 3, 1, 202),
                },
            ],
            cases: BenchmarkCase::ALL.to_vec(),
            eval_days: 30,
            eval_first_day: 100,
            highres_step_s: 300,
            estimator_samples: 1500,
            estimator_load_range_kw: (0.0, 4.0),
            estimator: EstimatorConfig::default(),
            orchestrator: OrchestratorConfig::default(),
            seed: 2024,
        }
    }
}

/// Every seed a benchmark run used, derived from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub master_seed: u64,
    pub setups: BTreeMap<String, SetupSeeds>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupSeeds {
    pub grid: u64,
    pub scenario: u64,
    pub estimator_set: u64,
    pub estimator_init: u64,
    pub eval_order: u64,
    pub calibration_days: (u32, u32),
    pub eval_days: (u32, u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCell {
    pub setup: String,
    pub case: BenchmarkCase,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub cells: Vec<BenchmarkCell>,
    pub seeds: SeedManifest,
}

impl BenchmarkResult {
    pub fn cell(&self, setup: &str, case: BenchmarkCase) -> Option<&BenchmarkCell> {
        self.cells
            .iter()
            .find(|c| c.setup == setup && c.case == case)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("setup,case,label,precision,recall,f,support,undefined,macro_f\n");
        for c in &self.cells {
            for k in &c.metrics.per_class {
                s += &format!(
                    "{},{},{},{:.6},{:.6},{:.6},{},{},{:.6}\n",
                    c.setup,
                    c.case.title(),
                    k.label,
                    k.precision,
                    k.recall,
                    k.f,
                    k.support,
                    k.undefined,
                    c.metrics.macro_f
                );
            }
        }
        s
    }

    /// Cases as rows, setups as columns, macro-F in each cell.
    pub fn to_markdown(&self) -> String {
        let mut setups: Vec<&str> = Vec::new();
        let mut cases: Vec<BenchmarkCase> = Vec::new();
        for c in &self.cells {
            if !setups.contains(&c.setup.as_str()) {
                setups.push(&c.setup);
            }
            if !cases.contains(&c.case) {
                cases.push(c.case);
            }
        }
        let mut s = format!("| Classes | {} |\n|---|", setups.join(" | "));
        s += &"---|".repeat(setups.len());
        s.push('\n');
        for case in cases {
            s += &format!("| {} |", case.title());
            for setup in &setups {
                match self.cell(setup, case) {
                    Some(c) => s += &format!(" {:.2} |", c.metrics.macro_f),
                    None => s += " - |",
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |path: &Path, e: std::io::Error| EvalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for (name, body) in [
            ("results.csv", self.to_csv()),
            ("results.md", self.to_markdown()),
            (
                "seeds.json",
                serde_json::to_string_pretty(&self.seeds).expect("manifest serializes") + "\n",
            ),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| io(&p, e))?;
        }
        Ok(())
    }
}

struct PreparedSetup {
    name: String,
    scenario: ScenarioConfig,
    ctx: crate::scenario::GridContext,
    estimator: LoadEstimator,
    seeds: SetupSeeds,
}

fn prepare(
    setup: &BenchmarkSetup,
    config: &BenchmarkConfig,
    index: usize,
) -> Result<PreparedSetup, EvalError> {
    let i = index as u64;
    let window = config.orchestrator.window_days as u32;
    let seeds = SetupSeeds {
        grid: setup.grid.seed,
        scenario: rng::derive_seed(config.seed, "bench-scenario", &[i]),
        estimator_set: rng::derive_seed(config.seed, "bench-estimator-set", &[i]),
        estimator_init: rng::derive_seed(config.seed, "bench-estimator-init", &[i]),
        eval_order: rng::derive_seed(config.seed, "bench-eval-order", &[i]),
        calibration_days: (0, window),
        eval_days: (
            config.eval_first_day,
            config.eval_first_day + config.eval_days as u32,
        ),
    };
    if config.eval_first_day < window {
        return Err(EvalError::InvalidConfig(
            "evaluation days overlap the calibration window".into(),
        ));
    }
    let grid = generate_radial_grid(&setup.grid)?;
    let mut scenario = ScenarioConfig::standard(grid, window, seeds.scenario);
    scenario.params.highres_step_s = config.highres_step_s;
    let ctx = scenario.validate()?;
    let set = build_training_set(
        &ctx,
        &TrainingSetParams::new(
            config.estimator_samples,
            config.estimator_load_range_kw,
            seeds.estimator_set,
        ),
    )?;
    let mut est_cfg = config.estimator.clone();
    est_cfg.init_seed = seeds.estimator_init;
    est_cfg.train.seed = seeds.estimator_init;
    let estimator = train_estimator(&set, &est_cfg)?;
    log::info!(
        "setup {}: estimator holdout MAE {:.3} kW",
        setup.name,
        estimator.holdout_mae
    );
    Ok(PreparedSetup {
        name: setup.name.clone(),
        scenario,
        ctx,
        estimator,
        seeds,
    })
}

fn run_cell(
    p: &PreparedSetup,
    case: BenchmarkCase,
    config: &BenchmarkConfig,
) -> Result<BenchmarkCell, EvalError> {
    let mut orch = config.orchestrator.clone();
    orch.malfunction_classes = case.malfunctions();
    orch.group_abnormal = case.grouped();
    let pipeline = CentralPipeline::new(&p.ctx, &p.estimator, &orch, config.highres_step_s)?;
    let correct = vec![ControlCurveVariant::Correct; p.ctx.inverters.len()];

    let calibration = (p.seeds.calibration_days.0..p.seeds.calibration_days.1)
        .into_par_iter()
        .map(|day| {
            let (m, _) = simulate_day(&p.scenario, &p.ctx, day, &correct)?;
            Ok(CentralDay::from(&m))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let state = pipeline.calibrate(&calibration)?;

    let variants = case.evaluation_variants(config.eval_days, p.seeds.eval_order);
    let (predictions, truths): (Vec<ClassLabel>, Vec<ClassLabel>) = variants
        .par_iter()
        .enumerate()
        .map(|(k, &variant)| {
            let day = config.eval_first_day + k as u32;
            debug_assert!(day >= p.seeds.calibration_days.1);
            let (m, _) = simulate_day(
                &p.scenario,
                &p.ctx,
                day,
                &vec![variant; p.ctx.inverters.len()],
            )?;
            let predicted = state.classify(&pipeline.condense(&CentralDay::from(&m))?)?;
            let truth = ClassLabel::from(variant);
            Ok(if case.grouped() {
                (predicted.grouped(), truth.grouped())
            } else {
                (predicted, truth)
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?
        .into_iter()
        .unzip();
    let metrics = MetricsReport::evaluate(&predictions, &truths, &case.labels())?;
    log::info!("{} / {}: macro-F {:.3}", p.name, case, metrics.macro_f);
    Ok(BenchmarkCell {
        setup: p.name.clone(),
        case,
        metrics,
    })
}

/// For every setup: train a load estimator, then per case calibrate the
/// transformer-level classifier on correct days and score it on balanced,
/// disjoint evaluation days.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkResult, EvalError> {
    if config.eval_days == 0 {
        return Err(EvalError::Empty);
    }
    if config.setups.is_empty() || config.cases.is_empty() {
        return Err(EvalError::InvalidConfig("no setups or cases".into()));
    }
    let prepared = config
        .setups
        .iter()
        .enumerate()
        .map(|(i, s)| prepare(s, config, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cells = Vec::new();
    for p in &prepared {
        for &case in &config.cases {
            cells.push(run_cell(p, case, config)?);
        }
    }
    Ok(BenchmarkResult {
        cells,
        seeds: SeedManifest {
            master_seed: config.seed,
            setups: prepared.into_iter().map(|p| (p.name, p.seeds)).collect(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ClassLabel::*;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let t = [Correct, Wrong, Inverted, Wrong];
        let m = confusion(&t, &t, &[Correct, Wrong, Inverted]).unwrap();
        assert_eq!(m.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let r = MetricsReport::from_confusion(m);
        assert!(r.per_class.iter().all(|s| s.f == 1.0 && !s.undefined));
        assert_eq!(r.macro_f, 1.0);
    }

    #[test]
    fn constant_prediction_fills_one_column() {
        let t = [Correct, Wrong, Inverted, Wrong];
        let m = confusion(&[Correct; 4], &t, &[Correct, Wrong, Inverted]).unwrap();
        for row in &m.counts {
            assert_eq!(row[1] + row[2], 0);
        }
        assert_eq!((0..3).map(|i| m.support(i)).collect::<Vec<_>>(), [1, 2, 1]);
    }

    #[test]
    fn half_precision_full_recall() {
        // Class 0: TP 1, FP 1, FN 0.
        let m = confusion(&[Correct, Correct], &[Correct, Wrong], &[Correct, Wrong]).unwrap();
        let s = f_score(&m, 0);
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_flagged_zero() {
        let m = confusion(&[Correct], &[Correct], &[Correct, Inverted]).unwrap();
        let s = f_score(&m, 1);
        assert_eq!((s.precision, s.recall, s.f), (0.0, 0.0, 0.0));
        assert!(s.undefined);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            confusion(&[Correct], &[], &[Correct]),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion(&[], &[], &[Correct]),
            Err(EvalError::Empty)
        ));
        assert!(matches!(
            confusion(&[Abnormal], &[Correct], &[Correct]),
            Err(EvalError::UnknownLabel(Abnormal))
        ));
        let cfg = BenchmarkConfig {
            eval_days: 0,
            ..BenchmarkConfig::default()
        };
        assert!(matches!(run_benchmark(&cfg), Err(EvalError::Empty)));
    }

    #[test]
    fn evaluation_sets_are_balanced() {
        for case in BenchmarkCase::ALL {
            let v = case.evaluation_variants(30, 1);
            let count = |x| v.iter().filter(|&&y| y == x).count();
            match case {
                BenchmarkCase::CorrectVsWrong => assert_eq!(
                    (
                        count(ControlCurveVariant::Correct),
                        count(ControlCurveVariant::Wrong)
                    ),
                    (15, 15)
                ),
                BenchmarkCase::CorrectVsInverted => {
                    assert_eq!(count(ControlCurveVariant::Inverted), 15)
                }
                BenchmarkCase::CorrectVsWrongVsInverted => assert_eq!(
                    (
                        count(ControlCurveVariant::Correct),
                        count(ControlCurveVariant::Wrong),
                        count(ControlCurveVariant::Inverted)
                    ),
                    (10, 10, 10)
                ),
                BenchmarkCase::CorrectVsAbnormal => assert_eq!(
                    (
                        count(ControlCurveVariant::Correct),
                        count(ControlCurveVariant::Wrong),
                        count(ControlCurveVariant::Inverted)
                    ),
                    (15, 8, 7)
                ),
            }
        }
    }

    fn labels_strategy() -> impl Strategy<Value = Vec<(usize, usize)>> {
        prop::collection::vec((0usize..3, 0usize..3), 1..60)
    }

    proptest! {
        #[test]
        fn metric_bounds(pairs in labels_strategy()) {
            let l = [Correct, Wrong, Inverted];
            let (p, t): (Vec<_>, Vec<_>) = pairs.iter().map(|(a, b)| (l[*a], l[*b])).unzip();
            let m = confusion(&p, &t, &l).unwrap();
            prop_assert_eq!(m.total(), pairs.len());
            for i in 0..3 {
                let s = f_score(&m, i);
                for v in [s.precision, s.recall, s.f] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if s.precision > 0.0 && s.recall > 0.0 {
                    prop_assert!(s.f <= s.precision.max(s.recall) + 1e-12);
                    prop_assert!(s.f >= s.precision.min(s.recall) - 1e-12);
                }
            }
        }

        #[test]
        fn swapping_roles_swaps_precision_and_recall(pairs in labels_strategy()) {
            let l = [Correct, Wrong, Inverted];
            let (p, t): (Vec<_>, Vec<_>) = pairs.iter().map(|(a, b)| (l[*a], l[*b])).unzip();
            let m = confusion(&p, &t, &l).unwrap();
            let swapped = confusion(&t, &p, &l).unwrap();
            for i in 0..3 {
                let (a, b) = (f_score(&m, i), f_score(&swapped, i));
                prop_assert_eq!(a.precision, b.recall);
                prop_assert_eq!(a.recall, b.precision);
                prop_assert!((a.f - b.f).abs() < 1e-15);
            }
        }
    }
}
