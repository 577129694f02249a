//! The daily monitoring protocol.
//!
//! Central path: a rolling window of measured days assumed correct, each
//! paired with simulated counterparts (estimated loads, known PV, a
//! misconfigured control curve), retrains a multiclass SVM once a day and
//! classifies the new day from substation data only. Device path: one
//! pretrained detector per bus and use case reads its own bus's voltages
//! and emits a flag. [`fuse`] combines both into a verdict.

use std::collections::{BTreeMap, VecDeque};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::der::ControlCurveVariant;
use crate::features::{
    condense_day, ClassLabel, DailySample, FeatureError, Provenance, Standardizer,
};
use crate::grid::{aggregate_substation, BusId, GridError};
use crate::load_estimation::{EstimatorError, LoadEstimator};
use crate::rt::{detect, DeviceFlag, RtError, RtModel};
use crate::scenario::{solve_step, DayMeasurements, GridContext, MeasurementSet};
use crate::svm::{train_multiclass, MultiClassSvm, SvmConfig, SvmError};

pub const DEFAULT_WINDOW_DAYS: usize = 14;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("calibration needs {need} days of data, got {have}")]
    CalibrationIncomplete { have: usize, need: usize },
    #[error("day {day} does not follow day {last} in the rolling window")]
    WindowOrder { last: u32, day: u32 },
    #[error("day {0}: only measured samples may enter the rolling window")]
    NotMeasured(u32),
    #[error("day {day}: {reason}")]
    InvalidDay { day: u32, reason: String },
    #[error("invalid orchestrator config: {0}")]
    InvalidConfig(String),
    #[error("counterfactual for day {day}, step {step}: {source}")]
    NonConvergence {
        day: u32,
        step: usize,
        #[source]
        source: GridError,
    },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Rt(#[from] RtError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub window_days: usize,
    /// Classes simulated as counterparts of every window day.
    pub malfunction_classes: Vec<ClassLabel>,
    /// Train the transformer-level SVM on Correct vs Abnormal.
    pub group_abnormal: bool,
    pub svm: SvmConfig,
    pub detector_threshold: f64,
    /// Contamination policy. When false, days classified as a malfunction
    /// stay out of the window.
    pub admit_flagged_days: bool,
    /// Build counterparts as the measured day plus the simulated effect of
    /// the misconfiguration, so load-estimation error does not separate
    /// measured from simulated samples.
    pub bias_corrected_counterparts: bool,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            window_days: DEFAULT_WINDOW_DAYS,
            malfunction_classes: vec![ClassLabel::Wrong, ClassLabel::Inverted],
            group_abnormal: false,
            svm: SvmConfig::default(),
            detector_threshold: 0.5,
            admit_flagged_days: false,
            bias_corrected_counterparts: true,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.window_days < 1 {
            return Err(OrchestratorError::InvalidConfig(
                "window must hold at least one day".into(),
            ));
        }
        if self.malfunction_classes.is_empty() {
            return Err(OrchestratorError::InvalidConfig(
                "no malfunction classes".into(),
            ));
        }
        for c in &self.malfunction_classes {
            if !matches!(c.variant(), Some(v) if v != ControlCurveVariant::Correct) {
                return Err(OrchestratorError::InvalidConfig(format!(
                    "{c} cannot be simulated as a counterpart"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.detector_threshold) {
            return Err(OrchestratorError::InvalidConfig(
                "threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn training_label(&self, class: ClassLabel) -> ClassLabel {
        if self.group_abnormal {
            class.grouped()
        } else {
            class
        }
    }
}

/// Up to `capacity` measured, correct-labeled days in increasing day order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollingWindow {
    capacity: usize,
    samples: VecDeque<DailySample>,
}

impl RollingWindow {
    pub fn new(capacity: usize) -> Self {
        RollingWindow {
            capacity,
            samples: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn days(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.day).collect()
    }

    pub fn samples(&self) -> impl Iterator<Item = &DailySample> {
        self.samples.iter()
    }

    /// Append a sample, returning the evicted oldest one when full.
    pub fn push(&mut self, sample: DailySample) -> Result<Option<DailySample>, OrchestratorError> {
        if sample.provenance != Provenance::Measured {
            return Err(OrchestratorError::NotMeasured(sample.day));
        }
        if let Some(last) = self.samples.back() {
            if sample.day <= last.day {
                return Err(OrchestratorError::WindowOrder {
                    last: last.day,
                    day: sample.day,
                });
            }
        }
        let evicted = if self.samples.len() == self.capacity {
            self.samples.pop_front()
        } else {
            None
        };
        self.samples.push_back(sample);
        Ok(evicted)
    }
}

/// What the central path may see of a day: substation channels and known
/// PV production. Meter series are not part of it.
#[derive(Clone, Debug, PartialEq)]
pub struct CentralDay {
    pub day: u32,
    pub substation: Array2<f64>,
    pub pv_kw: BTreeMap<BusId, Vec<f64>>,
}

impl From<&DayMeasurements> for CentralDay {
    fn from(d: &DayMeasurements) -> Self {
        CentralDay {
            day: d.day,
            substation: d.substation.clone(),
            pv_kw: d.pv_kw.clone(),
        }
    }
}

/// A day re-simulated with estimated loads and one misconfigured curve on
/// every PV inverter.
#[derive(Clone, Debug, PartialEq)]
pub struct Counterfactual {
    pub class: ClassLabel,
    /// Timesteps × estimator output buses, kW.
    pub loads_kw: Array2<f64>,
    /// Re-simulation with all inverters correct.
    pub baseline: Array2<f64>,
    /// Re-simulation with all inverters on `class`'s curve.
    pub simulated: Array2<f64>,
    /// The counterpart series: `measured + simulated - baseline` when bias
    /// correction is on, else `simulated`.
    pub substation: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CentralState {
    pub window: RollingWindow,
    /// Simulated samples of each window day.
    pub counterparts: BTreeMap<u32, Vec<DailySample>>,
    pub standardizer: Standardizer,
    pub svm: MultiClassSvm,
    pub retrain_count: usize,
}

impl CentralState {
    pub fn training_set(&self) -> Vec<DailySample> {
        let mut out = Vec::new();
        for s in self.window.samples() {
            out.push(s.clone());
            if let Some(cs) = self.counterparts.get(&s.day) {
                out.extend(cs.iter().cloned());
            }
        }
        out
    }

    pub fn training_counts(&self) -> BTreeMap<ClassLabel, usize> {
        let mut counts = BTreeMap::new();
        for s in self.training_set() {
            *counts.entry(s.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn classify(&self, features: &[f64]) -> Result<ClassLabel, OrchestratorError> {
        Ok(self.svm.predict(&self.standardizer.apply(features))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyCycleReport {
    pub day: u32,
    pub transformer_verdict: ClassLabel,
    /// Size and class counts of the classifier that produced the verdict.
    pub training_size: usize,
    pub training_counts: BTreeMap<ClassLabel, usize>,
    pub window_size_after: usize,
    pub retrained: bool,
    pub evicted_day: Option<u32>,
}

/// Central-path dependencies for one grid.
pub struct CentralPipeline<'a> {
    ctx: &'a GridContext,
    estimator: &'a LoadEstimator,
    config: &'a OrchestratorConfig,
    channel_names: Vec<String>,
    step_s: u32,
}

impl<'a> CentralPipeline<'a> {
    /// `step_s` is the substation sampling interval.
    pub fn new(
        ctx: &'a GridContext,
        estimator: &'a LoadEstimator,
        config: &'a OrchestratorConfig,
        step_s: u32,
    ) -> Result<Self, OrchestratorError> {
        config.validate()?;
        estimator.check_fingerprint(&ctx.fingerprint)?;
        Ok(CentralPipeline {
            ctx,
            estimator,
            config,
            channel_names: ctx.channel_names(),
            step_s,
        })
    }

    pub fn config(&self) -> &OrchestratorConfig {
        self.config
    }

    pub fn condense(&self, obs: &CentralDay) -> Result<Vec<f64>, OrchestratorError> {
        Ok(condense_day(obs.substation.view(), &self.channel_names)?)
    }

    fn pv_series<'d>(&self, obs: &'d CentralDay) -> Result<Vec<&'d [f64]>, OrchestratorError> {
        let steps = obs.substation.nrows();
        self.ctx
            .inverters
            .iter()
            .map(|inv| match obs.pv_kw.get(&inv.bus) {
                Some(s) if s.len() == steps => Ok(s.as_slice()),
                _ => Err(OrchestratorError::InvalidDay {
                    day: obs.day,
                    reason: format!("no PV series of {steps} samples for bus {}", inv.bus),
                }),
            })
            .collect()
    }

    /// Estimate the day's loads, then re-simulate it with every inverter on
    /// `class`'s control curve, the measured slack voltage and known PV.
    pub fn counterfactual(
        &self,
        obs: &CentralDay,
        class: ClassLabel,
    ) -> Result<Counterfactual, OrchestratorError> {
        Ok(self.counterfactuals(obs, &[class])?.remove(0))
    }

    /// Counterfactuals for several classes sharing one load estimate and
    /// one baseline simulation.
    pub fn counterfactuals(
        &self,
        obs: &CentralDay,
        classes: &[ClassLabel],
    ) -> Result<Vec<Counterfactual>, OrchestratorError> {
        let variants = classes
            .iter()
            .map(|c| {
                c.variant().ok_or_else(|| {
                    OrchestratorError::InvalidConfig(format!("{c} cannot be simulated"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pv = self.pv_series(obs)?;
        let steps = obs.substation.nrows();
        let pv_total: Vec<f64> = (0..steps).map(|k| pv.iter().map(|s| s[k]).sum()).collect();
        let loads_kw = self.estimator.estimate_day(
            &self.channel_names,
            obs.substation.view(),
            self.step_s,
            &pv_total,
        )?;
        let baseline = self.simulate_with_loads(obs, &loads_kw, ControlCurveVariant::Correct)?;
        classes
            .par_iter()
            .zip(&variants)
            .map(|(&class, &variant)| {
                let simulated = self.simulate_with_loads(obs, &loads_kw, variant)?;
                let substation = if self.config.bias_corrected_counterparts {
                    &obs.substation + &simulated - &baseline
                } else {
                    simulated.clone()
                };
                Ok(Counterfactual {
                    class,
                    loads_kw: loads_kw.clone(),
                    baseline: baseline.clone(),
                    simulated,
                    substation,
                })
            })
            .collect()
    }

    /// Substation series of `obs` re-simulated with the given loads.
    pub fn simulate_with_loads(
        &self,
        obs: &CentralDay,
        loads_kw: &Array2<f64>,
        variant: ControlCurveVariant,
    ) -> Result<Array2<f64>, OrchestratorError> {
        let pv = self.pv_series(obs)?;
        let n = self.ctx.topo.bus_count();
        let variants = vec![variant; self.ctx.inverters.len()];
        let slack_col = self
            .channel_names
            .iter()
            .position(|c| c == "v_slack")
            .expect("v_slack channel");
        let rows = (0..obs.substation.nrows())
            .into_par_iter()
            .map(|k| {
                let mut p = vec![0.0; n];
                let mut q = vec![0.0; n];
                for (j, bus) in self.estimator.output_buses.iter().enumerate() {
                    p[bus.0] = loads_kw[[k, j]];
                    q[bus.0] = self.estimator.reactive_kvar(p[bus.0]);
                }
                let pv_k: Vec<f64> = pv.iter().map(|s| s[k]).collect();
                let slack = obs.substation[[k, slack_col]];
                let sol =
                    solve_step(self.ctx, &p, &q, &pv_k, &variants, slack).map_err(|source| {
                        OrchestratorError::NonConvergence {
                            day: obs.day,
                            step: k,
                            source,
                        }
                    })?;
                Ok(aggregate_substation(&sol.flow, &self.ctx.topo).values())
            })
            .collect::<Result<Vec<_>, OrchestratorError>>()?;
        let cols = self.channel_names.len();
        Ok(Array2::from_shape_vec((rows.len(), cols), rows.concat()).expect("rectangular rows"))
    }

    /// One simulated sample per configured malfunction class.
    pub fn counterparts(&self, obs: &CentralDay) -> Result<Vec<DailySample>, OrchestratorError> {
        self.counterfactuals(obs, &self.config.malfunction_classes)?
            .into_iter()
            .map(|cf| {
                Ok(DailySample {
                    features: condense_day(cf.substation.view(), &self.channel_names)?,
                    label: self.config.training_label(cf.class),
                    day: obs.day,
                    provenance: Provenance::Simulated,
                })
            })
            .collect()
    }

    fn measured_sample(&self, obs: &CentralDay) -> Result<DailySample, OrchestratorError> {
        Ok(DailySample {
            features: self.condense(obs)?,
            label: ClassLabel::Correct,
            day: obs.day,
            provenance: Provenance::Measured,
        })
    }

    fn fit(
        &self,
        window: RollingWindow,
        counterparts: BTreeMap<u32, Vec<DailySample>>,
        retrain_count: usize,
    ) -> Result<CentralState, OrchestratorError> {
        let mut state = CentralState {
            window,
            counterparts,
            standardizer: Standardizer {
                mean: Vec::new(),
                std: Vec::new(),
            },
            svm: MultiClassSvm {
                labels: Vec::new(),
                pairs: Vec::new(),
            },
            retrain_count,
        };
        let mut set = state.training_set();
        state.standardizer = Standardizer::fit_samples(&set)?;
        for s in &mut set {
            s.features = state.standardizer.apply(&s.features);
        }
        state.svm = train_multiclass(&set, &self.config.svm)?;
        log::debug!("retrained SVM on {} samples", set.len());
        Ok(state)
    }

    /// Label the first `window_days` days correct, simulate their
    /// counterparts and train the classifier.
    pub fn calibrate(&self, days: &[CentralDay]) -> Result<CentralState, OrchestratorError> {
        let need = self.config.window_days;
        if days.len() < need {
            return Err(OrchestratorError::CalibrationIncomplete {
                have: days.len(),
                need,
            });
        }
        let days = &days[..need];
        let mut window = RollingWindow::new(need);
        for d in days {
            window.push(self.measured_sample(d)?)?;
        }
        let counterparts = days
            .par_iter()
            .map(|d| Ok((d.day, self.counterparts(d)?)))
            .collect::<Result<BTreeMap<_, _>, OrchestratorError>>()?;
        self.fit(window, counterparts, 1)
    }

    /// Classify `obs` with the current model; a day classified correct (or
    /// any day, under the admitting policy) enters the window and the
    /// classifier is retrained.
    pub fn run_daily_cycle(
        &self,
        state: CentralState,
        obs: &CentralDay,
    ) -> Result<(DailyCycleReport, CentralState), OrchestratorError> {
        let features = self.condense(obs)?;
        let verdict = state.classify(&features)?;
        let training_counts = state.training_counts();
        let training_size = training_counts.values().sum();

        if verdict.is_malfunction() && !self.config.admit_flagged_days {
            let report = DailyCycleReport {
                day: obs.day,
                transformer_verdict: verdict,
                training_size,
                training_counts,
                window_size_after: state.window.len(),
                retrained: false,
                evicted_day: None,
            };
            return Ok((report, state));
        }

        let CentralState {
            mut window,
            mut counterparts,
            retrain_count,
            ..
        } = state;
        let evicted = window.push(DailySample {
            features,
            label: ClassLabel::Correct,
            day: obs.day,
            provenance: Provenance::Measured,
        })?;
        if let Some(e) = &evicted {
            counterparts.remove(&e.day);
        }
        counterparts.insert(obs.day, self.counterparts(obs)?);
        let state = self.fit(window, counterparts, retrain_count + 1)?;
        let report = DailyCycleReport {
            day: obs.day,
            transformer_verdict: verdict,
            training_size,
            training_counts,
            window_size_after: state.window.len(),
            retrained: true,
            evicted_day: evicted.map(|e| e.day),
        };
        Ok((report, state))
    }
}

/// A pretrained model deployed at one bus.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceDetector {
    pub bus: BusId,
    pub model: RtModel,
    pub threshold: f64,
}

impl DeviceDetector {
    /// Judge one day of this bus's own voltages.
    pub fn observe(&self, day: u32, own_series: &[f64]) -> Result<Option<DeviceFlag>, RtError> {
        detect(&self.model, self.bus, day, own_series, self.threshold)
    }
}

/// Run every detector on its own bus's series of `day`.
pub fn device_flags(
    day: &DayMeasurements,
    detectors: &[DeviceDetector],
) -> Result<Vec<DeviceFlag>, OrchestratorError> {
    let flags = detectors
        .par_iter()
        .map(|d| {
            let series = day
                .meters
                .get(&d.bus)
                .ok_or_else(|| OrchestratorError::InvalidDay {
                    day: day.day,
                    reason: format!("no meter series for bus {}", d.bus),
                })?;
            Ok(d.observe(day.day, series)?)
        })
        .collect::<Result<Vec<_>, OrchestratorError>>()?;
    Ok(flags.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FusionVerdict {
    ConsistentCorrect,
    ConfirmedLocalized {
        bus: BusId,
        class: ClassLabel,
        others: Vec<DeviceFlag>,
    },
    TransformerOnly {
        class: ClassLabel,
    },
    DeviceOnly {
        bus: BusId,
        class: ClassLabel,
        others: Vec<DeviceFlag>,
    },
    Contradiction {
        transformer: ClassLabel,
        flag: DeviceFlag,
        others: Vec<DeviceFlag>,
    },
}

impl FusionVerdict {
    pub fn name(&self) -> &'static str {
        match self {
            FusionVerdict::ConsistentCorrect => "ConsistentCorrect",
            FusionVerdict::ConfirmedLocalized { .. } => "ConfirmedLocalized",
            FusionVerdict::TransformerOnly { .. } => "TransformerOnly",
            FusionVerdict::DeviceOnly { .. } => "DeviceOnly",
            FusionVerdict::Contradiction { .. } => "Contradiction",
        }
    }

    /// Whether the transformer level reports a malfunction the devices do
    /// not contradict.
    pub fn is_malfunction(&self) -> bool {
        matches!(
            self,
            FusionVerdict::ConfirmedLocalized { .. } | FusionVerdict::TransformerOnly { .. }
        )
    }
}

/// Combine the transformer-level verdict with the day's device flags. The
/// most probable flag decides (ties: lower bus, then class name); the rest
/// are carried along. `Abnormal` matches any malfunction flag.
pub fn fuse(transformer: ClassLabel, flags: &[DeviceFlag]) -> FusionVerdict {
    let mut sorted = flags.to_vec();
    sorted.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then(a.bus.cmp(&b.bus))
            .then(a.use_case.name().cmp(b.use_case.name()))
    });
    let mut iter = sorted.into_iter();
    let Some(top) = iter.next() else {
        return if transformer.is_malfunction() {
            FusionVerdict::TransformerOnly { class: transformer }
        } else {
            FusionVerdict::ConsistentCorrect
        };
    };
    let others: Vec<DeviceFlag> = iter.collect();
    if !transformer.is_malfunction() {
        FusionVerdict::DeviceOnly {
            bus: top.bus,
            class: top.use_case,
            others,
        }
    } else if transformer == top.use_case || transformer == ClassLabel::Abnormal {
        FusionVerdict::ConfirmedLocalized {
            bus: top.bus,
            class: top.use_case,
            others,
        }
    } else {
        FusionVerdict::Contradiction {
            transformer,
            flag: top,
            others,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayOutcome {
    pub report: DailyCycleReport,
    pub flags: Vec<DeviceFlag>,
    pub fusion: FusionVerdict,
}

/// One line of the JSON-lines run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub day: u32,
    pub transformer_verdict: ClassLabel,
    pub flags: Vec<DeviceFlag>,
    pub fusion: FusionVerdict,
    pub window_size: usize,
    pub training_counts: BTreeMap<ClassLabel, usize>,
}

impl From<&DayOutcome> for ReportLine {
    fn from(o: &DayOutcome) -> Self {
        ReportLine {
            day: o.report.day,
            transformer_verdict: o.report.transformer_verdict,
            flags: o.flags.clone(),
            fusion: o.fusion.clone(),
            window_size: o.report.window_size_after,
            training_counts: o.report.training_counts.clone(),
        }
    }
}

pub fn report_jsonl(outcomes: &[DayOutcome]) -> String {
    outcomes
        .iter()
        .map(|o| serde_json::to_string(&ReportLine::from(o)).expect("report serializes") + "\n")
        .collect()
}

/// Markdown table of the run: one row per monitored day.
pub fn report_markdown(outcomes: &[DayOutcome]) -> String {
    let mut s =
        String::from("| day | transformer | flags | fusion | window |\n|---|---|---|---|---|\n");
    for o in outcomes {
        let flags: Vec<String> = o
            .flags
            .iter()
            .map(|f| format!("{}@{} ({:.2})", f.use_case, f.bus, f.probability))
            .collect();
        s += &format!(
            "| {} | {} | {} | {} | {} |\n",
            o.report.day,
            o.report.transformer_verdict,
            if flags.is_empty() {
                "-".into()
            } else {
                flags.join(", ")
            },
            o.fusion.name(),
            o.report.window_size_after
        );
    }
    s
}

/// Calibrate on the first `window_days` days, then run the daily cycle and
/// the device detectors on every remaining day.
pub fn monitor_period(
    set: &MeasurementSet,
    pipeline: &CentralPipeline,
    detectors: &[DeviceDetector],
) -> Result<Vec<DayOutcome>, OrchestratorError> {
    pipeline
        .estimator
        .check_fingerprint(&set.metadata.grid_fingerprint)?;
    let need = pipeline.config.window_days;
    if set.days.len() <= need {
        return Err(OrchestratorError::CalibrationIncomplete {
            have: set.days.len(),
            need: need + 1,
        });
    }
    let central: Vec<CentralDay> = set.days.iter().map(CentralDay::from).collect();
    let mut state = pipeline.calibrate(&central[..need])?;
    let mut out = Vec::with_capacity(set.days.len() - need);
    for (obs, day) in central[need..].iter().zip(&set.days[need..]) {
        let (report, next) = pipeline.run_daily_cycle(state, obs)?;
        state = next;
        let flags = device_flags(day, detectors)?;
        let fusion = fuse(report.transformer_verdict, &flags);
        log::info!(
            "day {}: {} / {}",
            report.day,
            report.transformer_verdict,
            fusion.name()
        );
        out.push(DayOutcome {
            report,
            flags,
            fusion,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(day: u32) -> DailySample {
        DailySample {
            features: vec![day as f64],
            label: ClassLabel::Correct,
            day,
            provenance: Provenance::Measured,
        }
    }

    fn flag(bus: usize, class: ClassLabel, p: f64) -> DeviceFlag {
        DeviceFlag {
            day: 3,
            bus: BusId(bus),
            use_case: class,
            probability: p,
        }
    }

    #[test]
    fn window_is_fifo_and_bounded() {
        let mut w = RollingWindow::new(3);
        for d in 0..3 {
            assert!(w.push(sample(d)).unwrap().is_none());
        }
        let ev = w.push(sample(3)).unwrap().unwrap();
        assert_eq!(ev.day, 0);
        assert_eq!(w.days(), vec![1, 2, 3]);
        assert!(matches!(
            w.push(sample(3)),
            Err(OrchestratorError::WindowOrder { .. })
        ));
        let mut sim = sample(9);
        sim.provenance = Provenance::Simulated;
        assert!(matches!(
            w.push(sim),
            Err(OrchestratorError::NotMeasured(9))
        ));
        assert_eq!(w.len(), 3);
    }

    #[test]
    fn fusion_rule_table() {
        use ClassLabel::*;
        assert_eq!(fuse(Correct, &[]), FusionVerdict::ConsistentCorrect);
        assert_eq!(
            fuse(Inverted, &[flag(7, Inverted, 0.93)]),
            FusionVerdict::ConfirmedLocalized {
                bus: BusId(7),
                class: Inverted,
                others: vec![]
            }
        );
        assert_eq!(
            fuse(Wrong, &[]),
            FusionVerdict::TransformerOnly { class: Wrong }
        );
        assert!(matches!(
            fuse(Correct, &[flag(2, Wrong, 0.7)]),
            FusionVerdict::DeviceOnly {
                bus: BusId(2),
                class: Wrong,
                ..
            }
        ));
        assert!(matches!(
            fuse(Wrong, &[flag(3, Inverted, 0.8)]),
            FusionVerdict::Contradiction {
                transformer: Wrong,
                ..
            }
        ));
        assert!(matches!(
            fuse(Abnormal, &[flag(3, Inverted, 0.8)]),
            FusionVerdict::ConfirmedLocalized {
                class: Inverted,
                ..
            }
        ));
    }

    #[test]
    fn highest_probability_flag_decides() {
        use ClassLabel::*;
        let flags = [
            flag(2, Wrong, 0.6),
            flag(5, Inverted, 0.9),
            flag(1, Inverted, 0.55),
        ];
        match fuse(Inverted, &flags) {
            FusionVerdict::ConfirmedLocalized { bus, others, .. } => {
                assert_eq!(bus, BusId(5));
                assert_eq!(others.len(), 2);
                assert_eq!(others[0].bus, BusId(2));
            }
            v => panic!("{v:?}"),
        }
        // Same inputs in another order give the same verdict.
        let mut rev = flags.to_vec();
        rev.reverse();
        assert_eq!(fuse(Inverted, &flags), fuse(Inverted, &rev));
    }

    #[test]
    fn report_line_fields() {
        let o = DayOutcome {
            report: DailyCycleReport {
                day: 4,
                transformer_verdict: ClassLabel::Correct,
                training_size: 3,
                training_counts: [(ClassLabel::Correct, 1), (ClassLabel::Wrong, 2)].into(),
                window_size_after: 1,
                retrained: true,
                evicted_day: None,
            },
            flags: vec![],
            fusion: FusionVerdict::ConsistentCorrect,
        };
        let v: serde_json::Value = serde_json::from_str(report_jsonl(&[o]).trim()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(
            keys,
            [
                "day",
                "flags",
                "fusion",
                "training_counts",
                "transformer_verdict",
                "window_size"
            ]
        );
        assert_eq!(v["fusion"]["kind"], "consistent_correct");
        assert_eq!(v["training_counts"]["Wrong"], 2);
    }

    #[test]
    fn config_rejects_unsimulatable_classes() {
        let mut c = OrchestratorConfig::default();
        assert!(c.validate().is_ok());
        c.malfunction_classes = vec![ClassLabel::Abnormal];
        assert!(c.validate().is_err());
        c.malfunction_classes = vec![ClassLabel::Correct];
        assert!(c.validate().is_err());
    }
}
