//! Neural load estimation from substation measurements.
//!
//! An estimator maps one substation record, the time of day and the known
//! total PV production to the active load of every non-slack bus. It is
//! trained on synthetic operating points of a single grid and carries that
//! grid's fingerprint.
//!
//! Input layout: substation channels in record order, then
//! `sin(2πt/24)`, `cos(2πt/24)`, then total PV in kW.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::der::ControlCurveVariant;
use crate::features::{FeatureError, Standardizer};
use crate::grid::{aggregate_substation, BusId, GridError, GridFingerprint};
use crate::nn::{train, OptimizerKind, TrainConfig};
use crate::nn::{Activation, Loss, Mlp, MlpFile, NnError};
use crate::rng;
use crate::scenario::{solve_step, GridContext, IrradianceModel};

pub const ESTIMATOR_FORMAT_VERSION: u32 = 1;
const MAX_REDRAWS: u64 = 20;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("input does not match estimator spec: {0}")]
    SpecMismatch(String),
    #[error("estimator was trained for grid {expected}, got grid {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("invalid estimator config: {0}")]
    InvalidConfig(String),
    #[error("no operating point converged after {MAX_REDRAWS} draws for sample {0}")]
    NonConvergence(usize, #[source] GridError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("estimator file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: Vec<String>,
    pub time_encoding: String,
    pub pv_total: bool,
}

impl InputSpec {
    pub fn new(channels: Vec<String>) -> Self {
        InputSpec {
            channels,
            time_encoding: "sin_cos_24h".into(),
            pv_total: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.channels.len() + 3
    }
}

fn time_features(t_h: f64) -> [f64; 2] {
    let a = 2.0 * PI * t_h / 24.0;
    [a.sin(), a.cos()]
}

/// Assemble one estimator input row.
pub fn input_row(record: &[f64], t_h: f64, pv_total_kw: f64) -> Vec<f64> {
    let mut row = Vec::with_capacity(record.len() + 3);
    row.extend_from_slice(record);
    row.extend(time_features(t_h));
    row.push(pv_total_kw);
    row
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSetParams {
    pub n_samples: usize,
    pub load_range_kw: (f64, f64),
    pub power_factor: f64,
    pub irradiance: IrradianceModel,
    pub slack_voltage: f64,
    pub seed: u64,
}

impl TrainingSetParams {
    pub fn new(n_samples: usize, load_range_kw: (f64, f64), seed: u64) -> Self {
        TrainingSetParams {
            n_samples,
            load_range_kw,
            power_factor: 0.95,
            irradiance: IrradianceModel::default(),
            slack_voltage: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<(), EstimatorError> {
        let (lo, hi) = self.load_range_kw;
        if self.n_samples < 1 {
            return Err(EstimatorError::InvalidConfig(
                "n_samples must be at least 1".into(),
            ));
        }
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(EstimatorError::InvalidConfig(format!(
                "load range {lo}..{hi} is not a nonnegative interval"
            )));
        }
        if !(self.power_factor > 0.0 && self.power_factor <= 1.0) {
            return Err(EstimatorError::InvalidConfig(
                "power factor must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn tan_phi(&self) -> f64 {
        self.power_factor.acos().tan()
    }
}

/// Synthetic operating points of one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTrainingSet {
    pub inputs: Array2<f64>,
    /// True active load per output bus, kW.
    pub targets: Array2<f64>,
    pub input_spec: InputSpec,
    pub output_buses: Vec<BusId>,
    /// Hour of day of each sample.
    pub time_h: Vec<f64>,
    /// Shared PV production fraction (of rated power) of each sample.
    pub pv_frac: Vec<f64>,
    pub params: TrainingSetParams,
    pub topology_fingerprint: GridFingerprint,
}

impl SyntheticTrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `range` as a new set.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SyntheticTrainingSet {
        SyntheticTrainingSet {
            inputs: self.inputs.slice(ndarray::s![range.clone(), ..]).to_owned(),
            targets: self
                .targets
                .slice(ndarray::s![range.clone(), ..])
                .to_owned(),
            time_h: self.time_h[range.clone()].to_vec(),
            pv_frac: self.pv_frac[range].to_vec(),
            ..self.clone()
        }
    }
}

struct Draw {
    row: Vec<f64>,
    loads: Vec<f64>,
    t_h: f64,
    frac: f64,
}

/// Draw a load ceiling, per-bus uniform loads below it and a PV operating point
/// per sample and record the resulting substation channels. All inverters follow the
/// correct curve. Samples whose power flow diverges are redrawn.
pub fn build_training_set(
    ctx: &GridContext,
    params: &TrainingSetParams,
) -> Result<SyntheticTrainingSet, EstimatorError> {
    params.validate()?;
    let n = ctx.topo.bus_count();
    let (lo, hi) = params.load_range_kw;
    let tan_phi = params.tan_phi();
    let variants = vec![ControlCurveVariant::Correct; ctx.inverters.len()];

    let draw = |i: usize| -> Result<Draw, EstimatorError> {
        let mut last = None;
        for attempt in 0..MAX_REDRAWS {
            let mut r = rng::substream(params.seed, "estimator-sample", &[i as u64, attempt]);
            // A shared ceiling spreads the total load over its whole range
            // instead of concentrating it around n·(lo + hi)/2.
            let ceiling = if hi > lo { r.random_range(lo..hi) } else { lo };
            let mut loads = vec![0.0; n];
            for l in loads.iter_mut().skip(1) {
                *l = if ceiling > lo {
                    r.random_range(lo..ceiling)
                } else {
                    lo
                };
            }
            let t_h: f64 = r.random_range(0.0..24.0);
            let frac = params.irradiance.clear_sky(t_h) * r.random::<f64>();
            let kvar: Vec<f64> = loads.iter().map(|p| p * tan_phi).collect();
            let pv: Vec<f64> = ctx
                .inverters
                .iter()
                .map(|inv| inv.rated_kw * frac)
                .collect();
            match solve_step(ctx, &loads, &kvar, &pv, &variants, params.slack_voltage) {
                Ok(sol) => {
                    let rec = aggregate_substation(&sol.flow, &ctx.topo).values();
                    return Ok(Draw {
                        row: input_row(&rec, t_h, pv.iter().sum()),
                        loads: loads[1..].to_vec(),
                        t_h,
                        frac,
                    });
                }
                Err(e @ GridError::NonConvergence { .. }) => last = Some(e),
                Err(e) => return Err(e.into()),
            }
        }
        Err(EstimatorError::NonConvergence(
            i,
            last.expect("at least one draw"),
        ))
    };
    let draws: Vec<Draw> = (0..params.n_samples)
        .into_par_iter()
        .map(draw)
        .collect::<Result<_, _>>()?;

    let spec = InputSpec::new(ctx.channel_names());
    let mut inputs = Array2::zeros((draws.len(), spec.dim()));
    let mut targets = Array2::zeros((draws.len(), n - 1));
    for (i, d) in draws.iter().enumerate() {
        inputs.row_mut(i).assign(&ndarray::aview1(&d.row));
        targets.row_mut(i).assign(&ndarray::aview1(&d.loads));
    }
    Ok(SyntheticTrainingSet {
        inputs,
        targets,
        input_spec: spec,
        output_buses: (1..n).map(BusId).collect(),
        time_h: draws.iter().map(|d| d.t_h).collect(),
        pv_frac: draws.iter().map(|d| d.frac).collect(),
        params: params.clone(),
        topology_fingerprint: ctx.fingerprint.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    /// Trailing fraction of the set held out to measure MAE.
    pub holdout_fraction: f64,
    pub init_seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            train: TrainConfig {
                optimizer: OptimizerKind::adam(1e-3),
                epochs: 200,
                batch_size: 32,
                loss: Loss::Mse,
                seed: 0,
            },
            holdout_fraction: 0.2,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadEstimator {
    pub mlp: Mlp,
    pub input_spec: InputSpec,
    pub output_buses: Vec<BusId>,
    pub normalizer: Standardizer,
    pub target_normalizer: Standardizer,
    pub topology_fingerprint: GridFingerprint,
    pub power_factor: f64,
    /// Mean absolute error (kW per bus) on the holdout split.
    pub holdout_mae: f64,
    pub loss_history: Vec<f64>,
}

fn standardize_rows(s: &Standardizer, x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - s.mean[j]) / s.std[j];
        }
    }
    out
}

fn rows_of(x: ArrayView2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn train_estimator(
    set: &SyntheticTrainingSet,
    config: &EstimatorConfig,
) -> Result<LoadEstimator, EstimatorError> {
    if !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(EstimatorError::InvalidConfig(
            "holdout fraction must lie in [0, 1)".into(),
        ));
    }
    let n = set.len();
    let n_hold = (n as f64 * config.holdout_fraction).round() as usize;
    let n_train = n - n_hold;
    if n_train < 2 {
        return Err(EstimatorError::InvalidConfig(format!(
            "{n_train} training samples after holdout, need at least 2"
        )));
    }
    let train_set = set.slice(0..n_train);
    let in_rows = rows_of(train_set.inputs.view());
    let out_rows = rows_of(train_set.targets.view());
    let normalizer = Standardizer::fit(in_rows.iter().map(Vec::as_slice))?;
    let target_normalizer = Standardizer::fit(out_rows.iter().map(Vec::as_slice))?;
    let x = standardize_rows(&normalizer, train_set.inputs.view());
    let y = standardize_rows(&target_normalizer, train_set.targets.view());

    let mut sizes = vec![set.input_spec.dim()];
    sizes.extend(&config.hidden);
    sizes.push(set.output_buses.len());
    let init = Mlp::new(
        &sizes,
        config.activation,
        Activation::Identity,
        config.init_seed,
    );
    let (mlp, loss_history) = train(&init, &x, &y, &config.train)?;

    let mut est = LoadEstimator {
        mlp,
        input_spec: set.input_spec.clone(),
        output_buses: set.output_buses.clone(),
        normalizer,
        target_normalizer,
        topology_fingerprint: set.topology_fingerprint.clone(),
        power_factor: set.params.power_factor,
        holdout_mae: f64::NAN,
        loss_history,
    };
    let eval = if n_hold > 0 {
        set.slice(n_train..n)
    } else {
        train_set
    };
    est.holdout_mae = est.mae(&eval)?;
    Ok(est)
}

impl LoadEstimator {
    /// Unclamped predictions for raw input rows, kW.
    pub fn predict_raw(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, EstimatorError> {
        if inputs.ncols() != self.input_spec.dim() {
            return Err(EstimatorError::SpecMismatch(format!(
                "{} input columns, expected {}",
                inputs.ncols(),
                self.input_spec.dim()
            )));
        }
        let z = self
            .mlp
            .forward(&standardize_rows(&self.normalizer, inputs))?;
        let mut out = z;
        for mut row in out.rows_mut() {
            let back = self
                .target_normalizer
                .inverse(row.as_slice().expect("standard layout"));
            row.assign(&ndarray::aview1(&back));
        }
        Ok(out)
    }

    /// Mean absolute error over all buses and samples, unclamped.
    pub fn mae(&self, set: &SyntheticTrainingSet) -> Result<f64, EstimatorError> {
        let pred = self.predict_raw(set.inputs.view())?;
        Ok((&pred - &set.targets).mapv(f64::abs).mean().unwrap_or(0.0))
    }

    fn check_channels(&self, channel_names: &[String]) -> Result<(), EstimatorError> {
        if channel_names != self.input_spec.channels.as_slice() {
            return Err(EstimatorError::SpecMismatch(format!(
                "channels {:?}, expected {:?}",
                channel_names, self.input_spec.channels
            )));
        }
        Ok(())
    }

    pub fn check_fingerprint(&self, fp: &GridFingerprint) -> Result<(), EstimatorError> {
        if *fp != self.topology_fingerprint {
            return Err(EstimatorError::FingerprintMismatch {
                expected: self.topology_fingerprint.0.clone(),
                found: fp.0.clone(),
            });
        }
        Ok(())
    }

    /// Active load per output bus (kW), clamped at zero.
    pub fn estimate_loads(
        &self,
        channel_names: &[String],
        record: &[f64],
        t_h: f64,
        pv_total_kw: f64,
    ) -> Result<Vec<f64>, EstimatorError> {
        self.check_channels(channel_names)?;
        if record.len() != channel_names.len() {
            return Err(EstimatorError::SpecMismatch(format!(
                "{} values for {} channels",
                record.len(),
                channel_names.len()
            )));
        }
        let row = input_row(record, t_h, pv_total_kw);
        let x = Array2::from_shape_vec((1, row.len()), row).expect("one row");
        let pred = self.predict_raw(x.view())?;
        Ok(pred.row(0).iter().map(|v| v.max(0.0)).collect())
    }

    /// Estimate every timestep of a day. `substation` is timesteps ×
    /// channels at `step_s` seconds; returns timesteps × output buses (kW,
    /// clamped at zero).
    pub fn estimate_day(
        &self,
        channel_names: &[String],
        substation: ArrayView2<f64>,
        step_s: u32,
        pv_total_kw: &[f64],
    ) -> Result<Array2<f64>, EstimatorError> {
        self.check_channels(channel_names)?;
        let (steps, cols) = substation.dim();
        if cols != channel_names.len() || pv_total_kw.len() != steps {
            return Err(EstimatorError::SpecMismatch(format!(
                "day of {steps}x{cols} with {} PV samples",
                pv_total_kw.len()
            )));
        }
        let mut inputs = Array2::zeros((steps, self.input_spec.dim()));
        for (k, mut row) in inputs.axis_iter_mut(Axis(0)).enumerate() {
            let t_h = k as f64 * f64::from(step_s) / 3600.0;
            let r = input_row(&substation.row(k).to_vec(), t_h, pv_total_kw[k]);
            row.assign(&ndarray::aview1(&r));
        }
        Ok(self.predict_raw(inputs.view())?.mapv(|v| v.max(0.0)))
    }

    /// Reactive load per bus from estimated active load at the fixed power factor.
    pub fn reactive_kvar(&self, p_kw: f64) -> f64 {
        p_kw * self.power_factor.acos().tan()
    }
}

#[derive(Serialize, Deserialize)]
struct EstimatorFile {
    format_version: u32,
    mlp: MlpFile,
    input_spec: InputSpec,
    output_buses: Vec<BusId>,
    normalizer: Standardizer,
    target_normalizer: Standardizer,
    topology_fingerprint: GridFingerprint,
    power_factor: f64,
    holdout_mae: f64,
    loss_history: Vec<f64>,
}

impl LoadEstimator {
    pub fn to_json(&self) -> String {
        let f = EstimatorFile {
            format_version: ESTIMATOR_FORMAT_VERSION,
            mlp: self.mlp.to_file(),
            input_spec: self.input_spec.clone(),
            output_buses: self.output_buses.clone(),
            normalizer: self.normalizer.clone(),
            target_normalizer: self.target_normalizer.clone(),
            topology_fingerprint: self.topology_fingerprint.clone(),
            power_factor: self.power_factor,
            holdout_mae: self.holdout_mae,
            loss_history: self.loss_history.clone(),
        };
        serde_json::to_string_pretty(&f).expect("estimator serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EstimatorError> {
        let f: EstimatorFile =
            serde_json::from_str(text).map_err(|e| EstimatorError::Format(e.to_string()))?;
        if f.format_version != ESTIMATOR_FORMAT_VERSION {
            return Err(EstimatorError::Format(format!(
                "unsupported format version {}",
                f.format_version
            )));
        }
        let mlp = Mlp::from_file(&f.mlp)?;
        if mlp.input_dim() != f.input_spec.dim()
            || mlp.output_dim() != f.output_buses.len()
            || f.normalizer.dim() != f.input_spec.dim()
            || f.target_normalizer.dim() != f.output_buses.len()
        {
            return Err(EstimatorError::Format("dimensions disagree".into()));
        }
        Ok(LoadEstimator {
            mlp,
            input_spec: f.input_spec,
            output_buses: f.output_buses,
            normalizer: f.normalizer,
            target_normalizer: f.target_normalizer,
            topology_fingerprint: f.topology_fingerprint,
            power_factor: f.power_factor,
            holdout_mae: f.holdout_mae,
            loss_history: f.loss_history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EstimatorError> {
        fs::write(path, self.to_json() + "\n")
            .map_err(|e| EstimatorError::Format(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, EstimatorError> {
        let text = fs::read_to_string(path)
            .map_err(|e| EstimatorError::Format(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
