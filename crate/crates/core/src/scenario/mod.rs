//! Time-series scenario engine.
//!
//! For every high-resolution timestep a scenario draws household loads and PV
//! production, sets each inverter's reactive power from its (possibly
//! misconfigured) control curve, solves the power flow and records the
//! substation channels. Per-bus voltage magnitudes are read at every meter
//! boundary, the way a meter register would be read.
//!
//! All noise comes from per-(day, bus) seed substreams, so days can be
//! simulated in any order or in parallel with identical results.

mod io;
mod profiles;

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::der::{variant_setpoint_with, ControlCurveVariant, PvInverter};
use crate::grid::{
    aggregate_substation, solve_power_flow, BusId, GridError, GridFile, GridFingerprint,
    PowerFlowResult, SubstationRecord, ValidatedTopology,
};
use crate::rng;

pub use io::{read_measurement_set, write_measurement_set};
pub use profiles::{
    cloud_factors, generate_load_profile, generate_pv_profile, steps_per_day, IrradianceModel,
    LoadProfileModel,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("step of {0} s does not divide a day")]
    InvalidCadence(u32),
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("day {day}, step {step}: {source}")]
    NonConvergence {
        day: u32,
        step: usize,
        #[source]
        source: GridError,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusLoad {
    pub bus: BusId,
    #[serde(flatten)]
    pub model: LoadProfileModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MalfunctionSchedule {
    pub inverter_bus: BusId,
    pub variant: ControlCurveVariant,
    pub start_day: u32,
}

fn default_highres_step() -> u32 {
    60
}

fn default_meter_step() -> u32 {
    900
}

fn default_slack_voltage() -> f64 {
    1.0
}

/// Everything about a scenario except the grid itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub loads: Vec<BusLoad>,
    #[serde(default)]
    pub irradiance: IrradianceModel,
    pub days: u32,
    #[serde(default)]
    pub first_day: u32,
    #[serde(default = "default_highres_step")]
    pub highres_step_s: u32,
    #[serde(default = "default_meter_step")]
    pub meter_step_s: u32,
    #[serde(default)]
    pub schedule: Option<MalfunctionSchedule>,
    pub seed: u64,
    #[serde(default = "default_slack_voltage")]
    pub slack_voltage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub grid: GridFile,
    #[serde(flatten)]
    pub params: ScenarioParams,
}

/// A grid that passed validation, with its inverters.
#[derive(Clone, Debug)]
pub struct GridContext {
    pub topo: ValidatedTopology,
    pub inverters: Vec<PvInverter>,
    pub fingerprint: GridFingerprint,
}

impl GridContext {
    pub fn new(grid: &GridFile) -> Result<Self, GridError> {
        let (topo, inverters) = grid.validated()?;
        Ok(GridContext {
            topo,
            inverters,
            fingerprint: grid.fingerprint(),
        })
    }

    pub fn base_kva(&self) -> f64 {
        self.topo.topology().base_power
    }

    pub fn inverter_buses(&self) -> Vec<BusId> {
        self.inverters.iter().map(|i| i.bus).collect()
    }

    pub fn channel_names(&self) -> Vec<String> {
        SubstationRecord::channel_names(&self.topo)
    }
}

/// One solved operating point together with the inverter setpoints used.
#[derive(Clone, Debug)]
pub struct StepSolution {
    pub flow: PowerFlowResult,
    /// Reactive power per inverter in kvar, generation positive.
    pub inverter_q_kvar: Vec<f64>,
}

/// Solve one operating point. `loads_kw`/`loads_kvar` are indexed by bus,
/// `pv_kw` and `variants` by inverter.
pub fn solve_step(
    ctx: &GridContext,
    loads_kw: &[f64],
    loads_kvar: &[f64],
    pv_kw: &[f64],
    variants: &[ControlCurveVariant],
    slack_voltage: f64,
) -> Result<StepSolution, GridError> {
    let n = ctx.topo.bus_count();
    let base = ctx.base_kva();
    let mut demand: Vec<Complex64> = (0..n)
        .map(|b| Complex64::new(loads_kw[b], loads_kvar[b]) / base)
        .collect();
    let mut inverter_q_kvar = Vec::with_capacity(ctx.inverters.len());
    for ((inv, &p), &variant) in ctx.inverters.iter().zip(pv_kw).zip(variants) {
        let q_frac = variant_setpoint_with(variant, &inv.curve, p / inv.rated_kw)
            .map_err(|e| GridError::InvalidInput(e.to_string()))?;
        let q = q_frac * inv.rated_kw;
        demand[inv.bus.0] -= Complex64::new(p, q) / base;
        inverter_q_kvar.push(q);
    }
    demand[0] = Complex64::new(0.0, 0.0);
    let flow = solve_power_flow(&ctx.topo, &demand, slack_voltage)?;
    Ok(StepSolution {
        flow,
        inverter_q_kvar,
    })
}

/// Measurements of one day.
#[derive(Clone, Debug, PartialEq)]
pub struct DayMeasurements {
    pub day: u32,
    /// Timesteps × substation channels.
    pub substation: Array2<f64>,
    /// Voltage magnitude (pu) per bus at meter cadence.
    pub meters: BTreeMap<BusId, Vec<f64>>,
    /// Known PV production per inverter bus (kW) at high resolution.
    pub pv_kw: BTreeMap<BusId, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMetadata {
    pub channel_names: Vec<String>,
    pub meter_buses: Vec<BusId>,
    pub pv_buses: Vec<BusId>,
    pub highres_step_s: u32,
    pub meter_step_s: u32,
    pub first_day: u32,
    pub days: u32,
    pub seed: u64,
    pub schedule: Option<MalfunctionSchedule>,
    pub grid_fingerprint: GridFingerprint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub metadata: MeasurementMetadata,
    pub days: Vec<DayMeasurements>,
}

impl MeasurementSet {
    pub fn day(&self, day: u32) -> Option<&DayMeasurements> {
        self.days.iter().find(|d| d.day == day)
    }

    /// Copy with every meter series except `keep` removed.
    pub fn censored_to(&self, keep: BusId) -> MeasurementSet {
        let mut out = self.clone();
        for d in &mut out.days {
            d.meters.retain(|b, _| *b == keep);
        }
        out
    }
}

/// Ground truth that the measurements do not expose.
#[derive(Clone, Debug, PartialEq)]
pub struct DayTrace {
    pub day: u32,
    pub loads_kw: BTreeMap<BusId, Vec<f64>>,
    pub inverter_q_kvar: BTreeMap<BusId, Vec<f64>>,
    pub inverter_p_frac: BTreeMap<BusId, Vec<f64>>,
    pub variants: BTreeMap<BusId, ControlCurveVariant>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<GridContext, ScenarioError> {
        let ctx = GridContext::new(&self.grid)?;
        let p = &self.params;
        if p.days < 1 {
            return Err(ScenarioError::InvalidConfig(
                "days must be at least 1".into(),
            ));
        }
        steps_per_day(p.highres_step_s)?;
        steps_per_day(p.meter_step_s)?;
        if !p.meter_step_s.is_multiple_of(p.highres_step_s) {
            return Err(ScenarioError::InvalidConfig(
                "meter step must be a multiple of the high-resolution step".into(),
            ));
        }
        if !(p.slack_voltage > 0.0 && p.slack_voltage.is_finite()) {
            return Err(ScenarioError::InvalidConfig(
                "slack voltage must be positive".into(),
            ));
        }
        p.irradiance.validate()?;
        let mut seen = HashSet::new();
        for l in &p.loads {
            if l.bus == BusId::SLACK || l.bus.0 >= ctx.topo.bus_count() {
                return Err(ScenarioError::InvalidConfig(format!(
                    "load at bus {} is not on a load bus",
                    l.bus
                )));
            }
            if !seen.insert(l.bus) {
                return Err(ScenarioError::InvalidConfig(format!(
                    "bus {} has more than one load model",
                    l.bus
                )));
            }
            l.model.validate()?;
        }
        if let Some(s) = &p.schedule {
            if s.variant == ControlCurveVariant::Correct {
                return Err(ScenarioError::InvalidConfig(
                    "a malfunction schedule cannot inject the correct curve".into(),
                ));
            }
            if !ctx.inverters.iter().any(|i| i.bus == s.inverter_bus) {
                return Err(ScenarioError::InvalidConfig(format!(
                    "no inverter at scheduled bus {}",
                    s.inverter_bus
                )));
            }
        }
        Ok(ctx)
    }

    /// Control curve of each inverter on `day`, schedule applied.
    pub fn variants_on_day(&self, ctx: &GridContext, day: u32) -> Vec<ControlCurveVariant> {
        ctx.inverters
            .iter()
            .map(|inv| match &self.params.schedule {
                Some(s) if s.inverter_bus == inv.bus && day >= s.start_day => s.variant,
                _ => inv.variant,
            })
            .collect()
    }

    pub fn day_indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.params.first_day..self.params.first_day + self.params.days
    }

    fn metadata(&self, ctx: &GridContext) -> MeasurementMetadata {
        MeasurementMetadata {
            channel_names: ctx.channel_names(),
            meter_buses: (1..ctx.topo.bus_count()).map(BusId).collect(),
            pv_buses: ctx.inverter_buses(),
            highres_step_s: self.params.highres_step_s,
            meter_step_s: self.params.meter_step_s,
            first_day: self.params.first_day,
            days: self.params.days,
            seed: self.params.seed,
            schedule: self.params.schedule,
            grid_fingerprint: ctx.fingerprint.clone(),
        }
    }
}

/// Simulate one day with explicit per-inverter control curves.
pub fn simulate_day(
    config: &ScenarioConfig,
    ctx: &GridContext,
    day: u32,
    variants: &[ControlCurveVariant],
) -> Result<(DayMeasurements, DayTrace), ScenarioError> {
    let p = &config.params;
    let n = ctx.topo.bus_count();
    let steps = steps_per_day(p.highres_step_s)?;
    let meter_every = (p.meter_step_s / p.highres_step_s) as usize;

    let mut load_series = vec![vec![0.0; steps]; n];
    let mut tan_phi = vec![0.0; n];
    for l in &p.loads {
        let seed = rng::derive_seed(p.seed, "load", &[l.bus.0 as u64]);
        load_series[l.bus.0] = generate_load_profile(&l.model, day, p.highres_step_s, seed)?;
        tan_phi[l.bus.0] = l.model.tan_phi();
    }
    let clouds = cloud_factors(
        &p.irradiance,
        day,
        p.highres_step_s,
        rng::derive_seed(p.seed, "pv", &[]),
    )?;
    let pv_series: Vec<Vec<f64>> = ctx
        .inverters
        .iter()
        .map(|inv| {
            clouds
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let t = (k as f64) * f64::from(p.highres_step_s) / 3600.0;
                    inv.rated_kw * p.irradiance.clear_sky(t) * c
                })
                .collect()
        })
        .collect();

    let channels = SubstationRecord::channel_count(ctx.topo.feeders().len());
    let mut substation = Array2::zeros((steps, channels));
    let mut meters: BTreeMap<BusId, Vec<f64>> = (1..n)
        .map(|b| (BusId(b), Vec::with_capacity(steps / meter_every)))
        .collect();
    let mut q_trace = vec![Vec::with_capacity(steps); ctx.inverters.len()];

    let mut loads_kw = vec![0.0; n];
    let mut loads_kvar = vec![0.0; n];
    let mut pv_kw = vec![0.0; ctx.inverters.len()];
    for k in 0..steps {
        for b in 0..n {
            loads_kw[b] = load_series[b][k];
            loads_kvar[b] = load_series[b][k] * tan_phi[b];
        }
        for (i, s) in pv_series.iter().enumerate() {
            pv_kw[i] = s[k];
        }
        let sol = solve_step(
            ctx,
            &loads_kw,
            &loads_kvar,
            &pv_kw,
            variants,
            p.slack_voltage,
        )
        .map_err(|source| ScenarioError::NonConvergence {
            day,
            step: k,
            source,
        })?;
        let rec = aggregate_substation(&sol.flow, &ctx.topo);
        for (c, v) in rec.values().into_iter().enumerate() {
            substation[[k, c]] = v;
        }
        if k % meter_every == 0 {
            for (bus, series) in meters.iter_mut() {
                series.push(sol.flow.voltages[bus.0].norm());
            }
        }
        for (i, q) in sol.inverter_q_kvar.iter().enumerate() {
            q_trace[i].push(*q);
        }
    }

    let inverter_buses = ctx.inverter_buses();
    let pv_map: BTreeMap<BusId, Vec<f64>> = inverter_buses.iter().copied().zip(pv_series).collect();
    let trace = DayTrace {
        day,
        loads_kw: (1..n).map(|b| (BusId(b), load_series[b].clone())).collect(),
        inverter_q_kvar: inverter_buses.iter().copied().zip(q_trace).collect(),
        inverter_p_frac: ctx
            .inverters
            .iter()
            .map(|inv| {
                let s = &pv_map[&inv.bus];
                (inv.bus, s.iter().map(|p| p / inv.rated_kw).collect())
            })
            .collect(),
        variants: inverter_buses
            .iter()
            .copied()
            .zip(variants.iter().copied())
            .collect(),
    };
    Ok((
        DayMeasurements {
            day,
            substation,
            meters,
            pv_kw: pv_map,
        },
        trace,
    ))
}

/// Run a full scenario, returning the measurements and the hidden ground truth.
pub fn run_scenario_traced(
    config: &ScenarioConfig,
) -> Result<(MeasurementSet, Vec<DayTrace>), ScenarioError> {
    let ctx = config.validate()?;
    let days: Vec<u32> = config.day_indices().collect();
    let results: Vec<(DayMeasurements, DayTrace)> = days
        .par_iter()
        .map(|&day| simulate_day(config, &ctx, day, &config.variants_on_day(&ctx, day)))
        .collect::<Result<_, _>>()?;
    let (days, traces) = results.into_iter().unzip();
    Ok((
        MeasurementSet {
            metadata: config.metadata(&ctx),
            days,
        },
        traces,
    ))
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<MeasurementSet, ScenarioError> {
    run_scenario_traced(config).map(|(m, _)| m)
}

/// Household load models with randomized peaks for every non-slack bus.
pub fn household_loads(bus_count: usize, seed: u64) -> Vec<BusLoad> {
    (1..bus_count)
        .map(|b| {
            let mut rng = rng::substream(seed, "household", &[b as u64]);
            BusLoad {
                bus: BusId(b),
                model: LoadProfileModel {
                    base_kw: rng.random_range(0.2..0.5),
                    morning_peak_kw: rng.random_range(0.5..1.5),
                    evening_peak_kw: rng.random_range(1.0..2.5),
                    peak_width_h: rng.random_range(1.0..2.0),
                    noise_sigma_kw: 0.15,
                    power_factor: 0.95,
                },
            }
        })
        .collect()
}

impl ScenarioConfig {
    /// Scenario with household loads on every bus and default irradiance.
    pub fn standard(grid: GridFile, days: u32, seed: u64) -> Self {
        let loads = household_loads(grid.buses.len(), seed);
        ScenarioConfig {
            grid,
            params: ScenarioParams {
                loads,
                irradiance: IrradianceModel::default(),
                days,
                first_day: 0,
                highres_step_s: default_highres_step(),
                meter_step_s: default_meter_step(),
                schedule: None,
                seed,
                slack_voltage: default_slack_voltage(),
            },
        }
    }
}
