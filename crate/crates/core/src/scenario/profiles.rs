//! Synthetic household load and PV production profiles.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ScenarioError;
use crate::rng;

const MORNING_PEAK_H: f64 = 7.5;
const EVENING_PEAK_H: f64 = 19.0;
const SECONDS_PER_DAY: u32 = 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadProfileModel {
    pub base_kw: f64,
    pub morning_peak_kw: f64,
    pub evening_peak_kw: f64,
    pub peak_width_h: f64,
    pub noise_sigma_kw: f64,
    #[serde(default = "default_power_factor")]
    pub power_factor: f64,
}

fn default_power_factor() -> f64 {
    0.95
}

impl LoadProfileModel {
    pub fn constant(kw: f64) -> Self {
        LoadProfileModel {
            base_kw: kw,
            morning_peak_kw: 0.0,
            evening_peak_kw: 0.0,
            peak_width_h: 1.0,
            noise_sigma_kw: 0.0,
            power_factor: default_power_factor(),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let powers = [
            self.base_kw,
            self.morning_peak_kw,
            self.evening_peak_kw,
            self.noise_sigma_kw,
        ];
        if powers.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ScenarioError::InvalidConfig(
                "load profile powers must be finite and nonnegative".into(),
            ));
        }
        if self.peak_width_h.is_nan() || self.peak_width_h <= 0.0 {
            return Err(ScenarioError::InvalidConfig(
                "peak width must be positive".into(),
            ));
        }
        if !(self.power_factor > 0.0 && self.power_factor <= 1.0) {
            return Err(ScenarioError::InvalidConfig(
                "power factor must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Reactive-to-active power ratio implied by the power factor.
    pub fn tan_phi(&self) -> f64 {
        self.power_factor.acos().tan()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrradianceModel {
    pub sunrise_h: f64,
    pub sunset_h: f64,
    pub peak_kw_per_kwp: f64,
    pub cloud_noise_sigma: f64,
}

impl Default for IrradianceModel {
    fn default() -> Self {
        IrradianceModel {
            sunrise_h: 6.0,
            sunset_h: 20.0,
            peak_kw_per_kwp: 0.9,
            cloud_noise_sigma: 0.1,
        }
    }
}

impl IrradianceModel {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let ok = self.sunrise_h >= 0.0
            && self.sunrise_h < self.sunset_h
            && self.sunset_h <= 24.0
            && self.peak_kw_per_kwp > 0.0
            && self.peak_kw_per_kwp <= 1.0
            && self.cloud_noise_sigma >= 0.0
            && self.cloud_noise_sigma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ScenarioError::InvalidConfig(format!(
                "invalid irradiance model {self:?}"
            )))
        }
    }

    /// Clear-sky production per kWp at hour `t`.
    pub fn clear_sky(&self, t_h: f64) -> f64 {
        if t_h <= self.sunrise_h || t_h >= self.sunset_h {
            return 0.0;
        }
        let x = (t_h - self.sunrise_h) / (self.sunset_h - self.sunrise_h);
        self.peak_kw_per_kwp * (PI * x).sin().powi(2)
    }
}

pub fn steps_per_day(step_s: u32) -> Result<usize, ScenarioError> {
    if step_s == 0 || !SECONDS_PER_DAY.is_multiple_of(step_s) {
        return Err(ScenarioError::InvalidCadence(step_s));
    }
    Ok((SECONDS_PER_DAY / step_s) as usize)
}

fn gaussian_bump(t: f64, centre: f64, width: f64) -> f64 {
    let d = (t - centre) / width;
    (-0.5 * d * d).exp()
}

/// Household active power in kW for one day: base load plus morning and
/// evening Gaussian bumps plus seeded Gaussian noise, floored at zero.
pub fn generate_load_profile(
    model: &LoadProfileModel,
    day: u32,
    step_s: u32,
    rng_seed: u64,
) -> Result<Vec<f64>, ScenarioError> {
    let n = steps_per_day(step_s)?;
    let mut rng = rng::substream(rng_seed, "load-profile", &[u64::from(day)]);
    Ok((0..n)
        .map(|k| {
            let t = (k as f64) * f64::from(step_s) / 3600.0;
            let shape = model.base_kw
                + model.morning_peak_kw * gaussian_bump(t, MORNING_PEAK_H, model.peak_width_h)
                + model.evening_peak_kw * gaussian_bump(t, EVENING_PEAK_H, model.peak_width_h);
            let noise: f64 = StandardNormal.sample(&mut rng);
            (shape + model.noise_sigma_kw * noise).max(0.0)
        })
        .collect())
}

/// Cloud attenuation factor per step, shared by all PV units of a grid.
pub fn cloud_factors(
    model: &IrradianceModel,
    day: u32,
    step_s: u32,
    rng_seed: u64,
) -> Result<Vec<f64>, ScenarioError> {
    let n = steps_per_day(step_s)?;
    let mut rng = rng::substream(rng_seed, "pv-profile", &[u64::from(day)]);
    Ok((0..n)
        .map(|_| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            (1.0 + model.cloud_noise_sigma * noise).clamp(0.0, 1.0)
        })
        .collect())
}

/// PV active power in kW for one day: a sine-squared arc between sunrise and
/// sunset scaled by `capacity_kwp * peak_kw_per_kwp`, times a cloud factor
/// clipped to [0, 1].
pub fn generate_pv_profile(
    model: &IrradianceModel,
    capacity_kwp: f64,
    day: u32,
    step_s: u32,
    rng_seed: u64,
) -> Result<Vec<f64>, ScenarioError> {
    let clouds = cloud_factors(model, day, step_s, rng_seed)?;
    Ok(clouds
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let t = (k as f64) * f64::from(step_s) / 3600.0;
            capacity_kwp * model.clear_sky(t) * c
        })
        .collect())
}
