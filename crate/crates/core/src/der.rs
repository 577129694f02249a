//! cosφ(P) reactive-power control of PV inverters.
//!
//! Below the knee the inverter runs at unity power factor. Between the knee
//! and `end_p` the power factor falls linearly to `cosphi_end`
//! (underexcited), and above `end_p` it is held there. Reactive power is
//! reported as a fraction of rated power, negative when the inverter absorbs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::BusId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ControlCurveVariant {
    Correct,
    /// Flat curve: no reactive power at all.
    Wrong,
    /// Sign-flipped curve.
    Inverted,
}

impl ControlCurveVariant {
    pub const ALL: [ControlCurveVariant; 3] = [
        ControlCurveVariant::Correct,
        ControlCurveVariant::Wrong,
        ControlCurveVariant::Inverted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControlCurveVariant::Correct => "Correct",
            ControlCurveVariant::Wrong => "Wrong",
            ControlCurveVariant::Inverted => "Inverted",
        }
    }
}

impl fmt::Display for ControlCurveVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControlCurveVariant {
    type Err = DerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "correct" => Ok(ControlCurveVariant::Correct),
            "wrong" => Ok(ControlCurveVariant::Wrong),
            "inverted" | "inversed" => Ok(ControlCurveVariant::Inverted),
            _ => Err(DerError::InvalidInput(format!(
                "unknown control curve variant {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DerError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosPhiCurve {
    pub knee_p: f64,
    pub end_p: f64,
    pub cosphi_end: f64,
}

impl Default for CosPhiCurve {
    fn default() -> Self {
        CosPhiCurve {
            knee_p: 0.5,
            end_p: 1.0,
            cosphi_end: 0.9,
        }
    }
}

impl CosPhiCurve {
    pub fn validate(&self) -> Result<(), DerError> {
        let ok = self.knee_p >= 0.0
            && self.knee_p < self.end_p
            && self.end_p <= 1.0
            && self.cosphi_end > 0.0
            && self.cosphi_end <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(DerError::InvalidInput(format!(
                "invalid cosφ(P) curve {self:?}"
            )))
        }
    }

    /// Power factor commanded at `p_frac`.
    pub fn power_factor(&self, p_frac: f64) -> f64 {
        if p_frac <= self.knee_p {
            1.0
        } else if p_frac <= self.end_p {
            let t = (p_frac - self.knee_p) / (self.end_p - self.knee_p);
            1.0 - (1.0 - self.cosphi_end) * t
        } else {
            self.cosphi_end
        }
    }
}

/// Reactive setpoint of a correctly configured inverter, as a fraction of
/// rated power.
pub fn reactive_setpoint(curve: &CosPhiCurve, p_frac: f64) -> Result<f64, DerError> {
    if !p_frac.is_finite() || p_frac < 0.0 {
        return Err(DerError::InvalidInput(format!(
            "active power fraction must be finite and nonnegative, got {p_frac}"
        )));
    }
    if p_frac <= curve.knee_p {
        return Ok(0.0);
    }
    let cosphi = curve.power_factor(p_frac);
    Ok(-p_frac * cosphi.acos().tan())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PvInverter {
    pub bus: BusId,
    pub rated_kw: f64,
    pub variant: ControlCurveVariant,
    #[serde(default)]
    pub curve: CosPhiCurve,
}

impl PvInverter {
    pub fn new(bus: usize, rated_kw: f64) -> Self {
        PvInverter {
            bus: BusId(bus),
            rated_kw,
            variant: ControlCurveVariant::Correct,
            curve: CosPhiCurve::default(),
        }
    }

    pub fn validate(&self) -> Result<(), DerError> {
        if !(self.rated_kw > 0.0 && self.rated_kw.is_finite()) {
            return Err(DerError::InvalidInput(format!(
                "inverter at bus {} has non-positive rating",
                self.bus
            )));
        }
        self.curve.validate()
    }

    /// Setpoint under the inverter's own configured variant.
    pub fn setpoint(&self, p_frac: f64) -> Result<f64, DerError> {
        variant_setpoint_with(self.variant, &self.curve, p_frac)
    }
}

pub fn variant_setpoint(inverter: &PvInverter, p_frac: f64) -> Result<f64, DerError> {
    inverter.setpoint(p_frac)
}

/// Setpoint of `curve` when the inverter is configured as `variant`.
pub fn variant_setpoint_with(
    variant: ControlCurveVariant,
    curve: &CosPhiCurve,
    p_frac: f64,
) -> Result<f64, DerError> {
    let q = reactive_setpoint(curve, p_frac)?;
    Ok(match variant {
        ControlCurveVariant::Correct => q,
        ControlCurveVariant::Wrong => 0.0,
        ControlCurveVariant::Inverted => -q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn below_and_at_knee_is_zero() {
        let c = CosPhiCurve::default();
        assert_eq!(reactive_setpoint(&c, 0.0).unwrap(), 0.0);
        assert_eq!(reactive_setpoint(&c, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn rated_point() {
        let c = CosPhiCurve::default();
        let q = reactive_setpoint(&c, 1.0).unwrap();
        // tan(arccos 0.9) = sqrt(1 - 0.81) / 0.9
        let expected = -(0.19f64).sqrt() / 0.9;
        assert!((q - expected).abs() < 1e-12);
        assert!((q + 0.4843).abs() < 1e-4);
    }

    #[test]
    fn negative_power_rejected() {
        assert!(reactive_setpoint(&CosPhiCurve::default(), -0.1).is_err());
    }

    #[test]
    fn variants_at_rated_and_below_knee() {
        let mut inv = PvInverter::new(1, 10.0);
        inv.variant = ControlCurveVariant::Wrong;
        assert_eq!(inv.setpoint(1.0).unwrap(), 0.0);
        inv.variant = ControlCurveVariant::Inverted;
        assert!((inv.setpoint(1.0).unwrap() - 0.4843).abs() < 1e-4);
        assert_eq!(inv.setpoint(0.3).unwrap(), 0.0);
    }

    #[test]
    fn curve_is_continuous() {
        // tan(arccos c) ~ sqrt(2(1 - c)) just above the knee, so the curve is
        // Hölder-1/2 there rather than Lipschitz.
        let c = CosPhiCurve::default();
        let step: f64 = 1e-6;
        let bound = 2.0 * step.sqrt();
        let mut prev = reactive_setpoint(&c, 0.0).unwrap();
        let mut p = step;
        while p <= 1.2 {
            let q = reactive_setpoint(&c, p).unwrap();
            assert!((q - prev).abs() < bound, "jump at p = {p}");
            prev = q;
            p += step;
        }
    }

    #[test]
    fn above_end_holds_power_factor() {
        let c = CosPhiCurve::default();
        let q = reactive_setpoint(&c, 1.2).unwrap();
        assert!((q / 1.2 - reactive_setpoint(&c, 1.0).unwrap()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn variant_relations(p in 0.0f64..1.5) {
            let c = CosPhiCurve::default();
            let correct = variant_setpoint_with(ControlCurveVariant::Correct, &c, p).unwrap();
            let wrong = variant_setpoint_with(ControlCurveVariant::Wrong, &c, p).unwrap();
            let inverted = variant_setpoint_with(ControlCurveVariant::Inverted, &c, p).unwrap();
            prop_assert_eq!(wrong, 0.0);
            prop_assert_eq!(inverted, -correct);
        }

        #[test]
        fn magnitude_bounded_by_end_power_factor(p in 0.0f64..=1.0) {
            let c = CosPhiCurve::default();
            let q = reactive_setpoint(&c, p).unwrap();
            prop_assert!(q.abs() <= p * c.cosphi_end.acos().tan() + 1e-15);
        }
    }
}
