//! Meter windows from measurement sets and labeled simulations.

use rayon::prelude::*;

use super::{MeterWindow, RtError};
use crate::der::ControlCurveVariant;
use crate::features::ClassLabel;
use crate::grid::BusId;
use crate::scenario::{simulate_day, MeasurementSet, ScenarioConfig};

/// One window per day from `bus`'s meter series.
pub fn meter_windows(
    set: &MeasurementSet,
    bus: BusId,
    label: impl Fn(u32) -> ClassLabel,
) -> Result<Vec<MeterWindow>, RtError> {
    set.days
        .iter()
        .map(|d| {
            let values = d.meters.get(&bus).ok_or_else(|| RtError::InvalidWindow {
                bus: bus.0,
                day: d.day,
                reason: "no meter series for this bus".into(),
            })?;
            Ok(MeterWindow {
                values: values.clone(),
                bus,
                day: d.day,
                label: label(d.day),
                grid: set.metadata.grid_fingerprint.clone(),
            })
        })
        .collect()
}

/// Balanced pretraining windows: for every scenario day and PV bus, the
/// bus's window with all inverters correct, and its window with only that
/// bus's inverter on the `use_case` curve. The scenario's own malfunction
/// schedule is ignored.
pub fn simulate_labeled_windows(
    config: &ScenarioConfig,
    use_case: ClassLabel,
) -> Result<Vec<MeterWindow>, RtError> {
    let faulty = match use_case.variant() {
        Some(v) if v != ControlCurveVariant::Correct => v,
        _ => {
            return Err(RtError::InvalidConfig(format!(
                "use case {use_case} is not a single malfunction class"
            )))
        }
    };
    let ctx = config.validate()?;
    let days: Vec<u32> = config.day_indices().collect();
    let per_day = days
        .par_iter()
        .map(|&day| {
            let n = ctx.inverters.len();
            let correct = vec![ControlCurveVariant::Correct; n];
            let (base, _) = simulate_day(config, &ctx, day, &correct)?;
            let mut out = Vec::with_capacity(2 * n);
            for (i, inv) in ctx.inverters.iter().enumerate() {
                let mut variants = correct.clone();
                variants[i] = faulty;
                let (bad, _) = simulate_day(config, &ctx, day, &variants)?;
                for (m, label) in [(&base, ClassLabel::Correct), (&bad, use_case)] {
                    out.push(MeterWindow {
                        values: m.meters[&inv.bus].clone(),
                        bus: inv.bus,
                        day,
                        label,
                        grid: ctx.fingerprint.clone(),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, RtError>>()?;
    Ok(per_day.into_iter().flatten().collect())
}
