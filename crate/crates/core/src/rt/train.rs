//! Pretraining, detection and persistence of R-Transformer models.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Normalization, RtConfig, RtError, RtModel};
use crate::features::ClassLabel;
use crate::grid::{BusId, GridFingerprint};
use crate::nn::{OptimizerState, TrainConfig};

pub const RT_FORMAT_VERSION: u32 = 1;
pub const MIN_PRETRAIN_GRIDS: usize = 3;

/// One day of one bus's meter voltages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeterWindow {
    /// Voltage magnitudes in pu.
    pub values: Vec<f64>,
    pub bus: BusId,
    pub day: u32,
    pub label: ClassLabel,
    pub grid: GridFingerprint,
}

impl MeterWindow {
    pub fn validate(&self, len: usize) -> Result<(), RtError> {
        let err = |reason: String| RtError::InvalidWindow {
            bus: self.bus.0,
            day: self.day,
            reason,
        };
        if self.values.len() != len {
            return Err(err(format!(
                "length {} instead of {len}",
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(err("voltages must be finite and positive".into()));
        }
        Ok(())
    }
}

/// What a decentral detector transmits: no voltages, only the verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceFlag {
    pub day: u32,
    pub bus: BusId,
    pub use_case: ClassLabel,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub loss_history: Vec<f64>,
    pub grids: usize,
    pub correct_windows: usize,
    pub malfunction_windows: usize,
}

fn target_of(model: &RtModel, label: ClassLabel) -> Result<usize, RtError> {
    if label == ClassLabel::Correct {
        Ok(0)
    } else if label == model.use_case {
        Ok(1)
    } else {
        Err(RtError::InvalidConfig(format!(
            "label {label} in a training set for use case {}",
            model.use_case
        )))
    }
}

/// Mean cross-entropy and mean gradient over `windows`. Per-sample
/// gradients are computed in parallel and summed in window order.
pub fn batch_gradient(
    model: &RtModel,
    windows: &[&MeterWindow],
) -> Result<(f64, super::RtWeights), RtError> {
    if windows.is_empty() {
        return Err(RtError::Nn(crate::nn::NnError::EmptyDataset));
    }
    let parts = windows
        .par_iter()
        .map(|w| {
            let x = model.normalize(&w.values)?;
            model.loss_and_grad(x, target_of(model, w.label)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grad) = iter.next().expect("nonempty batch");
    for (l, g) in iter {
        loss += l;
        grad.add_assign(&g);
    }
    let n = windows.len() as f64;
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

/// Cross-entropy training on windows labeled `Correct` or the model's use
/// case, drawn from at least three distinct grids. Voltage mean and
/// standard deviation over the whole set are stored in the model.
pub fn pretrain(
    model: &RtModel,
    windows: &[MeterWindow],
    config: &TrainConfig,
) -> Result<(RtModel, PretrainReport), RtError> {
    config.validate()?;
    let len = model.config.sequence_len;
    for w in windows {
        w.validate(len)?;
        target_of(model, w.label)?;
    }
    let correct = windows
        .iter()
        .filter(|w| w.label == ClassLabel::Correct)
        .count();
    let malfunction = windows.len() - correct;
    if correct == 0 || malfunction == 0 {
        return Err(RtError::SingleClassInput);
    }
    let grids: BTreeSet<&GridFingerprint> = windows.iter().map(|w| &w.grid).collect();
    if grids.len() < MIN_PRETRAIN_GRIDS {
        return Err(RtError::TooFewGrids(grids.len(), MIN_PRETRAIN_GRIDS));
    }

    let centered = model.config.normalization == Normalization::Centered;
    let shifted: Vec<f64> = windows
        .iter()
        .flat_map(|w| {
            let m = if centered {
                w.values.iter().sum::<f64>() / len as f64
            } else {
                0.0
            };
            w.values.iter().map(move |v| v - m)
        })
        .collect();
    let count = shifted.len() as f64;
    let mean = shifted.iter().sum::<f64>() / count;
    let var = shifted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    let mut out = model.clone();
    out.norm_mean = mean;
    out.norm_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };

    let mut params = out.weights.flat();
    let mut opt = OptimizerState::new(config.optimizer, params.len());
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = config.epoch_order(epoch, windows.len());
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let refs: Vec<&MeterWindow> = batch.iter().map(|&i| &windows[i]).collect();
            let (loss, grad) = batch_gradient(&out, &refs)?;
            total += loss * batch.len() as f64;
            opt.step(&mut params, &grad.flat());
            crate::nn::ensure_finite(params.iter(), "R-Transformer parameters")?;
            out.weights.set_flat(&params);
        }
        let epoch_loss = total / windows.len() as f64;
        log::debug!("rt epoch {epoch}: loss {epoch_loss:.5}");
        history.push(epoch_loss);
    }
    Ok((
        out,
        PretrainReport {
            loss_history: history,
            grids: grids.len(),
            correct_windows: correct,
            malfunction_windows: malfunction,
        },
    ))
}

/// Flag `bus`'s day of voltages when the malfunction probability reaches
/// `threshold` (closed boundary).
pub fn detect(
    model: &RtModel,
    bus: BusId,
    day: u32,
    values: &[f64],
    threshold: f64,
) -> Result<Option<DeviceFlag>, RtError> {
    let p = model.classify(values)?[1];
    Ok((p >= threshold).then_some(DeviceFlag {
        day,
        bus,
        use_case: model.use_case,
        probability: p,
    }))
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RtFile {
    format_version: u32,
    config: RtConfig,
    use_case: ClassLabel,
    norm_mean: f64,
    norm_std: f64,
    tensors: Vec<TensorFile>,
}

impl RtModel {
    pub fn to_json(&self) -> String {
        let f = RtFile {
            format_version: RT_FORMAT_VERSION,
            config: self.config.clone(),
            use_case: self.use_case,
            norm_mean: self.norm_mean,
            norm_std: self.norm_std,
            tensors: self
                .weights
                .named()
                .into_iter()
                .map(|(name, t)| TensorFile {
                    name,
                    rows: t.nrows(),
                    cols: t.ncols(),
                    data: t.iter().copied().collect(),
                })
                .collect(),
        };
        serde_json::to_string(&f).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RtError> {
        let f: RtFile = serde_json::from_str(text).map_err(|e| RtError::Format(e.to_string()))?;
        if f.format_version != RT_FORMAT_VERSION {
            return Err(RtError::Format(format!(
                "unsupported format version {}",
                f.format_version
            )));
        }
        if f.use_case == ClassLabel::Correct {
            return Err(RtError::Format(
                "use case must be a malfunction class".into(),
            ));
        }
        let mut model = RtModel::new(f.config, f.use_case, 0)?;
        let expected: Vec<(String, (usize, usize))> = model
            .weights
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.dim()))
            .collect();
        if expected.len() != f.tensors.len() {
            return Err(RtError::Format("tensor count differs from config".into()));
        }
        let mut flat = Vec::with_capacity(model.weights.param_count());
        for ((name, dim), t) in expected.iter().zip(&f.tensors) {
            if *name != t.name || *dim != (t.rows, t.cols) || t.data.len() != t.rows * t.cols {
                return Err(RtError::Format(format!(
                    "tensor {} does not match config",
                    t.name
                )));
            }
            flat.extend(&t.data);
        }
        model.weights.set_flat(&flat);
        model.norm_mean = f.norm_mean;
        model.norm_std = f.norm_std;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), RtError> {
        fs::write(path, self.to_json() + "\n")
            .map_err(|e| RtError::Format(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, RtError> {
        let text = fs::read_to_string(path)
            .map_err(|e| RtError::Format(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Loss, OptimizerKind};

    fn tiny() -> RtConfig {
        RtConfig {
            window_w: 2,
            model_dim: 4,
            heads: 2,
            blocks: 1,
            classes: 2,
            sequence_len: 8,
            normalization: Normalization::Global,
        }
    }

    fn window(day: u32, label: ClassLabel, grid: &str) -> MeterWindow {
        let bump = if label == ClassLabel::Correct {
            0.0
        } else {
            0.02
        };
        MeterWindow {
            values: (0..8)
                .map(|i| 1.0 + bump * (i as f64 / 7.0 * 3.1).sin() + 0.001 * day as f64)
                .collect(),
            bus: BusId(3),
            day,
            label,
            grid: GridFingerprint(grid.into()),
        }
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::adam(0.01),
            epochs,
            batch_size: 4,
            loss: Loss::CrossEntropy,
            seed: 1,
        }
    }

    fn dataset() -> Vec<MeterWindow> {
        let mut v = Vec::new();
        for (g, name) in ["a", "b", "c"].iter().enumerate() {
            for d in 0..4 {
                v.push(window(d + 10 * g as u32, ClassLabel::Correct, name));
                v.push(window(d + 10 * g as u32, ClassLabel::Inverted, name));
            }
        }
        v
    }

    #[test]
    fn threshold_is_closed() {
        let m = RtModel::new(tiny(), ClassLabel::Inverted, 0).unwrap();
        let w = window(0, ClassLabel::Correct, "a");
        let p = m.classify(&w.values).unwrap()[1];
        let run = |t| detect(&m, w.bus, w.day, &w.values, t).unwrap();
        assert!(run(p).is_some());
        assert!(run(p + 1e-9).is_none());
        let flag = run(0.0).unwrap();
        let json = serde_json::to_value(&flag).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["bus", "day", "probability", "use_case"]);
    }

    #[test]
    fn pretrain_preconditions() {
        let m = RtModel::new(tiny(), ClassLabel::Inverted, 0).unwrap();
        let single: Vec<MeterWindow> = dataset()
            .into_iter()
            .filter(|w| w.label == ClassLabel::Correct)
            .collect();
        assert!(matches!(
            pretrain(&m, &single, &cfg(1)),
            Err(RtError::SingleClassInput)
        ));
        let two_grids: Vec<MeterWindow> =
            dataset().into_iter().filter(|w| w.grid.0 != "c").collect();
        assert!(matches!(
            pretrain(&m, &two_grids, &cfg(1)),
            Err(RtError::TooFewGrids(2, 3))
        ));
        let mut wrong = dataset();
        wrong[1].label = ClassLabel::Wrong;
        assert!(pretrain(&m, &wrong, &cfg(1)).is_err());
    }

    #[test]
    fn pretraining_reduces_loss_and_round_trips() {
        let m = RtModel::new(tiny(), ClassLabel::Inverted, 0).unwrap();
        let (trained, report) = pretrain(&m, &dataset(), &cfg(40)).unwrap();
        assert!(report.loss_history.last().unwrap() < &report.loss_history[0]);
        assert_eq!(report.grids, 3);
        let back = RtModel::from_json(&trained.to_json()).unwrap();
        assert_eq!(back, trained);
        let probe = window(3, ClassLabel::Inverted, "z");
        let a = trained.classify(&probe.values).unwrap();
        let b = back.classify(&probe.values).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let m = RtModel::new(tiny(), ClassLabel::Inverted, 5).unwrap();
        let data = dataset();
        let once: Vec<&MeterWindow> = data.iter().collect();
        let twice: Vec<&MeterWindow> = data.iter().chain(data.iter()).collect();
        let (la, ga) = batch_gradient(&m, &once).unwrap();
        let (lb, gb) = batch_gradient(&m, &twice).unwrap();
        assert!((la - lb).abs() < 1e-12);
        for (a, b) in ga.flat().iter().zip(gb.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn model_file_holds_no_training_data() {
        let m = RtModel::new(tiny(), ClassLabel::Inverted, 0).unwrap();
        let (trained, _) = pretrain(&m, &dataset(), &cfg(2)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&trained.to_json()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(
            keys,
            [
                "config",
                "format_version",
                "norm_mean",
                "norm_std",
                "tensors",
                "use_case"
            ]
        );
        let stored: usize = v["tensors"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t["data"].as_array().unwrap().len())
            .sum();
        assert_eq!(stored, trained.weights.param_count());
    }

    #[test]
    fn window_validation() {
        let mut w = window(0, ClassLabel::Correct, "a");
        w.values[2] = 0.0;
        assert!(matches!(w.validate(8), Err(RtError::InvalidWindow { .. })));
        let w = window(0, ClassLabel::Correct, "a");
        assert!(w.validate(9).is_err());
    }
}
