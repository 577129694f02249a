//! Daily condensation of high-resolution substation channels.
//!
//! One day becomes one sample. For each channel, in channel order, the
//! feature vector holds
//!
//! | offset | feature |
//! |--------|---------|
//! | 0      | mean |
//! | 1      | population standard deviation |
//! | 2, 3   | min, max |
//! | 4..=6  | 25th, 50th, 75th percentile (linear interpolation) |
//! | 7..=30 | hourly means, hour 0 to hour 23 |
//!
//! so a day with `c` channels yields `31 * c` features. Rows are assumed to
//! be equally spaced over the day; row `i` of `T` belongs to hour
//! `floor(24 i / T)`. An hour without rows repeats the previous hour's mean.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::der::ControlCurveVariant;

pub const STATS_PER_CHANNEL: usize = 7;
pub const HOURS: usize = 24;
pub const FEATURES_PER_CHANNEL: usize = STATS_PER_CHANNEL + HOURS;

const STAT_NAMES: [&str; STATS_PER_CHANNEL] = ["mean", "std", "min", "max", "q25", "q50", "q75"];

/// Below this a feature's spread counts as zero and is not rescaled.
const STD_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("a day needs at least 2 timesteps, got {0}")]
    EmptyDay(usize),
    #[error("non-finite value in channel {channel} at row {row}")]
    NonFiniteInput { channel: String, row: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least 2 samples to fit a standardizer, got {0}")]
    TooFewSamples(usize),
    #[error("dataset {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Correct,
    Wrong,
    Inverted,
    /// Any malfunction; only produced by relabeling Wrong/Inverted.
    Abnormal,
}

impl ClassLabel {
    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Correct => "Correct",
            ClassLabel::Wrong => "Wrong",
            ClassLabel::Inverted => "Inverted",
            ClassLabel::Abnormal => "Abnormal",
        }
    }

    pub fn is_malfunction(self) -> bool {
        self != ClassLabel::Correct
    }

    /// Collapse both malfunctions into `Abnormal`.
    pub fn grouped(self) -> ClassLabel {
        match self {
            ClassLabel::Wrong | ClassLabel::Inverted => ClassLabel::Abnormal,
            other => other,
        }
    }

    /// The control curve producing this class; `None` for `Abnormal`.
    pub fn variant(self) -> Option<ControlCurveVariant> {
        match self {
            ClassLabel::Correct => Some(ControlCurveVariant::Correct),
            ClassLabel::Wrong => Some(ControlCurveVariant::Wrong),
            ClassLabel::Inverted => Some(ControlCurveVariant::Inverted),
            ClassLabel::Abnormal => None,
        }
    }
}

impl From<ControlCurveVariant> for ClassLabel {
    fn from(v: ControlCurveVariant) -> Self {
        match v {
            ControlCurveVariant::Correct => ClassLabel::Correct,
            ControlCurveVariant::Wrong => ClassLabel::Wrong,
            ControlCurveVariant::Inverted => ClassLabel::Inverted,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Correct" => Ok(ClassLabel::Correct),
            "Wrong" => Ok(ClassLabel::Wrong),
            "Inverted" => Ok(ClassLabel::Inverted),
            "Abnormal" => Ok(ClassLabel::Abnormal),
            _ => Err(format!("unknown label {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Measured,
    Simulated,
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Measured" => Ok(Provenance::Measured),
            "Simulated" => Ok(Provenance::Simulated),
            _ => Err(format!("unknown provenance {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailySample {
    pub features: Vec<f64>,
    pub label: ClassLabel,
    pub day: u32,
    pub provenance: Provenance,
}

pub fn feature_names(channel_names: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(channel_names.len() * FEATURES_PER_CHANNEL);
    for c in channel_names {
        out.extend(STAT_NAMES.iter().map(|s| format!("{c}.{s}")));
        out.extend((0..HOURS).map(|h| format!("{c}.h{h:02}")));
    }
    out
}

/// Percentile of sorted data with linear interpolation between ranks.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Condense one day (`timesteps × channels`) into a feature vector.
pub fn condense_day(
    day: ArrayView2<f64>,
    channel_names: &[String],
) -> Result<Vec<f64>, FeatureError> {
    let (rows, cols) = day.dim();
    if cols != channel_names.len() {
        return Err(FeatureError::ShapeMismatch(format!(
            "{cols} columns but {} channel names",
            channel_names.len()
        )));
    }
    if rows < 2 {
        return Err(FeatureError::EmptyDay(rows));
    }
    if let Some(((row, c), _)) = day.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(FeatureError::NonFiniteInput {
            channel: channel_names[c].clone(),
            row,
        });
    }

    let mut features = Vec::with_capacity(cols * FEATURES_PER_CHANNEL);
    let n = rows as f64;
    for column in day.columns() {
        let values: Vec<f64> = column.to_vec();
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        features.extend([
            mean,
            var.sqrt(),
            sorted[0],
            sorted[rows - 1],
            percentile(&sorted, 0.25),
            percentile(&sorted, 0.5),
            percentile(&sorted, 0.75),
        ]);

        let mut sums = [0.0; HOURS];
        let mut counts = [0usize; HOURS];
        for (i, v) in values.iter().enumerate() {
            let h = (HOURS * i) / rows;
            sums[h] += v;
            counts[h] += 1;
        }
        let mut last = values[0];
        for h in 0..HOURS {
            if counts[h] > 0 {
                last = sums[h] / counts[h] as f64;
            }
            features.push(last);
        }
    }
    Ok(features)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit per-feature mean and population standard deviation. Features with
    /// (near) zero spread get std 1 so they map to 0.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self, FeatureError> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        if rows.len() < 2 {
            return Err(FeatureError::TooFewSamples(rows.len()));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(FeatureError::ShapeMismatch("ragged feature rows".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > STD_GUARD {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn fit_samples(samples: &[DailySample]) -> Result<Self, FeatureError> {
        Standardizer::fit(samples.iter().map(|s| s.features.as_slice()))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub channel_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub stats_per_channel: Vec<String>,
    pub hourly_means: usize,
}

impl DatasetSidecar {
    pub fn new(channel_names: &[String]) -> Self {
        DatasetSidecar {
            channel_names: channel_names.to_vec(),
            feature_names: feature_names(channel_names),
            stats_per_channel: STAT_NAMES.iter().map(|s| s.to_string()).collect(),
            hourly_means: HOURS,
        }
    }
}

fn ds_err(path: &Path, e: impl fmt::Display) -> FeatureError {
    FeatureError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Write samples as CSV (`day, provenance, label, features...`) plus a
/// `<path>.json` sidecar with channel and feature names.
pub fn write_dataset(
    path: &Path,
    samples: &[DailySample],
    channel_names: &[String],
) -> Result<(), FeatureError> {
    let sidecar = DatasetSidecar::new(channel_names);
    if let Some(s) = samples
        .iter()
        .find(|s| s.features.len() != sidecar.feature_names.len())
    {
        return Err(FeatureError::ShapeMismatch(format!(
            "sample for day {} has {} features, expected {}",
            s.day,
            s.features.len(),
            sidecar.feature_names.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| ds_err(path, e))?;
    let mut header = vec!["day".to_string(), "provenance".into(), "label".into()];
    header.extend(sidecar.feature_names.iter().cloned());
    w.write_record(&header).map_err(|e| ds_err(path, e))?;
    for s in samples {
        let mut rec = vec![
            s.day.to_string(),
            format!("{:?}", s.provenance),
            s.label.to_string(),
        ];
        rec.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| ds_err(path, e))?;
    }
    w.flush().map_err(|e| ds_err(path, e))?;
    let side_path = path.with_extension("json");
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| ds_err(&side_path, e))?;
    fs::write(&side_path, json + "\n").map_err(|e| ds_err(&side_path, e))
}

pub fn read_dataset(path: &Path) -> Result<(Vec<DailySample>, DatasetSidecar), FeatureError> {
    let side_path = path.with_extension("json");
    let text = fs::read_to_string(&side_path).map_err(|e| ds_err(&side_path, e))?;
    let sidecar: DatasetSidecar = serde_json::from_str(&text).map_err(|e| ds_err(&side_path, e))?;
    let mut r = csv::Reader::from_path(path).map_err(|e| ds_err(path, e))?;
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| ds_err(path, e))?;
        if rec.len() != 3 + sidecar.feature_names.len() {
            return Err(ds_err(path, "row length differs from sidecar"));
        }
        samples.push(DailySample {
            day: rec[0].parse().map_err(|e| ds_err(path, e))?,
            provenance: rec[1].parse().map_err(|e: String| ds_err(path, e))?,
            label: rec[2].parse().map_err(|e: String| ds_err(path, e))?,
            features: rec
                .iter()
                .skip(3)
                .map(|v| v.parse::<f64>().map_err(|e| ds_err(path, e)))
                .collect::<Result<_, _>>()?,
        });
    }
    Ok((samples, sidecar))
}
