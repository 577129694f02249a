//! Support vector machines trained by sequential minimal optimization.
//!
//! Binary models solve the soft-margin dual with a simplified SMO: every
//! sample violating the KKT conditions by more than `tol` is paired first
//! with the sample maximizing |E_i − E_j|, then with the remaining samples
//! in a seeded rotating order, until `max_passes` consecutive sweeps change
//! nothing. Multiclass models train one binary model per unordered label
//! pair and vote.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{ClassLabel, DailySample};
use crate::rng;

pub const SVM_FORMAT_VERSION: u32 = 1;

/// Hard cap on sweeps, reached only if the pass criterion never settles.
const MAX_SWEEPS: usize = 100_000;
const ALPHA_EPS: f64 = 1e-12;
const BOUND_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("training data contains a single class")]
    SingleClassInput,
    #[error("non-finite feature at sample {0}")]
    NonFiniteFeature(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid SVM config: {0}")]
    InvalidConfig(String),
    #[error("SVM model file: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    Rbf { gamma: f64 },
}

impl KernelKind {
    pub fn validate(&self) -> Result<(), SvmError> {
        match *self {
            KernelKind::Rbf { gamma } if !(gamma > 0.0 && gamma.is_finite()) => Err(
                SvmError::InvalidConfig(format!("gamma must be finite and positive, got {gamma}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelKind::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            KernelKind::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

pub fn gram_matrix(kernel: &KernelKind, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&x[i], &x[j]);
            k[i][j] = v;
            k[j][i] = v;
        }
    }
    k
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// `None` selects RBF with gamma = 1 / feature count.
    pub kernel: Option<KernelKind>,
    pub c: f64,
    pub tol: f64,
    pub max_passes: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            kernel: None,
            c: 10.0,
            tol: 1e-3,
            max_passes: 20,
            seed: 0,
        }
    }
}

impl SvmConfig {
    pub fn with_kernel(kernel: KernelKind) -> Self {
        SvmConfig {
            kernel: Some(kernel),
            ..SvmConfig::default()
        }
    }

    pub fn resolve_kernel(&self, features: usize) -> KernelKind {
        self.kernel.unwrap_or(KernelKind::Rbf {
            gamma: 1.0 / features.max(1) as f64,
        })
    }

    fn validate(&self) -> Result<(), SvmError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(SvmError::InvalidConfig(
                "C must be finite and positive".into(),
            ));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(SvmError::InvalidConfig(
                "tol must be finite and positive".into(),
            ));
        }
        if self.max_passes < 1 {
            return Err(SvmError::InvalidConfig(
                "max_passes must be at least 1".into(),
            ));
        }
        if let Some(k) = &self.kernel {
            k.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` for each support vector.
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    pub kernel: KernelKind,
    pub c: f64,
    pub tol: f64,
    pub positive: ClassLabel,
    pub negative: ClassLabel,
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, Vec::len)
    }

    pub fn decision_value(&self, x: &[f64]) -> Result<f64, SvmError> {
        if x.len() != self.dim() {
            return Err(SvmError::ShapeMismatch(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(self
            .support_vectors
            .iter()
            .zip(&self.dual_coef)
            .map(|(sv, c)| c * self.kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias)
    }

    /// `+1` when f(x) > 0; a zero decision value goes to the negative class.
    pub fn predict(&self, x: &[f64]) -> Result<i8, SvmError> {
        Ok(if self.decision_value(x)? > 0.0 { 1 } else { -1 })
    }

    pub fn predict_label(&self, x: &[f64]) -> Result<ClassLabel, SvmError> {
        Ok(if self.predict(x)? > 0 {
            self.positive
        } else {
            self.negative
        })
    }
}

struct Smo<'a> {
    k: Vec<Vec<f64>>,
    y: &'a [f64],
    alpha: Vec<f64>,
    b: f64,
    c: f64,
}

impl Smo<'_> {
    fn error(&self, i: usize) -> f64 {
        let f: f64 = self
            .alpha
            .iter()
            .zip(self.y)
            .zip(&self.k[i])
            .filter(|((a, _), _)| **a > 0.0)
            .map(|((a, y), k)| a * y * k)
            .sum();
        f + self.b - self.y[i]
    }

    fn take_step(&mut self, i: usize, j: usize, e_i: f64) -> bool {
        if i == j {
            return false;
        }
        let (y_i, y_j) = (self.y[i], self.y[j]);
        let (a_i, a_j) = (self.alpha[i], self.alpha[j]);
        let e_j = self.error(j);
        let (lo, hi) = if y_i != y_j {
            ((a_j - a_i).max(0.0), (self.c + a_j - a_i).min(self.c))
        } else {
            ((a_i + a_j - self.c).max(0.0), (a_i + a_j).min(self.c))
        };
        if hi - lo < ALPHA_EPS {
            return false;
        }
        let eta = 2.0 * self.k[i][j] - self.k[i][i] - self.k[j][j];
        if eta >= 0.0 {
            return false;
        }
        let new_j = self.snap((a_j - y_j * (e_i - e_j) / eta).clamp(lo, hi));
        if (new_j - a_j).abs() < ALPHA_EPS * (new_j + a_j + ALPHA_EPS) {
            return false;
        }
        let new_i = self.snap((a_i + y_i * y_j * (a_j - new_j)).clamp(0.0, self.c));
        self.alpha[i] = new_i;
        self.alpha[j] = new_j;
        self.refresh_bias();
        true
    }

    /// Rounding residue next to a bound would otherwise count as a free
    /// support vector and skew the bias.
    fn snap(&self, a: f64) -> f64 {
        let eps = BOUND_EPS * self.c;
        if a < eps {
            0.0
        } else if a > self.c - eps {
            self.c
        } else {
            a
        }
    }

    /// Bias from the free support vectors, or the midpoint of the interval
    /// allowed by the bounded ones when none is free.
    fn refresh_bias(&mut self) {
        let n = self.alpha.len();
        let (mut free_sum, mut free_n) = (0.0, 0usize);
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..n {
            let g = self.error(i) - self.b + self.y[i];
            let target = self.y[i] - g;
            let a = self.alpha[i];
            if a > 0.0 && a < self.c {
                free_sum += target;
                free_n += 1;
            } else if (a == 0.0) == (self.y[i] > 0.0) {
                lo = lo.max(target);
            } else {
                hi = hi.min(target);
            }
        }
        self.b = if free_n > 0 {
            free_sum / free_n as f64
        } else if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else if lo.is_finite() {
            lo
        } else {
            hi
        };
    }
}

fn check_finite(x: &[Vec<f64>]) -> Result<usize, SvmError> {
    let dim = x.first().map_or(0, Vec::len);
    for (i, row) in x.iter().enumerate() {
        if row.len() != dim {
            return Err(SvmError::ShapeMismatch(format!(
                "sample {i} has {} features, expected {dim}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(SvmError::NonFiniteFeature(i));
        }
    }
    Ok(dim)
}

/// Train a binary SVM on labels `+1` / `-1`.
pub fn train_binary(x: &[Vec<f64>], y: &[i8], config: &SvmConfig) -> Result<SvmModel, SvmError> {
    train_binary_labeled(x, y, config, ClassLabel::Correct, ClassLabel::Abnormal)
}

fn train_binary_labeled(
    x: &[Vec<f64>],
    y: &[i8],
    config: &SvmConfig,
    positive: ClassLabel,
    negative: ClassLabel,
) -> Result<SvmModel, SvmError> {
    config.validate()?;
    if x.len() != y.len() {
        return Err(SvmError::ShapeMismatch(format!(
            "{} samples but {} labels",
            x.len(),
            y.len()
        )));
    }
    if let Some(i) = y.iter().position(|v| *v != 1 && *v != -1) {
        return Err(SvmError::InvalidConfig(format!(
            "label at {i} is not +1 or -1"
        )));
    }
    if !(y.contains(&1) && y.contains(&-1)) {
        return Err(SvmError::SingleClassInput);
    }
    let dim = check_finite(x)?;
    let kernel = config.resolve_kernel(dim);
    let yf: Vec<f64> = y.iter().map(|v| f64::from(*v)).collect();
    let n = x.len();
    let mut smo = Smo {
        k: gram_matrix(&kernel, x),
        y: &yf,
        alpha: vec![0.0; n],
        b: 0.0,
        c: config.c,
    };

    let mut passes = 0;
    let mut sweep = 0;
    while passes < config.max_passes && sweep < MAX_SWEEPS {
        let mut changed = 0;
        for i in 0..n {
            let e_i = smo.error(i);
            let r = yf[i] * e_i;
            let violates = (r < -config.tol && smo.alpha[i] < config.c)
                || (r > config.tol && smo.alpha[i] > 0.0);
            if !violates {
                continue;
            }
            let best = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, (e_i - smo.error(j)).abs()))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(j, _)| j);
            if best.is_some_and(|j| smo.take_step(i, j, e_i)) {
                changed += 1;
                continue;
            }
            let offset =
                rng::substream(config.seed, "smo", &[sweep as u64, i as u64]).random_range(0..n);
            for step in 0..n {
                let j = (offset + step) % n;
                if Some(j) != best && smo.take_step(i, j, e_i) {
                    changed += 1;
                    break;
                }
            }
        }
        passes = if changed == 0 { passes + 1 } else { 0 };
        sweep += 1;
    }
    if sweep == MAX_SWEEPS {
        log::warn!("SMO stopped at the sweep cap before the pass criterion settled");
    }

    let (mut support_vectors, mut dual_coef) = (Vec::new(), Vec::new());
    for i in 0..n {
        if smo.alpha[i] > 0.0 {
            support_vectors.push(x[i].clone());
            dual_coef.push(smo.alpha[i] * yf[i]);
        }
    }
    Ok(SvmModel {
        support_vectors,
        dual_coef,
        bias: smo.b,
        kernel,
        c: config.c,
        tol: config.tol,
        positive,
        negative,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiClassSvm {
    /// Labels present at training time, sorted by name.
    pub labels: Vec<ClassLabel>,
    /// One model per unordered pair; `positive` precedes `negative` by name.
    pub pairs: Vec<SvmModel>,
}

fn by_name(a: &ClassLabel, b: &ClassLabel) -> Ordering {
    a.name().cmp(b.name())
}

pub fn train_multiclass(
    samples: &[DailySample],
    config: &SvmConfig,
) -> Result<MultiClassSvm, SvmError> {
    let mut labels: Vec<ClassLabel> = samples.iter().map(|s| s.label).collect();
    labels.sort_by(by_name);
    labels.dedup();
    if labels.len() < 2 {
        return Err(SvmError::SingleClassInput);
    }
    let dim = check_finite(
        &samples
            .iter()
            .map(|s| s.features.clone())
            .collect::<Vec<_>>(),
    )?;
    let config = SvmConfig {
        kernel: Some(config.resolve_kernel(dim)),
        ..config.clone()
    };
    let pair_ids: Vec<(ClassLabel, ClassLabel)> = labels
        .iter()
        .enumerate()
        .flat_map(|(i, a)| labels[i + 1..].iter().map(move |b| (*a, *b)))
        .collect();
    let pairs = pair_ids
        .par_iter()
        .map(|&(pos, neg)| {
            let (x, y): (Vec<Vec<f64>>, Vec<i8>) = samples
                .iter()
                .filter(|s| s.label == pos || s.label == neg)
                .map(|s| (s.features.clone(), if s.label == pos { 1 } else { -1 }))
                .unzip();
            train_binary_labeled(&x, &y, &config, pos, neg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MultiClassSvm { labels, pairs })
}

impl MultiClassSvm {
    /// Majority vote over pairs. Ties go to the label with the largest sum
    /// of |f| over the pairs it won, then to the name that sorts first.
    pub fn predict(&self, x: &[f64]) -> Result<ClassLabel, SvmError> {
        let mut votes: BTreeMap<&'static str, (usize, f64, ClassLabel)> = BTreeMap::new();
        for m in &self.pairs {
            let f = m.decision_value(x)?;
            let winner = if f > 0.0 { m.positive } else { m.negative };
            let e = votes.entry(winner.name()).or_insert((0, 0.0, winner));
            e.0 += 1;
            e.1 += f.abs();
        }
        let best = votes
            .values()
            .fold(None::<&(usize, f64, ClassLabel)>, |acc, v| match acc {
                Some(a) if (a.0, a.1) >= (v.0, v.1) => Some(a),
                _ => Some(v),
            })
            .expect("at least one pair");
        Ok(best.2)
    }

    pub fn to_json(&self) -> String {
        let f = SvmFile {
            format_version: SVM_FORMAT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string_pretty(&f).expect("SVM serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SvmError> {
        let f: SvmFile = serde_json::from_str(text).map_err(|e| SvmError::Format(e.to_string()))?;
        if f.format_version != SVM_FORMAT_VERSION {
            return Err(SvmError::Format(format!(
                "unsupported format version {}",
                f.format_version
            )));
        }
        let k = f.model.labels.len();
        if f.model.pairs.len() != k * (k.saturating_sub(1)) / 2 {
            return Err(SvmError::Format(
                "pair count does not match label set".into(),
            ));
        }
        Ok(f.model)
    }

    pub fn save(&self, path: &Path) -> Result<(), SvmError> {
        fs::write(path, self.to_json() + "\n")
            .map_err(|e| SvmError::Format(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, SvmError> {
        let text = fs::read_to_string(path)
            .map_err(|e| SvmError::Format(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct SvmFile {
    format_version: u32,
    #[serde(flatten)]
    model: MultiClassSvm,
}
