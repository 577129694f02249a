use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ensure_finite, grads_flat, Loss, Mlp, NnError};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer state over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: usize) -> Self {
        OptimizerState {
            kind,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: Loss,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.optimizer.lr() > 0.0 && self.optimizer.lr().is_finite()) {
            return Err(NnError::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        if self.epochs < 1 {
            return Err(NnError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(NnError::InvalidConfig(
                "batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Seeded sample order for one epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::substream(self.seed, "epoch", &[epoch as u64]));
        order
    }
}

/// Minibatch training. Returns the trained network and, per epoch, the
/// sample-weighted mean of the minibatch losses seen during that epoch.
pub fn train(
    mlp: &Mlp,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
    config: &TrainConfig,
) -> Result<(Mlp, Vec<f64>), NnError> {
    config.validate()?;
    let n = inputs.nrows();
    if n == 0 {
        return Err(NnError::EmptyDataset);
    }
    if targets.nrows() != n {
        return Err(NnError::ShapeMismatch(format!(
            "{n} inputs but {} targets",
            targets.nrows()
        )));
    }
    if inputs.ncols() != mlp.input_dim() || targets.ncols() != mlp.output_dim() {
        return Err(NnError::ShapeMismatch(
            "dataset does not fit network".into(),
        ));
    }

    let mut model = mlp.clone();
    let mut params = model.params_flat();
    let mut opt = OptimizerState::new(config.optimizer, params.len());
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = config.epoch_order(epoch, n);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = inputs.select(Axis(0), batch);
            let t = targets.select(Axis(0), batch);
            let (loss, grads) = model.backward(&x, &t, config.loss)?;
            total += loss * batch.len() as f64;
            opt.step(&mut params, &grads_flat(&grads));
            ensure_finite(params.iter(), "parameters after update")?;
            model.set_params_flat(&params);
        }
        history.push(total / n as f64);
    }
    Ok((model, history))
}
