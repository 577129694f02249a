//! Small dense-network toolkit: layers, losses, reverse-mode gradients,
//! optimizers and a finite-difference gradient checker.
//!
//! Batches are `Array2<f64>` with one sample per row. Every forward and
//! backward step checks its output for NaN/Inf and fails with
//! [`NnError::NonFiniteValue`] instead of propagating it.

mod file;
pub mod gradcheck;
mod optim;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub use file::{LayerFile, MlpFile, MLP_FORMAT_VERSION};
pub use optim::{train, OptimizerKind, OptimizerState, TrainConfig};

/// Row-major batch of real values, one sample per row.
pub type Tensor = Array2<f64>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("model file: {0}")]
    Format(String),
}

pub(crate) fn ensure_finite<'a>(
    values: impl IntoIterator<Item = &'a f64>,
    what: &str,
) -> Result<(), NnError> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFiniteValue(what.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    ReLU,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::ReLU => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `outputs × inputs`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    /// Weights and biases drawn uniformly from ±sqrt(1 / fan_in).
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut rng::Rng) -> Self {
        let bound = (1.0 / inputs.max(1) as f64).sqrt();
        DenseLayer {
            weights: Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..=bound)),
            bias: Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..=bound)),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Pre-activation and activation for a batch.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>), NnError> {
        if x.ncols() != self.inputs() {
            return Err(NnError::ShapeMismatch(format!(
                "layer expects {} inputs, got {}",
                self.inputs(),
                x.ncols()
            )));
        }
        let z = x.dot(&self.weights.t()) + &self.bias;
        let act = self.activation;
        let a = z.mapv(|v| act.apply(v));
        ensure_finite(a.iter(), "dense layer output")?;
        Ok((z, a))
    }

    /// Given dL/da, return parameter gradients and dL/dx.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        z: &Array2<f64>,
        a: &Array2<f64>,
        d_a: &Array2<f64>,
    ) -> (LayerGrads, Array2<f64>) {
        let act = self.activation;
        let mut d_z = d_a.clone();
        if act != Activation::Identity {
            ndarray::Zip::from(&mut d_z)
                .and(z)
                .and(a)
                .for_each(|g, &zv, &av| *g *= act.derivative(zv, av));
        }
        let weights = d_z.t().dot(&x);
        let bias = d_z.sum_axis(Axis(0));
        let d_x = d_z.dot(&self.weights);
        (LayerGrads { weights, bias }, d_x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    Mse,
    /// Softmax cross-entropy on the network's (identity) outputs.
    CrossEntropy,
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Mean loss over the batch and its gradient with respect to `output`.
pub fn loss_and_grad(
    loss: Loss,
    output: &Array2<f64>,
    target: &Array2<f64>,
) -> Result<(f64, Array2<f64>), NnError> {
    if output.dim() != target.dim() {
        return Err(NnError::ShapeMismatch(format!(
            "output {:?} vs target {:?}",
            output.dim(),
            target.dim()
        )));
    }
    let n = output.nrows().max(1) as f64;
    let (value, grad) = match loss {
        Loss::Mse => {
            let diff = output - target;
            let count = diff.len().max(1) as f64;
            let value = diff.iter().map(|d| d * d).sum::<f64>() / count;
            (value, diff * (2.0 / count))
        }
        Loss::CrossEntropy => {
            let mut grad = Array2::zeros(output.dim());
            let mut value = 0.0;
            for (i, row) in output.rows().into_iter().enumerate() {
                let logits = row.to_vec();
                let logp = log_softmax(&logits);
                let t = target.row(i);
                let mass: f64 = t.sum();
                for k in 0..logits.len() {
                    value -= t[k] * logp[k];
                    grad[[i, k]] = (mass * logp[k].exp() - t[k]) / n;
                }
            }
            (value / n, grad)
        }
    };
    if !value.is_finite() {
        return Err(NnError::NonFiniteValue("loss".into()));
    }
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Intermediate values kept from a forward pass for backpropagation.
pub struct ForwardCache {
    inputs: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().unwrap_or(&self.inputs)
    }
}

impl Mlp {
    /// Fully connected net with layer widths `sizes` (input first). Hidden
    /// layers use `hidden`, the last layer uses `output`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == sizes.len() { output } else { hidden };
                let mut r = rng::substream(seed, "mlp-init", &[i as u64]);
                DenseLayer::init(w[0], w[1], act, &mut r)
            })
            .collect();
        Mlp { layers }
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self, NnError> {
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs() != w[1].inputs() {
                return Err(NnError::ShapeMismatch(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    w[0].outputs(),
                    i + 1,
                    w[1].inputs()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.outputs() {
                return Err(NnError::ShapeMismatch(
                    "bias length differs from outputs".into(),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        let mut a = x.clone();
        for layer in &self.layers {
            a = layer.forward(a.view())?.1;
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> Result<ForwardCache, NnError> {
        ensure_finite(x.iter(), "network input")?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = post.last().unwrap_or(x);
            let (z, a) = layer.forward(input.view())?;
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardCache {
            inputs: x.clone(),
            pre,
            post,
        })
    }

    /// Backpropagate an output gradient through a cached forward pass.
    /// Returns per-layer parameter gradients and the gradient at the input.
    pub fn backward_from_output(
        &self,
        cache: &ForwardCache,
        d_out: &Array2<f64>,
    ) -> Result<(Vec<LayerGrads>, Array2<f64>), NnError> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = d_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = if i == 0 {
                &cache.inputs
            } else {
                &cache.post[i - 1]
            };
            let (g, d_x) = layer.backward(input.view(), &cache.pre[i], &cache.post[i], &d);
            ensure_finite(g.weights.iter().chain(g.bias.iter()), "gradient")?;
            grads.push(g);
            d = d_x;
        }
        grads.reverse();
        Ok((grads, d))
    }

    /// Loss value and exact gradients for one batch.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        target: &Array2<f64>,
        loss: Loss,
    ) -> Result<(f64, Vec<LayerGrads>), NnError> {
        let cache = self.forward_cached(x)?;
        let (value, d_out) = loss_and_grad(loss, cache.output(), target)?;
        let (grads, _) = self.backward_from_output(&cache, &d_out)?;
        Ok((value, grads))
    }

    pub fn loss(&self, x: &Array2<f64>, target: &Array2<f64>, loss: Loss) -> Result<f64, NnError> {
        let out = self.forward(x)?;
        Ok(loss_and_grad(loss, &out, target)?.0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter vector length");
        let mut it = params.iter();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = *it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = *it.next().unwrap());
        }
    }
}

/// Flatten gradients in the same order as [`Mlp::params_flat`].
pub fn grads_flat(grads: &[LayerGrads]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.weights.iter().chain(g.bias.iter()).copied())
        .collect()
}
