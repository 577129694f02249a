//! R-Transformer classifier for single-bus voltage series.
//!
//! Shape chain for one window of length `L`:
//!
//! ```text
//! x (L×1) -> embed (L×d) -> blocks -> mean pool (d) -> head (k) -> softmax
//! block:  H1 = X  + LocalRnn(X)
//!         H2 = H1 + Attention(H1)
//!         H3 = H2 + FeedForward(H2)
//! ```
//!
//! The local RNN at position `t` runs a tanh cell over positions
//! `t-w+1 ..= t` from a zero state, feeding zeros for positions before the
//! start of the series. Attention is unmasked multi-head scaled dot product.
//! Gradients are computed by hand in [`RtModel::loss_and_grad`].

mod data;
mod train;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::ClassLabel;
use crate::nn::{softmax, NnError};
use crate::rng;

pub use data::{meter_windows, simulate_labeled_windows};
pub use train::{
    batch_gradient, detect, pretrain, DeviceFlag, MeterWindow, PretrainReport, RT_FORMAT_VERSION,
};

#[derive(Debug, Error)]
pub enum RtError {
    #[error("invalid R-Transformer config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training set contains a single class")]
    SingleClassInput,
    #[error("training set spans {0} grid(s), need at least {1}")]
    TooFewGrids(usize, usize),
    #[error("window for bus {bus} day {day}: {reason}")]
    InvalidWindow {
        bus: usize,
        day: u32,
        reason: String,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Scenario(#[from] crate::scenario::ScenarioError),
    #[error("model file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtConfig {
    pub window_w: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub classes: usize,
    pub sequence_len: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

/// How raw voltages are scaled before the embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Training-set mean and standard deviation.
    Global,
    /// Each window minus its own mean, over the training-set standard
    /// deviation of those deviations. Absolute voltage level is discarded.
    #[default]
    Centered,
}

impl Default for RtConfig {
    fn default() -> Self {
        RtConfig {
            window_w: 8,
            model_dim: 16,
            heads: 2,
            blocks: 1,
            classes: 2,
            sequence_len: 96,
            normalization: Normalization::default(),
        }
    }
}

impl RtConfig {
    pub fn validate(&self) -> Result<(), RtError> {
        let bad = |m: &str| Err(RtError::InvalidConfig(m.into()));
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be a positive multiple of heads");
        }
        if self.sequence_len == 0 || self.window_w == 0 || self.window_w > self.sequence_len {
            return bad("need 1 <= window_w <= sequence_len");
        }
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.blocks == 0 {
            return bad("need at least 1 block");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalRnnLayer {
    /// Input weights, input_dim × d.
    pub w_x: Array2<f64>,
    /// Recurrence weights, d × d.
    pub w_h: Array2<f64>,
    /// 1 × d.
    pub b: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RtBlock {
    pub rnn: LocalRnnLayer,
    pub attn: AttentionLayer,
    pub ff: FeedForward,
}

/// All trainable tensors. Also used to hold gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct RtWeights {
    pub embed_w: Array2<f64>,
    pub embed_b: Array2<f64>,
    pub blocks: Vec<RtBlock>,
    pub head_w: Array2<f64>,
    pub head_b: Array2<f64>,
}

impl RtWeights {
    fn init(config: &RtConfig, seed: u64) -> Self {
        let d = config.model_dim;
        let mut idx = 0u64;
        let mut t = |rows: usize, cols: usize, fan_in: usize| {
            let mut r = rng::substream(seed, "rt-init", &[idx]);
            idx += 1;
            let bound = (1.0 / fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| r.random_range(-bound..bound))
        };
        let embed_w = t(1, d, 1);
        let embed_b = Array2::zeros((1, d));
        let blocks = (0..config.blocks)
            .map(|_| RtBlock {
                rnn: LocalRnnLayer {
                    w_x: t(d, d, d),
                    w_h: t(d, d, d),
                    b: Array2::zeros((1, d)),
                },
                attn: AttentionLayer {
                    wq: t(d, d, d),
                    wk: t(d, d, d),
                    wv: t(d, d, d),
                    wo: t(d, d, d),
                },
                ff: FeedForward {
                    w1: t(d, 4 * d, d),
                    b1: Array2::zeros((1, 4 * d)),
                    w2: t(4 * d, d, 4 * d),
                    b2: Array2::zeros((1, d)),
                },
            })
            .collect();
        RtWeights {
            embed_w,
            embed_b,
            blocks,
            head_w: t(d, config.classes, d),
            head_b: Array2::zeros((1, config.classes)),
        }
    }

    /// Tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("embed_w".to_string(), &self.embed_w),
            ("embed_b".to_string(), &self.embed_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in [
                ("rnn_w_x", &b.rnn.w_x),
                ("rnn_w_h", &b.rnn.w_h),
                ("rnn_b", &b.rnn.b),
                ("attn_wq", &b.attn.wq),
                ("attn_wk", &b.attn.wk),
                ("attn_wv", &b.attn.wv),
                ("attn_wo", &b.attn.wo),
                ("ff_w1", &b.ff.w1),
                ("ff_b1", &b.ff.b1),
                ("ff_w2", &b.ff.w2),
                ("ff_b2", &b.ff.b2),
            ] {
                out.push((format!("block{i}.{n}"), t));
            }
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b];
        for b in &mut self.blocks {
            out.extend([
                &mut b.rnn.w_x,
                &mut b.rnn.w_h,
                &mut b.rnn.b,
                &mut b.attn.wq,
                &mut b.attn.wk,
                &mut b.attn.wv,
                &mut b.attn.wo,
                &mut b.ff.w1,
                &mut b.ff.b1,
                &mut b.ff.w2,
                &mut b.ff.b2,
            ]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for (_, t) in self.named() {
            v.extend(t.iter());
        }
        v
    }

    pub fn set_flat(&mut self, params: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            for (dst, src) in t.iter_mut().zip(&params[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
    }

    pub fn add_assign(&mut self, other: &RtWeights) {
        let src: Vec<Array2<f64>> = other.named().into_iter().map(|(_, t)| t.clone()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            *dst += &s;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RtModel {
    pub config: RtConfig,
    pub weights: RtWeights,
    /// Voltage standardization learned from the training windows.
    pub norm_mean: f64,
    pub norm_std: f64,
    /// Malfunction class detected by this model; class index 1.
    pub use_case: ClassLabel,
}

struct RnnCache {
    /// Hidden state after every cell step, `L*w × d`, position-major.
    states: Array2<f64>,
}

/// Run the local RNN. Returns `L × d` outputs and the cache.
fn rnn_forward(layer: &LocalRnnLayer, x: ArrayView2<f64>, w: usize) -> (Array2<f64>, RnnCache) {
    let (l, _) = x.dim();
    let d = layer.w_h.nrows();
    let xw = x.dot(&layer.w_x);
    let bias = layer.b.row(0);
    let mut states = Array2::zeros((l * w, d));
    let mut out = Array2::zeros((l, d));
    for t in 0..l {
        let mut h = ndarray::Array1::<f64>::zeros(d);
        for step in 0..w {
            let pos = t as isize + step as isize + 1 - w as isize;
            let mut a = h.dot(&layer.w_h) + bias;
            if pos >= 0 {
                a += &xw.row(pos as usize);
            }
            h = a.mapv(f64::tanh);
            states.row_mut(t * w + step).assign(&h);
        }
        out.row_mut(t).assign(&h);
    }
    (out, RnnCache { states })
}

/// Backward through the local RNN. Accumulates parameter gradients into
/// `grad` and returns the gradient with respect to the input.
fn rnn_backward(
    layer: &LocalRnnLayer,
    x: ArrayView2<f64>,
    w: usize,
    cache: &RnnCache,
    d_out: ArrayView2<f64>,
    grad: &mut LocalRnnLayer,
) -> Array2<f64> {
    let (l, _) = x.dim();
    let d = layer.w_h.nrows();
    let mut d_pre = Array2::zeros((l * w, d));
    let mut d_xw = Array2::<f64>::zeros((l, d));
    for t in 0..l {
        let mut dh = d_out.row(t).to_owned();
        for step in (0..w).rev() {
            let row = t * w + step;
            let h = cache.states.row(row);
            let da = &dh * &h.mapv(|v| 1.0 - v * v);
            let pos = t as isize + step as isize + 1 - w as isize;
            if pos >= 0 {
                let mut r = d_xw.row_mut(pos as usize);
                r += &da;
            }
            dh = layer.w_h.dot(&da);
            d_pre.row_mut(row).assign(&da);
        }
    }
    // Previous hidden state per step: zero at step 0 of each window.
    let mut prev = Array2::zeros((l * w, d));
    for t in 0..l {
        for step in 1..w {
            prev.row_mut(t * w + step)
                .assign(&cache.states.row(t * w + step - 1));
        }
    }
    grad.w_h += &prev.t().dot(&d_pre);
    grad.b += &d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
    grad.w_x += &x.t().dot(&d_xw);
    d_xw.dot(&layer.w_x.t())
}

/// Local RNN over an embedded `L × d` sequence.
pub fn local_rnn_forward(
    layer: &LocalRnnLayer,
    x: ArrayView2<f64>,
    window_w: usize,
) -> Result<Array2<f64>, RtError> {
    if x.ncols() != layer.w_x.nrows() || window_w == 0 {
        return Err(RtError::ShapeMismatch(format!(
            "input {:?} for RNN with input dim {} and window {window_w}",
            x.dim(),
            layer.w_x.nrows()
        )));
    }
    Ok(rnn_forward(layer, x, window_w).0)
}

struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// One `L × L` energy matrix per head.
    energy: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

fn row_softmax(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let p = softmax(row.as_slice().expect("standard layout"));
        row.assign(&ndarray::aview1(&p));
    }
}

fn attn_forward(
    layer: &AttentionLayer,
    heads: usize,
    x: ArrayView2<f64>,
) -> (Array2<f64>, AttnCache) {
    let (l, d) = x.dim();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = x.dot(&layer.wq);
    let k = x.dot(&layer.wk);
    let v = x.dot(&layer.wv);
    let mut concat = Array2::zeros((l, d));
    let mut energy = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut e = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        row_softmax(&mut e);
        concat.slice_mut(cols).assign(&e.dot(&v.slice(cols)));
        energy.push(e);
    }
    let out = concat.dot(&layer.wo);
    (
        out,
        AttnCache {
            q,
            k,
            v,
            energy,
            concat,
        },
    )
}

fn attn_backward(
    layer: &AttentionLayer,
    heads: usize,
    x: ArrayView2<f64>,
    cache: &AttnCache,
    d_out: ArrayView2<f64>,
    grad: &mut AttentionLayer,
) -> Array2<f64> {
    let (l, d) = x.dim();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    grad.wo += &cache.concat.t().dot(&d_out);
    let d_concat = d_out.dot(&layer.wo.t());
    let mut dq = Array2::zeros((l, d));
    let mut dk_m = Array2::zeros((l, d));
    let mut dv = Array2::zeros((l, d));
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let e = &cache.energy[h];
        let d_o = d_concat.slice(cols);
        let d_e = d_o.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&e.t().dot(&d_o));
        let dot = (&d_e * e).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_s = (e * &(&d_e - &dot)) * scale;
        dq.slice_mut(cols).assign(&d_s.dot(&cache.k.slice(cols)));
        dk_m.slice_mut(cols)
            .assign(&d_s.t().dot(&cache.q.slice(cols)));
    }
    grad.wq += &x.t().dot(&dq);
    grad.wk += &x.t().dot(&dk_m);
    grad.wv += &x.t().dot(&dv);
    dq.dot(&layer.wq.t()) + dk_m.dot(&layer.wk.t()) + dv.dot(&layer.wv.t())
}

/// Multi-head attention over `L × d` states. Returns the output and the
/// per-head energy matrices.
pub fn attention_forward(
    layer: &AttentionLayer,
    heads: usize,
    states: ArrayView2<f64>,
) -> Result<(Array2<f64>, Vec<Array2<f64>>), RtError> {
    let d = states.ncols();
    if heads == 0 || !d.is_multiple_of(heads) || layer.wq.nrows() != d {
        return Err(RtError::ShapeMismatch(format!(
            "states {:?} for attention with {heads} heads over dim {}",
            states.dim(),
            layer.wq.nrows()
        )));
    }
    let (out, cache) = attn_forward(layer, heads, states);
    Ok((out, cache.energy))
}

struct BlockCache {
    input: Array2<f64>,
    rnn: RnnCache,
    h1: Array2<f64>,
    attn: AttnCache,
    h2: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
}

struct Cache {
    x: Array2<f64>,
    blocks: Vec<BlockCache>,
    pooled: Array2<f64>,
    probs: Vec<f64>,
}

impl RtModel {
    pub fn new(config: RtConfig, use_case: ClassLabel, seed: u64) -> Result<Self, RtError> {
        config.validate()?;
        let weights = RtWeights::init(&config, seed);
        Ok(RtModel {
            config,
            weights,
            norm_mean: 0.0,
            norm_std: 1.0,
            use_case,
        })
    }

    /// Standardize raw voltages with the stored statistics.
    pub fn normalize(&self, values: &[f64]) -> Result<Array2<f64>, RtError> {
        if values.len() != self.config.sequence_len {
            return Err(RtError::ShapeMismatch(format!(
                "window of length {}, model expects {}",
                values.len(),
                self.config.sequence_len
            )));
        }
        let offset = match self.config.normalization {
            Normalization::Global => self.norm_mean,
            Normalization::Centered => {
                values.iter().sum::<f64>() / values.len() as f64 + self.norm_mean
            }
        };
        Ok(Array2::from_shape_fn((values.len(), 1), |(i, _)| {
            (values[i] - offset) / self.norm_std
        }))
    }

    fn forward_cached(&self, x: Array2<f64>) -> Cache {
        let cfg = &self.config;
        let w = &self.weights;
        let mut h = x.dot(&w.embed_w) + &w.embed_b;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in &w.blocks {
            let (r, rnn) = rnn_forward(&b.rnn, h.view(), cfg.window_w);
            let h1 = &h + &r;
            let (att, attn) = attn_forward(&b.attn, cfg.heads, h1.view());
            let h2 = &h1 + &att;
            let z1 = h2.dot(&b.ff.w1) + &b.ff.b1;
            let a1 = z1.mapv(|v| v.max(0.0));
            let h3 = &h2 + &(a1.dot(&b.ff.w2) + &b.ff.b2);
            blocks.push(BlockCache {
                input: h,
                rnn,
                h1,
                attn,
                h2,
                z1,
                a1,
            });
            h = h3;
        }
        let pooled = h
            .mean_axis(Axis(0))
            .expect("nonempty sequence")
            .insert_axis(Axis(0));
        let logits = pooled.dot(&w.head_w) + &w.head_b;
        let probs = softmax(logits.as_slice().expect("standard layout"));
        Cache {
            x,
            blocks,
            pooled,
            probs,
        }
    }

    /// Class probabilities for already standardized input (`L × 1`).
    pub fn forward_normalized(&self, x: Array2<f64>) -> Result<Vec<f64>, RtError> {
        if x.dim() != (self.config.sequence_len, 1) {
            return Err(RtError::ShapeMismatch(format!("input {:?}", x.dim())));
        }
        let probs = self.forward_cached(x).probs;
        crate::nn::ensure_finite(probs.iter(), "R-Transformer output")?;
        Ok(probs)
    }

    /// Class probabilities for a raw voltage window.
    pub fn classify(&self, values: &[f64]) -> Result<Vec<f64>, RtError> {
        self.forward_normalized(self.normalize(values)?)
    }

    /// Cross-entropy of one standardized sample against class `target`
    /// and the gradient of that loss with respect to every weight.
    pub fn loss_and_grad(
        &self,
        x: Array2<f64>,
        target: usize,
    ) -> Result<(f64, RtWeights), RtError> {
        if target >= self.config.classes {
            return Err(RtError::ShapeMismatch(format!("target class {target}")));
        }
        if x.dim() != (self.config.sequence_len, 1) {
            return Err(RtError::ShapeMismatch(format!("input {:?}", x.dim())));
        }
        let cfg = &self.config;
        let w = &self.weights;
        let cache = self.forward_cached(x);
        let loss = -cache.probs[target].max(f64::MIN_POSITIVE).ln();
        let mut g = w.zeros_like();

        let mut d_logits =
            Array2::from_shape_vec((1, cfg.classes), cache.probs.clone()).expect("k probabilities");
        d_logits[[0, target]] -= 1.0;
        g.head_w = cache.pooled.t().dot(&d_logits);
        g.head_b = d_logits.clone();
        let d_pooled = d_logits.dot(&w.head_w.t());
        let l = cfg.sequence_len;
        let mut dh =
            Array2::from_shape_fn((l, cfg.model_dim), |(_, j)| d_pooled[[0, j]] / l as f64);

        for (bi, (b, bc)) in w.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut g.blocks[bi];
            // Feed-forward with residual.
            gb.ff.w2 = bc.a1.t().dot(&dh);
            gb.ff.b2 = dh.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut dz1 = dh.dot(&b.ff.w2.t());
            ndarray::Zip::from(&mut dz1).and(&bc.z1).for_each(|d, z| {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            });
            gb.ff.w1 = bc.h2.t().dot(&dz1);
            gb.ff.b1 = dz1.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dh2 = &dh + &dz1.dot(&b.ff.w1.t());
            // Attention with residual.
            let dh1 = &dh2
                + &attn_backward(
                    &b.attn,
                    cfg.heads,
                    bc.h1.view(),
                    &bc.attn,
                    dh2.view(),
                    &mut gb.attn,
                );
            // Local RNN with residual.
            dh = &dh1
                + &rnn_backward(
                    &b.rnn,
                    bc.input.view(),
                    cfg.window_w,
                    &bc.rnn,
                    dh1.view(),
                    &mut gb.rnn,
                );
        }
        g.embed_w = cache.x.t().dot(&dh);
        g.embed_b = dh.sum_axis(Axis(0)).insert_axis(Axis(0));
        crate::nn::ensure_finite(g.flat().iter(), "R-Transformer gradient")?;
        Ok((loss, g))
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, x: Array2<f64>, target: usize) -> f64 {
        -self.forward_cached(x).probs[target]
            .max(f64::MIN_POSITIVE)
            .ln()
    }
}
