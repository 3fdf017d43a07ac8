//! Small convolutional classifier over fused-feature windows.
//!
//! Architecture (input `H × 3 × 1`, channels-last):
//! conv 16×(3,1) ReLU → maxpool (2,1) → conv 32×(3,1) ReLU → maxpool (2,1)
//! → flatten → dense 16 ReLU → dense 2 softmax.
//!
//! All parameters live in one flat vector; [`NetworkModel::tensors`]
//! describes the slices. Kernels use `[kh, kw, c_in, c_out]` and
//! `[n_in, n_out]` row-major layouts.

mod file;
mod train;
mod window;

pub use file::{load_model, save_model, LayerSpec, ModelFile, TensorRecord, TrainingMeta, MODEL_FORMAT, MODEL_VERSION};
pub use train::{accuracy, train, train_masked, EpochStats, TrainConfig, TrainHistory};
pub use window::{build_windows, detect_edges, predict_windows, window_classes, WindowPlan, WindowSample};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const DEFAULT_INPUT_LEN: usize = 100;
const KH: usize = 3;
const F1: usize = 16;
const F2: usize = 32;
const HIDDEN: usize = 16;
const CLASSES: usize = 2;

/// Clamp applied to the class-1 probability inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Kernel,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: &'static str,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub range: std::ops::Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    h: usize,
    c1: usize,
    p1: usize,
    c2: usize,
    p2: usize,
}

impl Geometry {
    fn new(h: usize) -> Result<Self> {
        if h < 8 {
            return Err(Error::invalid(format!("input length {h} is too short for the network (need >= 8)")));
        }
        let c1 = h - 2;
        let p1 = c1 / 2;
        let c2 = p1 - 2;
        let p2 = c2 / 2;
        Ok(Self { h, c1, p1, c2, p2 })
    }

    fn flat(&self) -> usize {
        self.p2 * CHANNELS * F2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Offsets {
    c1k: usize,
    c1b: usize,
    c2k: usize,
    c2b: usize,
    d1k: usize,
    d1b: usize,
    d2k: usize,
    d2b: usize,
    total: usize,
}

impl Offsets {
    fn new(g: &Geometry) -> Self {
        let c1k = 0;
        let c1b = c1k + KH * F1;
        let c2k = c1b + F1;
        let c2b = c2k + KH * F1 * F2;
        let d1k = c2b + F2;
        let d1b = d1k + g.flat() * HIDDEN;
        let d2k = d1b + HIDDEN;
        let d2b = d2k + HIDDEN * CLASSES;
        Self { c1k, c1b, c2k, c2b, d1k, d1b, d2k, d2b, total: d2b + CLASSES }
    }
}

/// Input transform applied before the network: optional `ln(x + eps)`, then
/// per-channel standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNorm {
    pub log: bool,
    pub eps: f64,
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Default for InputNorm {
    fn default() -> Self {
        Self { log: false, eps: 0.0, mean: [0.0; CHANNELS], std: [1.0; CHANNELS] }
    }
}

impl InputNorm {
    /// Log transform with statistics fitted over every frame of `windows`.
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a [[f64; CHANNELS]]>, eps: f64) -> Self {
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        let mut n = 0usize;
        for w in windows {
            for row in w {
                for c in 0..CHANNELS {
                    let v = (row[c] + eps).ln();
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self { log: true, eps, ..Default::default() };
        }
        let mean = sum.map(|s| s / n as f64);
        let std = std::array::from_fn(|c| {
            let var = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0);
            if var.sqrt() > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        });
        Self { log: true, eps, mean, std }
    }

    pub fn apply(&self, x: &[[f64; CHANNELS]]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len() * CHANNELS);
        for row in x {
            for (c, &x) in row.iter().enumerate() {
                let v = if self.log { (x + self.eps).ln() } else { x };
                out.push((v - self.mean[c]) / self.std[c]);
            }
        }
        out
    }
}

/// The classifier: parameters plus the DF-loss weight and input transform.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    input_len: usize,
    geo: Geometry,
    off: Offsets,
    params: Vec<f64>,
    /// Weight of the disturbance-force term in the training loss.
    pub lambda: f64,
    pub input_norm: InputNorm,
    pub training: Option<TrainingMeta>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    x: Vec<f64>,
    a1: Vec<f64>,
    p1: Vec<f64>,
    p1_idx: Vec<usize>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    p2_idx: Vec<usize>,
    a3: Vec<f64>,
    pub probs: [f64; CLASSES],
}

impl Activations {
    fn new(g: &Geometry) -> Self {
        Self {
            x: vec![0.0; g.h * CHANNELS],
            a1: vec![0.0; g.c1 * CHANNELS * F1],
            p1: vec![0.0; g.p1 * CHANNELS * F1],
            p1_idx: vec![0; g.p1 * CHANNELS * F1],
            a2: vec![0.0; g.c2 * CHANNELS * F2],
            p2: vec![0.0; g.flat()],
            p2_idx: vec![0; g.flat()],
            a3: vec![0.0; HIDDEN],
            probs: [0.0; CLASSES],
        }
    }
}

/// Gradient buffers reused across samples.
#[derive(Debug, Clone)]
struct BackScratch {
    d_a1: Vec<f64>,
    d_p1: Vec<f64>,
    d_a2: Vec<f64>,
}

impl BackScratch {
    fn new(g: &Geometry) -> Self {
        Self { d_a1: vec![0.0; g.c1 * CHANNELS * F1], d_p1: vec![0.0; g.p1 * CHANNELS * F1], d_a2: vec![0.0; g.c2 * CHANNELS * F2] }
    }
}

/// Loss inputs for one prepared sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    /// Transformed input, `H × 3` row-major.
    pub x: Vec<f64>,
    pub y: u8,
    pub f_mag: f64,
    pub threshold: f64,
}

pub fn bce_loss(y: u8, y_hat: f64) -> f64 {
    let p = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn bce_grad(y: u8, y_hat: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&y_hat) {
        return 0.0;
    }
    if y == 1 {
        -1.0 / y_hat
    } else {
        1.0 / (1.0 - y_hat)
    }
}

/// Disturbance-force term: pulls `ŷ` towards 1 when `f_mag ≥ threshold`
/// and towards 0 otherwise.
pub fn df_loss(y_hat: f64, f_mag: f64, threshold: f64) -> f64 {
    if f_mag >= threshold {
        (y_hat - 1.0).abs().exp() - 1.0
    } else {
        y_hat.abs().exp() - 1.0
    }
}

fn df_grad(y_hat: f64, f_mag: f64, threshold: f64) -> f64 {
    if f_mag >= threshold {
        (y_hat - 1.0).signum() * (y_hat - 1.0).abs().exp()
    } else {
        y_hat.signum() * y_hat.abs().exp()
    }
}

/// `L_S + λ·L_F` for one sample.
pub fn sample_loss(y: u8, y_hat: f64, f_mag: f64, threshold: f64, lambda: f64) -> f64 {
    bce_loss(y, y_hat) + lambda * df_loss(y_hat, f_mag, threshold)
}

impl NetworkModel {
    pub fn zeros(input_len: usize) -> Result<Self> {
        let geo = Geometry::new(input_len)?;
        let off = Offsets::new(&geo);
        Ok(Self {
            input_len,
            geo,
            off,
            params: vec![0.0; off.total],
            lambda: 0.5,
            input_norm: InputNorm::default(),
            training: None,
        })
    }

    /// He-uniform kernels (`±sqrt(6 / fan_in)`) and zero biases.
    pub fn init(input_len: usize, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(input_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in m.tensors() {
            if spec.kind == TensorKind::Kernel {
                let fan_in: usize = spec.shape[..spec.shape.len() - 1].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                for v in &mut m.params[spec.range] {
                    *v = rng.random_range(-limit..limit);
                }
            }
        }
        Ok(m)
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape { expected: self.params.len().to_string(), got: params.len().to_string() });
        }
        self.params = params;
        Ok(())
    }

    pub fn tensors(&self) -> Vec<TensorSpec> {
        let o = &self.off;
        let flat = self.geo.flat();
        let t = |name, kind, shape: Vec<usize>, start: usize, end: usize| TensorSpec { name, kind, shape, range: start..end };
        vec![
            t("conv1.kernel", TensorKind::Kernel, vec![KH, 1, 1, F1], o.c1k, o.c1b),
            t("conv1.bias", TensorKind::Bias, vec![F1], o.c1b, o.c2k),
            t("conv2.kernel", TensorKind::Kernel, vec![KH, 1, F1, F2], o.c2k, o.c2b),
            t("conv2.bias", TensorKind::Bias, vec![F2], o.c2b, o.d1k),
            t("dense1.kernel", TensorKind::Kernel, vec![flat, HIDDEN], o.d1k, o.d1b),
            t("dense1.bias", TensorKind::Bias, vec![HIDDEN], o.d1b, o.d2k),
            t("dense2.kernel", TensorKind::Kernel, vec![HIDDEN, CLASSES], o.d2k, o.d2b),
            t("dense2.bias", TensorKind::Bias, vec![CLASSES], o.d2b, o.total),
        ]
    }

    /// Mask that is true on every kernel entry and false on biases.
    pub fn kernel_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.params.len()];
        for spec in self.tensors().into_iter().filter(|s| s.kind == TensorKind::Kernel) {
            m[spec.range].iter_mut().for_each(|v| *v = true);
        }
        m
    }

    fn check_input(&self, rows: usize) -> Result<()> {
        if rows != self.input_len {
            return Err(Error::Shape { expected: format!("{} x {CHANNELS}", self.input_len), got: format!("{rows} x {CHANNELS}") });
        }
        Ok(())
    }

    pub fn prepare(&self, x: &[[f64; CHANNELS]]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite network input"));
        }
        Ok(self.input_norm.apply(x))
    }

    /// Class probabilities for a raw feature window.
    pub fn forward(&self, x: &[[f64; CHANNELS]]) -> Result<[f64; CLASSES]> {
        let prepared = self.prepare(x)?;
        Ok(self.forward_prepared(&prepared))
    }

    pub fn forward_prepared(&self, x: &[f64]) -> [f64; CLASSES] {
        let mut act = Activations::new(&self.geo);
        self.forward_into(x, &mut act);
        act.probs
    }

    pub fn predict_class(&self, x: &[[f64; CHANNELS]]) -> Result<u8> {
        let p = self.forward(x)?;
        Ok(u8::from(p[1] > p[0]))
    }

    fn forward_into(&self, x: &[f64], act: &mut Activations) {
        let g = &self.geo;
        let p = &self.params;
        let o = &self.off;
        act.x.copy_from_slice(x);

        // conv1: a1[h][w][f]
        let k1 = &p[o.c1k..o.c1b];
        let b1 = &p[o.c1b..o.c2k];
        for h in 0..g.c1 {
            for w in 0..CHANNELS {
                let base = (h * CHANNELS + w) * F1;
                let out = &mut act.a1[base..base + F1];
                out.copy_from_slice(b1);
                for k in 0..KH {
                    let xv = x[(h + k) * CHANNELS + w];
                    let kr = &k1[k * F1..(k + 1) * F1];
                    for f in 0..F1 {
                        out[f] += xv * kr[f];
                    }
                }
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        max_pool(&act.a1, g.p1, F1, &mut act.p1, &mut act.p1_idx);

        // conv2: a2[h][w][g]
        let k2 = &p[o.c2k..o.c2b];
        let b2 = &p[o.c2b..o.d1k];
        for h in 0..g.c2 {
            for w in 0..CHANNELS {
                let base = (h * CHANNELS + w) * F2;
                let out = &mut act.a2[base..base + F2];
                out.copy_from_slice(b2);
                for k in 0..KH {
                    let inp = &act.p1[((h + k) * CHANNELS + w) * F1..][..F1];
                    for (f, &iv) in inp.iter().enumerate() {
                        if iv == 0.0 {
                            continue;
                        }
                        let kr = &k2[(k * F1 + f) * F2..][..F2];
                        for gg in 0..F2 {
                            out[gg] += iv * kr[gg];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        max_pool(&act.a2, g.p2, F2, &mut act.p2, &mut act.p2_idx);

        // dense1
        let w1 = &p[o.d1k..o.d1b];
        act.a3.copy_from_slice(&p[o.d1b..o.d2k]);
        for (i, &v) in act.p2.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &w1[i * HIDDEN..(i + 1) * HIDDEN];
            for (a, &w) in act.a3.iter_mut().zip(row) {
                *a += v * w;
            }
        }
        act.a3.iter_mut().for_each(|v| *v = v.max(0.0));

        // dense2 + softmax
        let w2 = &p[o.d2k..o.d2b];
        let mut z = [p[o.d2b], p[o.d2b + 1]];
        for (j, &v) in act.a3.iter().enumerate() {
            for c in 0..CLASSES {
                z[c] += v * w2[j * CLASSES + c];
            }
        }
        act.probs = softmax2(z);
    }

    /// Accumulates `scale · ∂L/∂θ` for one sample into `grad` and returns its loss.
    fn accumulate_grad(
        &self,
        s: &PreparedSample,
        act: &mut Activations,
        scratch: &mut BackScratch,
        grad: &mut [f64],
        scale: f64,
    ) -> f64 {
        self.forward_into(&s.x, act);
        let g = &self.geo;
        let p = &self.params;
        let o = &self.off;
        let y_hat = act.probs[1];
        let loss = sample_loss(s.y, y_hat, s.f_mag, s.threshold, self.lambda);

        // dL/dŷ, then through the two-way softmax: ∂p1/∂z1 = p1·p0 = −∂p1/∂z0.
        let dl_dp = (bce_grad(s.y, y_hat) + self.lambda * df_grad(y_hat, s.f_mag, s.threshold)) * scale;
        let dz1 = dl_dp * act.probs[0] * act.probs[1];
        let dz = [-dz1, dz1];

        // dense2
        grad[o.d2b] += dz[0];
        grad[o.d2b + 1] += dz[1];
        let mut d_a3 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            let a = act.a3[j];
            for c in 0..CLASSES {
                grad[o.d2k + j * CLASSES + c] += a * dz[c];
                d_a3[j] += p[o.d2k + j * CLASSES + c] * dz[c];
            }
            if a <= 0.0 {
                d_a3[j] = 0.0;
            }
        }

        // dense1
        for j in 0..HIDDEN {
            grad[o.d1b + j] += d_a3[j];
        }
        let w1 = &p[o.d1k..o.d1b];
        scratch.d_a2.iter_mut().for_each(|v| *v = 0.0);
        {
            let (gw1, _) = grad[o.d1k..].split_at_mut(o.d1b - o.d1k);
            for (i, &v) in act.p2.iter().enumerate() {
                if v == 0.0 {
                    // Zero input: no kernel gradient, and the pooled ReLU output
                    // is zero so nothing flows back either.
                    continue;
                }
                let row = &w1[i * HIDDEN..(i + 1) * HIDDEN];
                let grow = &mut gw1[i * HIDDEN..(i + 1) * HIDDEN];
                let mut d = 0.0;
                for j in 0..HIDDEN {
                    grow[j] += v * d_a3[j];
                    d += row[j] * d_a3[j];
                }
                scratch.d_a2[act.p2_idx[i]] = d;
            }
        }

        // conv2 (ReLU mask already implied: only positive pooled values propagated)
        scratch.d_p1.iter_mut().for_each(|v| *v = 0.0);
        let k2 = &p[o.c2k..o.c2b];
        for h in 0..g.c2 {
            for w in 0..CHANNELS {
                let base = (h * CHANNELS + w) * F2;
                let dout = &scratch.d_a2[base..base + F2];
                if dout.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for gg in 0..F2 {
                    grad[o.c2b + gg] += dout[gg];
                }
                for k in 0..KH {
                    let in_base = ((h + k) * CHANNELS + w) * F1;
                    for f in 0..F1 {
                        let iv = act.p1[in_base + f];
                        let kr = &k2[(k * F1 + f) * F2..][..F2];
                        let gk = &mut grad[o.c2k + (k * F1 + f) * F2..][..F2];
                        let mut d = 0.0;
                        for gg in 0..F2 {
                            gk[gg] += iv * dout[gg];
                            d += kr[gg] * dout[gg];
                        }
                        scratch.d_p1[in_base + f] += d;
                    }
                }
            }
        }

        // pool1 + ReLU back to conv1 outputs
        scratch.d_a1.iter_mut().for_each(|v| *v = 0.0);
        for (i, &d) in scratch.d_p1.iter().enumerate() {
            if act.p1[i] > 0.0 {
                scratch.d_a1[act.p1_idx[i]] = d;
            }
        }

        // conv1
        for h in 0..g.c1 {
            for w in 0..CHANNELS {
                let base = (h * CHANNELS + w) * F1;
                let dout = &scratch.d_a1[base..base + F1];
                for f in 0..F1 {
                    grad[o.c1b + f] += dout[f];
                }
                for k in 0..KH {
                    let xv = act.x[(h + k) * CHANNELS + w];
                    for f in 0..F1 {
                        grad[o.c1k + k * F1 + f] += xv * dout[f];
                    }
                }
            }
        }
        loss
    }

    /// Mean loss over `batch`.
    pub fn total_loss(&self, batch: &[PreparedSample]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let mut act = Activations::new(&self.geo);
        let sum: f64 = batch
            .iter()
            .map(|s| {
                self.forward_into(&s.x, &mut act);
                sample_loss(s.y, act.probs[1], s.f_mag, s.threshold, self.lambda)
            })
            .sum();
        sum / batch.len() as f64
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[PreparedSample]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let refs: Vec<&PreparedSample> = batch.iter().collect();
        let loss = self.loss_and_grad_into(&refs, &mut grad);
        (loss, grad)
    }

    pub(crate) fn loss_and_grad_into(&self, batch: &[&PreparedSample], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|v| *v = 0.0);
        if batch.is_empty() {
            return 0.0;
        }
        let mut act = Activations::new(&self.geo);
        let mut scratch = BackScratch::new(&self.geo);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for s in batch {
            loss += self.accumulate_grad(s, &mut act, &mut scratch, grad, scale);
        }
        loss * scale
    }
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// 2×1 max pool over rows of a `[rows][CHANNELS][filters]` tensor; records
/// the flat source index of every maximum (first one on ties).
fn max_pool(input: &[f64], out_rows: usize, filters: usize, out: &mut [f64], idx: &mut [usize]) {
    for h in 0..out_rows {
        for w in 0..CHANNELS {
            for f in 0..filters {
                let a = ((2 * h) * CHANNELS + w) * filters + f;
                let b = ((2 * h + 1) * CHANNELS + w) * filters + f;
                let o = (h * CHANNELS + w) * filters + f;
                if input[b] > input[a] {
                    out[o] = input[b];
                    idx[o] = b;
                } else {
                    out[o] = input[a];
                    idx[o] = a;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
