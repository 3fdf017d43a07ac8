//! Magnitude pruning, affine integer quantization and size accounting.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, InputNorm, NetworkModel, PreparedSample, TensorKind, TrainConfig, TrainHistory};

/// Reference float and compressed model sizes (bytes) from a deployed build.
pub const REFERENCE_FLOAT_BYTES: u64 = 141_837;
pub const REFERENCE_COMPACT_BYTES: u64 = 14_375;

/// Polynomial sparsity ramp from `s_i` at step 0 to `s_f` at `t_e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    pub s_i: f64,
    pub s_f: f64,
    pub t_e: usize,
    pub p_exp: f64,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self { s_i: 0.0, s_f: 0.9, t_e: 10, p_exp: 3.0 }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.s_i && self.s_i <= self.s_f && self.s_f < 1.0) {
            return Err(Error::validation("schedule needs 0 <= s_i <= s_f < 1"));
        }
        if self.t_e == 0 || !(self.p_exp > 0.0) {
            return Err(Error::validation("schedule needs t_e >= 1 and p_exp > 0"));
        }
        Ok(())
    }

    /// `s_f + (s_i − s_f)·(1 − t/t_e)^p`, held at `s_f` past `t_e`.
    pub fn sparsity_at(&self, t: usize) -> f64 {
        let frac = (t.min(self.t_e)) as f64 / self.t_e as f64;
        self.s_f + (self.s_i - self.s_f) * (1.0 - frac).powf(self.p_exp)
    }
}

/// Result of ranking `values` and zeroing the smallest fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub values: Vec<f64>,
    /// True where the entry survives (or was never eligible).
    pub keep: Vec<bool>,
    /// Magnitude of the smallest surviving eligible entry.
    pub threshold: f64,
    pub pruned: usize,
    pub eligible: usize,
}

/// Zeroes the `⌊target·n⌋` smallest-magnitude eligible entries (ties broken
/// by index).
pub fn prune_values(values: &[f64], eligible: &[bool], target: f64) -> Result<PruneOutcome> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::invalid(format!("target sparsity {target} must lie in [0, 1)")));
    }
    if values.len() != eligible.len() {
        return Err(Error::Shape { expected: values.len().to_string(), got: eligible.len().to_string() });
    }
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| eligible[i]).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    let k = (target * order.len() as f64).floor() as usize;
    let mut out = values.to_vec();
    let mut keep = vec![true; values.len()];
    for &i in &order[..k] {
        out[i] = 0.0;
        keep[i] = false;
    }
    let threshold = order.get(k).map_or(f64::INFINITY, |&i| values[i].abs());
    Ok(PruneOutcome { values: out, keep, threshold, pruned: k, eligible: order.len() })
}

/// A model with a pruning mask over its kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel {
    pub model: NetworkModel,
    pub keep: Vec<bool>,
    pub threshold: f64,
    pub pruned: usize,
    pub eligible: usize,
}

impl PrunedModel {
    pub fn sparsity(&self) -> f64 {
        self.pruned as f64 / self.eligible.max(1) as f64
    }
}

/// Global magnitude pruning over all kernel weights; biases are left intact.
pub fn prune(model: &NetworkModel, target: f64) -> Result<PrunedModel> {
    let outcome = prune_values(model.params(), &model.kernel_mask(), target)?;
    let mut m = model.clone();
    m.set_params(outcome.values)?;
    Ok(PrunedModel { model: m, keep: outcome.keep, threshold: outcome.threshold, pruned: outcome.pruned, eligible: outcome.eligible })
}

/// Gradual pruning: at step `t = 1..=t_e` prune to `sparsity_at(t)`, then
/// train one epoch with the pruned entries held at zero.
pub fn prune_gradually(
    model: &NetworkModel,
    data: &[PreparedSample],
    schedule: &PruneSchedule,
    train_cfg: &TrainConfig,
) -> Result<(PrunedModel, TrainHistory)> {
    schedule.validate()?;
    let mut current = model.clone();
    let mut history = TrainHistory::default();
    for t in 1..=schedule.t_e {
        let pruned = prune(&current, schedule.sparsity_at(t))?;
        let cfg = TrainConfig { epochs: 1, seed: train_cfg.seed.wrapping_add(t as u64), stop_at_accuracy: None, ..train_cfg.clone() };
        let (trained, h) = nn::train_masked(&pruned.model, data, &cfg, Some(&pruned.keep))?;
        history.epochs.extend(h.epochs.into_iter().map(|mut e| {
            e.epoch = t;
            e
        }));
        current = trained;
    }
    // Training only moves survivors, so this final pass re-derives the mask
    // without changing any value.
    Ok((prune(&current, schedule.s_f)?, history))
}

/// Compression settings for the command line and experiment runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    pub sparsity: f64,
    pub bits: u32,
    /// Prune gradually with masked fine-tuning instead of in one shot.
    pub fine_tune: bool,
    /// Ramp used when `fine_tune` is set; its `s_f` is replaced by `sparsity`.
    pub schedule: PruneSchedule,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self { sparsity: 0.9, bits: 8, fine_tune: false, schedule: PruneSchedule::default() }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::validation("sparsity must lie in [0, 1)"));
        }
        check_bits(self.bits)?;
        if self.fine_tune {
            PruneSchedule { s_f: self.sparsity, s_i: self.schedule.s_i.min(self.sparsity), ..self.schedule.clone() }.validate()?;
        }
        Ok(())
    }

    /// Prunes (one-shot, or gradually on `data`) and quantizes `model`.
    pub fn apply(&self, model: &NetworkModel, data: &[PreparedSample], train_cfg: &TrainConfig) -> Result<CompactModel> {
        self.validate()?;
        let pruned = if self.fine_tune {
            let schedule = PruneSchedule { s_f: self.sparsity, s_i: self.schedule.s_i.min(self.sparsity), ..self.schedule.clone() };
            prune_gradually(model, data, &schedule, train_cfg)?.0
        } else {
            prune(model, self.sparsity)?
        };
        quantize_model(&pruned, self.bits)
    }
}

/// Affine mapping `r ≈ S·(q − Z)` for one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i64,
    pub bits: u32,
}

impl QuantParams {
    pub fn q_max(&self) -> i64 {
        (1i64 << self.bits) - 1
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    if matches!(bits, 4 | 8 | 16) {
        Ok(())
    } else {
        Err(Error::invalid(format!("bit width must be 4, 8 or 16, got {bits}")))
    }
}

/// `S = (max − min)/(2^b − 1)`, `Z = round(−min/S)`, `q = clamp(round(r/S) + Z)`.
/// A constant tensor uses `S = 1`.
pub fn quantize(tensor: &[f64], bits: u32) -> Result<(Vec<u32>, QuantParams)> {
    check_bits(bits)?;
    if tensor.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot quantize non-finite values"));
    }
    let min = tensor.iter().copied().fold(f64::INFINITY, f64::min);
    let max = tensor.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let q_max = (1i64 << bits) - 1;
    let scale = if tensor.is_empty() || max <= min { 1.0 } else { (max - min) / q_max as f64 };
    let zero_point = if tensor.is_empty() { 0 } else { (-min / scale).round() as i64 };
    let params = QuantParams { scale, zero_point, bits };
    let q = tensor.iter().map(|&r| ((r / scale).round() as i64 + zero_point).clamp(0, q_max) as u32).collect();
    Ok((q, params))
}

pub fn dequantize(q: &[u32], params: &QuantParams) -> Vec<f64> {
    q.iter().map(|&v| params.scale * (v as i64 - params.zero_point) as f64).collect()
}

/// Idealized compression ratio `32 / ((1 − s_f)·b)`.
pub fn compression_ratio(s_f: f64, bits: u32) -> f64 {
    32.0 / ((1.0 - s_f) * bits as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactTensor {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub quant: QuantParams,
    pub q: Vec<u32>,
    pub keep: Vec<bool>,
}

impl CompactTensor {
    pub fn dequantized(&self) -> Vec<f64> {
        dequantize(&self.q, &self.quant).into_iter().zip(&self.keep).map(|(v, &k)| if k { v } else { 0.0 }).collect()
    }
}

/// Pruned and quantized network.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel {
    pub input_len: usize,
    pub lambda: f64,
    pub input_norm: InputNorm,
    pub target_sparsity: f64,
    pub threshold: f64,
    pub bits: u32,
    pub tensors: Vec<CompactTensor>,
}

/// Quantizes every tensor of a pruned model.
pub fn quantize_model(pruned: &PrunedModel, bits: u32) -> Result<CompactModel> {
    check_bits(bits)?;
    let m = &pruned.model;
    let tensors = m
        .tensors()
        .into_iter()
        .map(|spec| {
            let (q, quant) = quantize(&m.params()[spec.range.clone()], bits)?;
            Ok(CompactTensor {
                name: spec.name.into(),
                kind: spec.kind,
                shape: spec.shape,
                quant,
                q,
                keep: pruned.keep[spec.range].to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompactModel {
        input_len: m.input_len(),
        lambda: m.lambda,
        input_norm: m.input_norm.clone(),
        target_sparsity: pruned.sparsity(),
        threshold: pruned.threshold,
        bits,
        tensors,
    })
}

/// One-shot prune to `sparsity` followed by `bits`-bit quantization.
pub fn compress(model: &NetworkModel, sparsity: f64, bits: u32) -> Result<CompactModel> {
    quantize_model(&prune(model, sparsity)?, bits)
}

impl CompactModel {
    /// Float model with the dequantized weights.
    pub fn to_model(&self) -> Result<NetworkModel> {
        let mut m = NetworkModel::zeros(self.input_len)?;
        let specs = m.tensors();
        if specs.len() != self.tensors.len() {
            return Err(Error::Shape { expected: specs.len().to_string(), got: self.tensors.len().to_string() });
        }
        let mut params = vec![0.0; m.n_params()];
        for (spec, t) in specs.iter().zip(&self.tensors) {
            if t.name != spec.name || t.q.len() != spec.range.len() || t.keep.len() != spec.range.len() {
                return Err(Error::Shape { expected: format!("{} {:?}", spec.name, spec.shape), got: format!("{} {:?}", t.name, t.shape) });
            }
            params[spec.range.clone()].copy_from_slice(&t.dequantized());
        }
        m.set_params(params)?;
        m.lambda = self.lambda;
        m.input_norm = self.input_norm.clone();
        Ok(m)
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.q.len()).sum()
    }

    pub fn nonzero(&self) -> usize {
        self.tensors.iter().map(|t| t.keep.iter().zip(&t.q).filter(|(&k, &q)| k && q as i64 != t.quant.zero_point).count()).sum()
    }

    pub fn size_report(&self) -> SizeReport {
        let n = self.n_params() as u64;
        let float_bytes = 4 * n;
        let nonzero = self.nonzero() as u64;
        let mask_bytes = n.div_ceil(8);
        let header_bytes = 12 * self.tensors.len() as u64;
        let compact_bytes = (nonzero * self.bits as u64).div_ceil(8) + mask_bytes + header_bytes;
        let pruned: usize = self.tensors.iter().map(|t| t.keep.iter().filter(|k| !**k).count()).sum();
        let eligible: usize = self.tensors.iter().filter(|t| t.kind == TensorKind::Kernel).map(|t| t.keep.len()).sum();
        let achieved = pruned as f64 / eligible.max(1) as f64;
        SizeReport {
            parameters: n,
            nonzero,
            bits: self.bits,
            sparsity: achieved,
            float_bytes,
            compact_bytes,
            realized_ratio: float_bytes as f64 / compact_bytes as f64,
            idealized_ratio: compression_ratio(achieved, self.bits),
            reference_ratio: REFERENCE_FLOAT_BYTES as f64 / REFERENCE_COMPACT_BYTES as f64,
        }
    }

    pub fn to_file(&self) -> CompactFile {
        CompactFile {
            format: COMPACT_FORMAT.into(),
            version: COMPACT_VERSION,
            input_len: self.input_len,
            lambda: self.lambda,
            input_norm: self.input_norm.clone(),
            target_sparsity: self.target_sparsity,
            threshold: self.threshold,
            bits: self.bits,
            tensors: self
                .tensors
                .iter()
                .map(|t| CompactTensorRecord {
                    name: t.name.clone(),
                    kind: t.kind,
                    shape: t.shape.clone(),
                    scale: t.quant.scale,
                    zero_point: t.quant.zero_point,
                    values: B64.encode(pack_codes(&t.q, self.bits)),
                    mask: B64.encode(pack_mask(&t.keep)),
                })
                .collect(),
        }
    }

    pub fn from_file(file: &CompactFile) -> Result<Self> {
        if file.format != COMPACT_FORMAT || file.version != COMPACT_VERSION {
            return Err(Error::validation(format!("unsupported compact model {:?} v{}", file.format, file.version)));
        }
        check_bits(file.bits)?;
        let tensors = file
            .tensors
            .iter()
            .map(|t| {
                let n: usize = t.shape.iter().product();
                let decode = |s: &str| B64.decode(s).map_err(|e| Error::validation(format!("tensor {}: {e}", t.name)));
                let q = unpack_codes(&decode(&t.values)?, file.bits, n)?;
                let keep = unpack_mask(&decode(&t.mask)?, n)?;
                let quant = QuantParams { scale: t.scale, zero_point: t.zero_point, bits: file.bits };
                if !(quant.scale > 0.0 && quant.scale.is_finite()) {
                    return Err(Error::validation(format!("tensor {} has invalid scale", t.name)));
                }
                Ok(CompactTensor { name: t.name.clone(), kind: t.kind, shape: t.shape.clone(), quant, q, keep })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = CompactModel {
            input_len: file.input_len,
            lambda: file.lambda,
            input_norm: file.input_norm.clone(),
            target_sparsity: file.target_sparsity,
            threshold: file.threshold,
            bits: file.bits,
            tensors,
        };
        m.to_model()?;
        Ok(m)
    }
}

pub const COMPACT_FORMAT: &str = "edgesense-compact-model";
pub const COMPACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompactTensorRecord {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub scale: f64,
    pub zero_point: i64,
    /// Base64 of the codes packed little-endian at the model bit width.
    pub values: String,
    /// Base64 bitmap, bit `i % 8` of byte `i / 8` set where the entry survives.
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompactFile {
    pub format: String,
    pub version: u32,
    pub input_len: usize,
    pub lambda: f64,
    pub input_norm: InputNorm,
    pub target_sparsity: f64,
    pub threshold: f64,
    pub bits: u32,
    pub tensors: Vec<CompactTensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub parameters: u64,
    pub nonzero: u64,
    pub bits: u32,
    /// Achieved sparsity over kernel weights.
    pub sparsity: f64,
    pub float_bytes: u64,
    /// Sparse storage: packed nonzero codes, survival bitmap and per-tensor
    /// scale/zero-point headers.
    pub compact_bytes: u64,
    pub realized_ratio: f64,
    pub idealized_ratio: f64,
    pub reference_ratio: f64,
}

fn pack_codes(q: &[u32], bits: u32) -> Vec<u8> {
    match bits {
        4 => q.chunks(2).map(|c| (c[0] as u8 & 0x0f) | ((c.get(1).copied().unwrap_or(0) as u8 & 0x0f) << 4)).collect(),
        8 => q.iter().map(|&v| v as u8).collect(),
        _ => q.iter().flat_map(|&v| (v as u16).to_le_bytes()).collect(),
    }
}

fn unpack_codes(bytes: &[u8], bits: u32, n: usize) -> Result<Vec<u32>> {
    let expected = (n * bits as usize).div_ceil(8);
    if bytes.len() != expected {
        return Err(Error::Shape { expected: format!("{expected} bytes"), got: format!("{} bytes", bytes.len()) });
    }
    Ok(match bits {
        4 => (0..n).map(|i| ((bytes[i / 2] >> (4 * (i % 2))) & 0x0f) as u32).collect(),
        8 => bytes.iter().map(|&b| b as u32).collect(),
        _ => bytes.chunks(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect(),
    })
}

fn pack_mask(keep: &[bool]) -> Vec<u8> {
    keep.chunks(8).map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &k)| acc | (u8::from(k) << i))).collect()
}

fn unpack_mask(bytes: &[u8], n: usize) -> Result<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Shape { expected: format!("{} mask bytes", n.div_ceil(8)), got: bytes.len().to_string() });
    }
    Ok((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

pub fn save_compact(model: &CompactModel, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&model.to_file())?)?;
    Ok(())
}

pub fn load_compact(path: &Path) -> Result<CompactModel> {
    let file: CompactFile = serde_json::from_slice(&std::fs::read(path)?)?;
    CompactModel::from_file(&file)
}
