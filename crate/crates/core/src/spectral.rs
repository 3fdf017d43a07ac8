//! Short-time spectral features and cascaded cross-spectrum fusion.
//!
//! Power is one-sided and normalized so that the bins of a frame sum to the
//! energy of the windowed frame, `Σ_k P_k = Σ_t (w_t·x_t)²`.

use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::telemetry::{format_sig9, SourceSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    pub window_size: usize,
    pub overlap: usize,
    /// Inclusive band edges, Hz.
    pub band: [f64; 2],
    pub sample_rate: f64,
    /// Z-score every channel over the record before the transform.
    pub normalize: bool,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { window_size: 199, overlap: 198, band: [6.0, 8.0], sample_rate: 100.0, normalize: true }
    }
}

impl SpectralConfig {
    pub fn hop(&self) -> usize {
        self.window_size.saturating_sub(self.overlap)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 {
            return Err(Error::validation("window_size must be >= 2"));
        }
        if self.overlap >= self.window_size {
            return Err(Error::validation("overlap must be < window_size"));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::validation("sample_rate must be > 0"));
        }
        let [lo, hi] = self.band;
        if !(lo >= 0.0 && hi >= lo && hi <= self.sample_rate / 2.0) {
            return Err(Error::validation("band must satisfy 0 <= lo <= hi <= sample_rate/2"));
        }
        Ok(())
    }
}

/// Power spectrogram, `frames[frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Vec<Vec<f64>>,
    /// Centre time of each frame, s.
    pub frame_times: Vec<f64>,
    pub bin_freqs: Vec<f64>,
    pub window_size: usize,
    pub overlap: usize,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_bins(&self) -> usize {
        self.bin_freqs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandPowerSeries {
    pub values: Vec<f64>,
    pub band: [f64; 2],
}

/// Per-frame fused features `[a_s, ω_s, m_s]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusedFeatureSeries {
    pub c: Vec<[f64; 3]>,
    pub frame_times: Vec<f64>,
}

impl FusedFeatureSeries {
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub fn frame_dt(&self) -> Option<f64> {
        (self.frame_times.len() >= 2).then(|| self.frame_times[1] - self.frame_times[0])
    }

    /// Writes the `frame_t,a_s,omega_s,m_s` dump.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "frame_t,a_s,omega_s,m_s")?;
        for (t, c) in self.frame_times.iter().zip(&self.c) {
            writeln!(out, "{},{},{},{}", format_sig9(*t), format_sig9(c[0]), format_sig9(c[1]), format_sig9(c[2]))?;
        }
        Ok(())
    }
}

/// Symmetric Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let d = (n - 1) as f64;
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / d).cos()).collect()
}

/// Windowed DFTs of every frame, bins `0..=W/2`.
///
/// Frame `k` covers samples `[k·hop, k·hop + W)`.
#[derive(Debug, Clone)]
pub struct ComplexFrames {
    pub bins: Vec<Vec<Complex64>>,
    pub window_size: usize,
    pub overlap: usize,
    pub f_s: f64,
}

impl ComplexFrames {
    /// One-sided power scale for bin `k`: 1 at DC and Nyquist, 2 elsewhere, over `W`.
    pub fn bin_scale(&self, k: usize) -> f64 {
        let w = self.window_size;
        let doubled = k > 0 && !(w.is_multiple_of(2) && k == w / 2);
        (if doubled { 2.0 } else { 1.0 }) / w as f64
    }

    pub fn power(&self) -> Vec<Vec<f64>> {
        self.bins
            .iter()
            .map(|frame| frame.iter().enumerate().map(|(k, x)| self.bin_scale(k) * x.norm_sqr()).collect())
            .collect()
    }

    /// Cross spectrum `G_xy = c_k·X·Y*` per frame and bin.
    pub fn cross(&self, other: &ComplexFrames) -> Result<Vec<Vec<Complex64>>> {
        if self.bins.len() != other.bins.len() || self.window_size != other.window_size {
            return Err(Error::Shape {
                expected: format!("{} frames of width {}", self.bins.len(), self.window_size),
                got: format!("{} frames of width {}", other.bins.len(), other.window_size),
            });
        }
        Ok(self
            .bins
            .iter()
            .zip(&other.bins)
            .map(|(fx, fy)| {
                fx.iter().zip(fy).enumerate().map(|(k, (x, y))| x * y.conj() * self.bin_scale(k)).collect()
            })
            .collect())
    }
}

struct FrameTransform {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    buf: Vec<Complex64>,
}

impl FrameTransform {
    fn new(window_size: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(window_size);
        let scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        Self { window: hann(window_size), fft, scratch, buf: vec![Complex64::default(); window_size] }
    }

    fn transform(&mut self, frame: &[f64]) -> &[Complex64] {
        for ((b, &x), &w) in self.buf.iter_mut().zip(frame).zip(&self.window) {
            *b = Complex64::new(x * w, 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        &self.buf[..self.window.len() / 2 + 1]
    }
}

fn check_stft_args(len: usize, window_size: usize, overlap: usize, f_s: f64) -> Result<usize> {
    if window_size == 0 || overlap >= window_size {
        return Err(Error::invalid(format!("need 0 <= overlap < window_size, got {overlap} and {window_size}")));
    }
    if !(f_s > 0.0 && f_s.is_finite()) {
        return Err(Error::invalid("sample rate must be > 0"));
    }
    if len < window_size {
        return Err(Error::invalid(format!("signal of {len} samples is shorter than one window of {window_size}")));
    }
    let hop = window_size - overlap;
    Ok((len - window_size) / hop + 1)
}

pub fn stft_complex(signal: &[f64], window_size: usize, overlap: usize, f_s: f64) -> Result<ComplexFrames> {
    let n_frames = check_stft_args(signal.len(), window_size, overlap, f_s)?;
    let hop = window_size - overlap;
    let mut tf = FrameTransform::new(window_size);
    let bins = (0..n_frames).map(|k| tf.transform(&signal[k * hop..k * hop + window_size]).to_vec()).collect();
    Ok(ComplexFrames { bins, window_size, overlap, f_s })
}

/// Hann-windowed power spectrogram; frame times are window centres relative
/// to the first sample.
pub fn stft(signal: &[f64], window_size: usize, overlap: usize, f_s: f64) -> Result<Spectrogram> {
    let cf = stft_complex(signal, window_size, overlap, f_s)?;
    let hop = window_size - overlap;
    let half = (window_size - 1) as f64 / 2.0;
    let frame_times = (0..cf.bins.len()).map(|k| (k * hop) as f64 / f_s + half / f_s).collect();
    let bin_freqs = (0..window_size / 2 + 1).map(|k| k as f64 * f_s / window_size as f64).collect();
    Ok(Spectrogram { frames: cf.power(), frame_times, bin_freqs, window_size, overlap })
}

/// Bins whose centre frequency lies in `[f_lo, f_hi]`.
pub fn band_bins(spec: &Spectrogram, f_lo: f64, f_hi: f64) -> Result<Range<usize>> {
    let nyquist = spec.bin_freqs.get(1).copied().unwrap_or(0.0) * spec.window_size as f64 / 2.0;
    if !(f_lo >= 0.0 && f_hi >= f_lo && f_hi <= nyquist + 1e-12) {
        return Err(Error::invalid(format!("band [{f_lo}, {f_hi}] Hz is outside [0, {nyquist}]")));
    }
    let start = spec.bin_freqs.iter().position(|&f| f >= f_lo).unwrap_or(spec.n_bins());
    let end = spec.bin_freqs.iter().rposition(|&f| f <= f_hi).map_or(0, |i| i + 1);
    if start >= end {
        return Err(Error::invalid(format!("band [{f_lo}, {f_hi}] Hz contains no bins")));
    }
    Ok(start..end)
}

pub fn band_power_bins(spec: &Spectrogram, bins: Range<usize>) -> Vec<f64> {
    spec.frames.iter().map(|f| f[bins.clone()].iter().sum()).collect()
}

/// Per-frame power summed over bins with centre in `[f_lo, f_hi]`.
pub fn band_power(spec: &Spectrogram, f_lo: f64, f_hi: f64) -> Result<BandPowerSeries> {
    let bins = band_bins(spec, f_lo, f_hi)?;
    Ok(BandPowerSeries { values: band_power_bins(spec, bins), band: [f_lo, f_hi] })
}

/// Cascaded cross-spectrum magnitude `sqrt(∏ P_i)` per frame; a single
/// series passes through unchanged.
pub fn ccs_fuse(series: &[BandPowerSeries]) -> Result<Vec<f64>> {
    let first = series.first().ok_or_else(|| Error::invalid("ccs_fuse needs at least one series"))?;
    let n = first.values.len();
    if let Some(bad) = series.iter().find(|s| s.values.len() != n) {
        return Err(Error::Shape { expected: n.to_string(), got: bad.values.len().to_string() });
    }
    if series.len() == 1 {
        return Ok(first.values.clone());
    }
    Ok((0..n).map(|i| series.iter().map(|s| s.values[i]).product::<f64>().sqrt()).collect())
}

/// Z-score over the whole series; a constant series maps to zeros.
pub fn z_normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    if x.is_empty() {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - mean) / std).collect()
}

/// Band power of one channel, after optional normalization.
fn channel_band_power(x: &[f64], cfg: &SpectralConfig) -> Result<(BandPowerSeries, Vec<f64>)> {
    let normalized;
    let signal = if cfg.normalize {
        normalized = z_normalize(x);
        &normalized
    } else {
        x
    };
    let spec = stft(signal, cfg.window_size, cfg.overlap, cfg.sample_rate)?;
    Ok((band_power(&spec, cfg.band[0], cfg.band[1])?, spec.frame_times))
}

/// Accelerometer, gyroscope and motor-difference groups fused to `[a_s, ω_s, m_s]`.
pub fn extract_features(source: &SourceSeries, cfg: &SpectralConfig) -> Result<FusedFeatureSeries> {
    cfg.validate()?;
    if source.channels.iter().any(|c| c.len() != source.t.len()) {
        return Err(Error::validation("source channels differ in length"));
    }
    let t0 = source.t.first().copied().unwrap_or(0.0);
    let mut rel_times = Vec::new();
    let mut fused: Vec<Vec<f64>> = Vec::with_capacity(3);
    for group in source.channels.chunks(3) {
        let mut parts = Vec::with_capacity(3);
        for ch in group {
            let (bp, times) = channel_band_power(ch, cfg)?;
            rel_times = times;
            parts.push(bp);
        }
        fused.push(ccs_fuse(&parts)?);
    }
    let c = (0..rel_times.len()).map(|i| [fused[0][i], fused[1][i], fused[2][i]]).collect();
    Ok(FusedFeatureSeries { c, frame_times: rel_times.iter().map(|t| t0 + t).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const FS: f64 = 100.0;

    fn sine(f: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / FS).sin()).collect()
    }

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Direct O(W²) DFT of one windowed frame.
    fn naive_power(frame: &[f64]) -> Vec<f64> {
        let w = frame.len();
        let win = hann(w);
        (0..w / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, (&x, &h)) in frame.iter().zip(&win).enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / w as f64;
                    re += x * h * ang.cos();
                    im += x * h * ang.sin();
                }
                let scale = if k == 0 || (w.is_multiple_of(2) && k == w / 2) { 1.0 } else { 2.0 };
                scale * (re * re + im * im) / w as f64
            })
            .collect()
    }

    #[test]
    fn shape_and_frame_times() {
        let s = stft(&vec![0.0; 500], 199, 198, FS).unwrap();
        assert_eq!(s.n_frames(), 302);
        assert_eq!(s.n_bins(), 100);
        assert!((s.frame_times[0] - 0.99).abs() < 1e-12);
        assert!((s.frame_times[1] - s.frame_times[0] - 0.01).abs() < 1e-12);
        assert!(s.frames.iter().flatten().all(|&p| p == 0.0));
    }

    #[test]
    fn seven_hz_peak() {
        let s = stft(&sine(7.0, 600), 199, 198, FS).unwrap();
        let bin_w = FS / 199.0;
        for frame in &s.frames {
            let k = (0..frame.len()).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
            assert!((s.bin_freqs[k] - 7.0).abs() <= bin_w);
        }
    }

    #[test]
    fn matches_naive_dft() {
        let x = noise(5, 260);
        let s = stft(&x, 199, 150, FS).unwrap();
        for (k, frame) in s.frames.iter().enumerate() {
            let want = naive_power(&x[k * 49..k * 49 + 199]);
            for (a, b) in frame.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-9));
            }
        }
    }

    #[test]
    fn windowed_parseval_odd_and_even() {
        for w in [199usize, 64] {
            let x = noise(w as u64, 400);
            let s = stft(&x, w, w - 7, FS).unwrap();
            let win = hann(w);
            for (k, frame) in s.frames.iter().enumerate() {
                let energy: f64 = x[k * 7..k * 7 + w].iter().zip(&win).map(|(a, h)| (a * h).powi(2)).sum();
                let total: f64 = frame.iter().sum();
                assert!((total - energy).abs() <= 1e-9 * energy);
            }
        }
    }

    #[test]
    fn short_signal_and_bad_overlap_rejected() {
        assert!(stft(&[0.0; 10], 199, 198, FS).is_err());
        assert!(stft(&[0.0; 300], 199, 199, FS).is_err());
    }

    #[test]
    fn band_six_to_eight_selects_bins_12_to_15() {
        let s = stft(&vec![0.0; 199], 199, 198, FS).unwrap();
        assert_eq!(band_bins(&s, 6.0, 8.0).unwrap(), 12..16);
        assert!(band_bins(&s, 6.1, 6.2).is_err());
        assert!(band_bins(&s, 40.0, 60.0).is_err());
    }

    #[test]
    fn band_power_localizes_energy() {
        let s = stft(&sine(7.0, 500), 199, 198, FS).unwrap();
        let inband = band_power(&s, 6.0, 8.0).unwrap();
        let outband = band_power(&s, 20.0, 22.0).unwrap();
        for (a, b) in inband.values.iter().zip(&outband.values) {
            assert!(*a > 100.0 * b);
        }
        let zero = stft(&vec![0.0; 300], 199, 198, FS).unwrap();
        assert!(band_power(&zero, 6.0, 8.0).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_noise_band_power_scales_with_width() {
        let x = noise(11, 199 * 1000);
        // Disjoint frames so the Monte-Carlo samples are independent.
        let s = stft(&x, 199, 0, FS).unwrap();
        assert_eq!(s.n_frames(), 1000);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let narrow = mean(&band_power(&s, 10.0, 12.0).unwrap().values);
        let wide = mean(&band_power(&s, 10.0, 14.0).unwrap().values);
        let ratio = wide / narrow;
        assert!((ratio - 2.0).abs() <= 0.2, "ratio {ratio}");
    }

    #[test]
    fn ccs_cases() {
        let s = BandPowerSeries { values: vec![0.0, 1.0, 4.0, 9.0], band: [6.0, 8.0] };
        assert_eq!(ccs_fuse(std::slice::from_ref(&s)).unwrap(), s.values);
        assert_eq!(ccs_fuse(&[s.clone(), s.clone()]).unwrap(), s.values);
        let cubed = ccs_fuse(&[s.clone(), s.clone(), s.clone()]).unwrap();
        for (c, v) in cubed.iter().zip(&s.values) {
            assert!((c - v.powf(1.5)).abs() <= 1e-12 * v.powf(1.5).max(1.0));
        }
        let z = BandPowerSeries { values: vec![0.0; 4], band: [6.0, 8.0] };
        assert!(ccs_fuse(&[s.clone(), z]).unwrap().iter().all(|&v| v == 0.0));
        let short = BandPowerSeries { values: vec![1.0], band: [6.0, 8.0] };
        assert!(ccs_fuse(&[s, short]).is_err());
        assert!(ccs_fuse(&[]).is_err());
    }

    #[test]
    fn ccs_matches_direct_cross_spectrum() {
        let x = noise(21, 400);
        let y = noise(22, 400);
        let cx = stft_complex(&x, 199, 180, FS).unwrap();
        let cy = stft_complex(&y, 199, 180, FS).unwrap();
        let gxy = cx.cross(&cy).unwrap();
        let (px, py) = (cx.power(), cy.power());
        for f in 0..gxy.len() {
            for k in 0..gxy[f].len() {
                let a = BandPowerSeries { values: vec![px[f][k]], band: [0.0, 0.0] };
                let b = BandPowerSeries { values: vec![py[f][k]], band: [0.0, 0.0] };
                let fused = ccs_fuse(&[a, b]).unwrap()[0];
                let direct = gxy[f][k].norm();
                assert!((fused - direct).abs() <= 1e-9 * direct.max(1e-300));
            }
        }
    }

    fn source_from(channels: [Vec<f64>; 9]) -> SourceSeries {
        let n = channels[0].len();
        SourceSeries { t: (0..n).map(|i| i as f64 / FS).collect(), channels }
    }

    #[test]
    fn zero_input_zero_features() {
        let src = source_from(std::array::from_fn(|_| vec![0.0; 600]));
        let f = extract_features(&src, &SpectralConfig::default()).unwrap();
        assert_eq!(f.len(), 600 - 198);
        assert!(f.c.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn burst_localizes_all_channels() {
        let n = 900;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let burst: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / FS;
                let b = if (4.0..5.0).contains(&t) { (2.0 * std::f64::consts::PI * 7.0 * t).sin() } else { 0.0 };
                b + 0.01 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let src = source_from(std::array::from_fn(|_| burst.clone()));
        let f = extract_features(&src, &SpectralConfig::default()).unwrap();
        let dt = f.frame_dt().unwrap();
        for ch in 0..3 {
            let k = (0..f.len()).max_by(|&a, &b| f.c[a][ch].total_cmp(&f.c[b][ch])).unwrap();
            let t = f.frame_times[k];
            assert!((4.0 - dt..=5.0 + dt).contains(&t), "channel {ch} peaks at {t}");
        }
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let f = FusedFeatureSeries { c: vec![[1.0, 2.0, 3.0]], frame_times: vec![0.99] };
        let mut out = Vec::new();
        f.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "frame_t,a_s,omega_s,m_s\n0.99,1,2,3\n");
    }

    proptest! {
        #[test]
        fn band_power_is_additive(seed in 0u64..1000, split in 1usize..40) {
            let x = noise(seed, 260);
            let s = stft(&x, 199, 190, FS).unwrap();
            let all = band_power_bins(&s, 0..40);
            let lo = band_power_bins(&s, 0..split);
            let hi = band_power_bins(&s, split..40);
            for i in 0..all.len() {
                prop_assert!((lo[i] + hi[i] - all[i]).abs() <= 1e-12 * all[i]);
            }
        }

        #[test]
        fn ccs_is_permutation_invariant(v in prop::collection::vec(prop::array::uniform3(0.0..10.0f64), 1..20)) {
            let mk = |j: usize| BandPowerSeries { values: v.iter().map(|r| r[j]).collect(), band: [6.0, 8.0] };
            let a = ccs_fuse(&[mk(0), mk(1), mk(2)]).unwrap();
            let b = ccs_fuse(&[mk(2), mk(0), mk(1)]).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
            }
        }

        #[test]
        fn burst_time_localization(center in 3.0..6.0f64) {
            let n = 900;
            let x: Vec<f64> = (0..n)
                .map(|i| {
                    let t = i as f64 / FS;
                    let env = (-((t - center) / 0.1).powi(2)).exp();
                    env * (2.0 * std::f64::consts::PI * 7.0 * t).sin()
                })
                .collect();
            let s = stft(&x, 199, 198, FS).unwrap();
            let bp = band_power(&s, 6.0, 8.0).unwrap().values;
            let k = (0..bp.len()).max_by(|&a, &b| bp[a].total_cmp(&bp[b])).unwrap();
            prop_assert!((s.frame_times[k] - center).abs() <= 199.0 / FS);
        }
    }
}
