//! Detection-distance metric, the correlation baseline and experiment runs.

mod experiment;

pub use experiment::{
    generate_flights, run_experiment, run_experiment_with_model, train_detector, ExperimentConfig, ExperimentOutput,
    fitted_model, prepare_all, training_windows, EvalSummary, FlightSpec, SceneTemplate, SweepPoint, TrainedDetector,
    TrainingSummary, CompressionSummary, EVAL_FORMAT,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::stft;
use crate::telemetry::{EdgeEvent, SourceSeries};

/// One detection paired with a ground-truth edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedEdge {
    pub detected_t: f64,
    pub gt_t: f64,
    /// `(gt_t − detected_t)·speed`: positive when the detection is early, m.
    pub error_m: f64,
}

/// Matching outcome for one flight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightScore {
    pub matched: Vec<MatchedEdge>,
    pub false_positives: Vec<f64>,
    pub missed: Vec<f64>,
}

/// Greedy nearest matching: pairs within `max_match` seconds are taken in
/// increasing `|Δt|`, each detection and each edge at most once.
pub fn match_and_score(detections: &[f64], ground_truth: &[EdgeEvent], speed: f64, max_match: f64) -> FlightScore {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (g, e) in ground_truth.iter().enumerate() {
        for (d, &t) in detections.iter().enumerate() {
            let gap = (t - e.t).abs();
            if gap <= max_match {
                pairs.push((gap, g, d));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; ground_truth.len()];
    let mut det_used = vec![false; detections.len()];
    let mut matched = Vec::new();
    for (_, g, d) in pairs {
        if gt_used[g] || det_used[d] {
            continue;
        }
        gt_used[g] = true;
        det_used[d] = true;
        let (detected_t, gt_t) = (detections[d], ground_truth[g].t);
        matched.push(MatchedEdge { detected_t, gt_t, error_m: (gt_t - detected_t) * speed });
    }
    matched.sort_by(|a, b| a.gt_t.total_cmp(&b.gt_t));
    FlightScore {
        matched,
        false_positives: detections.iter().zip(&det_used).filter(|(_, &u)| !u).map(|(&t, _)| t).collect(),
        missed: ground_truth.iter().zip(&gt_used).filter(|(_, &u)| !u).map(|(e, _)| e.t).collect(),
    }
}

/// Aggregate error over a set of flights.
///
/// A missed edge contributes `miss_penalty_m`, the largest error a match can
/// carry, so a silent detector cannot score well. False positives are counted
/// but do not enter the error statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub edges: usize,
    pub matched: usize,
    pub missed: usize,
    pub false_positives: usize,
    pub miss_penalty_m: f64,
    pub mae_m: f64,
    pub median_m: f64,
    pub max_m: f64,
    /// Mean signed error of matched edges; positive means early, m.
    pub mean_signed_m: f64,
}

pub fn summarize<'a>(scores: impl IntoIterator<Item = &'a FlightScore>, miss_penalty_m: f64) -> ErrorSummary {
    let mut abs = Vec::new();
    let (mut matched, mut missed, mut fps, mut signed) = (0, 0, 0, 0.0);
    for s in scores {
        matched += s.matched.len();
        missed += s.missed.len();
        fps += s.false_positives.len();
        signed += s.matched.iter().map(|m| m.error_m).sum::<f64>();
        abs.extend(s.matched.iter().map(|m| m.error_m.abs()));
        abs.extend(std::iter::repeat_n(miss_penalty_m, s.missed.len()));
    }
    abs.sort_by(f64::total_cmp);
    let n = abs.len();
    let median = match n {
        0 => 0.0,
        _ if n % 2 == 1 => abs[n / 2],
        _ => 0.5 * (abs[n / 2 - 1] + abs[n / 2]),
    };
    ErrorSummary {
        edges: matched + missed,
        matched,
        missed,
        false_positives: fps,
        miss_penalty_m,
        mae_m: if n == 0 { 0.0 } else { abs.iter().sum::<f64>() / n as f64 },
        median_m: median,
        max_m: abs.last().copied().unwrap_or(0.0),
        mean_signed_m: if matched == 0 { 0.0 } else { signed / matched as f64 },
    }
}

/// Relative MAE reduction of `method` against `reference`, percent.
pub fn improvement_percent(method_mae: f64, reference_mae: f64) -> f64 {
    if reference_mae > 0.0 {
        100.0 * (reference_mae - method_mae) / reference_mae
    } else {
        0.0
    }
}

/// Per-flight entry of a detection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightReport {
    pub id: usize,
    pub detections: Vec<f64>,
    #[serde(flatten)]
    pub score: FlightScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: String,
    pub flights: Vec<FlightReport>,
    pub summary: ErrorSummary,
}

impl DetectionReport {
    pub fn new(method: &str, flights: Vec<FlightReport>, miss_penalty_m: f64) -> Self {
        let summary = summarize(flights.iter().map(|f| &f.score), miss_penalty_m);
        Self { method: method.into(), flights, summary }
    }
}

/// Spectral-correlation change detector used as the reference method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub window_size: usize,
    pub overlap: usize,
    /// Frames per Pearson correlation window.
    pub corr_window: usize,
    /// Centred moving-average span applied to the summed correlation, s.
    pub smooth_seconds: f64,
    /// Inflections are kept only where `|slope|` reaches this fraction of the
    /// largest slope in the record.
    pub slope_fraction: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { window_size: 199, overlap: 198, corr_window: 100, smooth_seconds: 0.5, slope_fraction: 0.5 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 || self.overlap >= self.window_size {
            return Err(Error::validation("baseline window must be >= 2 with overlap < window"));
        }
        if self.corr_window < 2 {
            return Err(Error::validation("baseline corr_window must be >= 2"));
        }
        if !(self.smooth_seconds >= 0.0) || !(0.0..=1.0).contains(&self.slope_fraction) {
            return Err(Error::validation("baseline smoothing must be >= 0 and slope_fraction in [0, 1]"));
        }
        Ok(())
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale = ma.abs().max(mb.abs()).max(1e-300);
    if saa.sqrt() <= 1e-12 * scale * n.sqrt() || sbb.sqrt() <= 1e-12 * scale * n.sqrt() {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

fn moving_average(x: &[f64], span: usize) -> Vec<f64> {
    if span <= 1 || x.is_empty() {
        return x.to_vec();
    }
    let half = span / 2;
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Summed pairwise correlation of per-channel STFT power, smoothed; edges are
/// sign changes of its second difference on steep stretches.
pub fn baseline_detect(source: &SourceSeries, cfg: &BaselineConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let f_s = source.sample_rate().ok_or_else(|| Error::invalid("baseline needs at least two samples"))?;
    let t0 = source.t[0];
    let mut powers = Vec::with_capacity(9);
    let mut frame_times = Vec::new();
    for ch in &source.channels {
        let spec = stft(ch, cfg.window_size, cfg.overlap, f_s)?;
        powers.push(spec.frames.iter().map(|f| f.iter().sum::<f64>()).collect::<Vec<f64>>());
        frame_times = spec.frame_times;
    }
    let n = frame_times.len();
    if n < cfg.corr_window + 3 {
        return Err(Error::invalid(format!("{n} frames are too few for a correlation window of {}", cfg.corr_window)));
    }
    let w = cfg.corr_window;
    let mut corr = Vec::with_capacity(n + 1 - w);
    let mut times = Vec::with_capacity(n + 1 - w);
    for end in w..=n {
        let mut total = 0.0;
        for a in 0..powers.len() {
            for b in a + 1..powers.len() {
                if let Some(r) = pearson(&powers[a][end - w..end], &powers[b][end - w..end]) {
                    total += r;
                }
            }
        }
        corr.push(total);
        times.push(t0 + 0.5 * (frame_times[end - w] + frame_times[end - 1]));
    }
    let frame_dt = 1.0 / (f_s / (cfg.window_size - cfg.overlap) as f64);
    let smooth = moving_average(&corr, (cfg.smooth_seconds / frame_dt).round() as usize);

    let d1: Vec<f64> = smooth.windows(2).map(|p| p[1] - p[0]).collect();
    let d2: Vec<f64> = d1.windows(2).map(|p| p[1] - p[0]).collect();
    let max_slope = d1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_slope <= 0.0 {
        return Ok(Vec::new());
    }
    // d2[i] is centred on smooth[i + 1]; a sign change between d2[i] and
    // d2[i + 1] sits on d1[i + 1], the slope between smooth[i + 1] and smooth[i + 2].
    let mut out = Vec::new();
    for i in 0..d2.len().saturating_sub(1) {
        let crosses = (d2[i] > 0.0 && d2[i + 1] < 0.0) || (d2[i] < 0.0 && d2[i + 1] > 0.0);
        if crosses && d1[i + 1].abs() >= cfg.slope_fraction * max_slope {
            out.push(0.5 * (times[i + 1] + times[i + 2]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::EdgeKind;
    use proptest::prelude::*;

    fn gt(times: &[f64]) -> Vec<EdgeEvent> {
        times.iter().map(|&t| EdgeEvent { t, kind: EdgeKind::Height, position: 0.5 * t }).collect()
    }

    #[test]
    fn late_detection_is_negative() {
        let s = match_and_score(&[4.1], &gt(&[4.0]), 0.5, 1.0);
        assert_eq!(s.matched.len(), 1);
        assert!((s.matched[0].error_m + 0.05).abs() < 1e-12);
        let early = match_and_score(&[3.8], &gt(&[4.0]), 0.5, 1.0);
        assert!((early.matched[0].error_m - 0.1).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let s = match_and_score(&[2.0, 5.0], &gt(&[2.0, 5.0]), 0.5, 1.0);
        assert_eq!(summarize([&s], 0.5).mae_m, 0.0);
        let none = match_and_score(&[], &gt(&[2.0, 5.0]), 0.5, 1.0);
        assert_eq!(none.missed, vec![2.0, 5.0]);
        let sum = summarize([&none], 0.5);
        assert_eq!((sum.missed, sum.mae_m), (2, 0.5));
    }

    #[test]
    fn far_detection_is_false_positive() {
        let s = match_and_score(&[7.5, 4.2, 4.05], &gt(&[4.0]), 0.5, 1.0);
        assert_eq!(s.matched[0].detected_t, 4.05);
        assert_eq!(s.false_positives, vec![7.5, 4.2]);
        let sum = summarize([&s], 0.5);
        assert_eq!(sum.false_positives, 2);
        assert!((sum.mae_m - 0.025).abs() < 1e-12);
    }

    #[test]
    fn summary_statistics() {
        let a = match_and_score(&[1.0, 3.2], &gt(&[1.1, 3.0]), 1.0, 1.0);
        let b = match_and_score(&[], &gt(&[9.0]), 1.0, 1.0);
        let s = summarize([&a, &b], 1.0);
        assert_eq!((s.edges, s.matched, s.missed), (3, 2, 1));
        assert!((s.mae_m - (0.1 + 0.2 + 1.0) / 3.0).abs() < 1e-12);
        assert!((s.median_m - 0.2).abs() < 1e-12);
        assert_eq!(s.max_m, 1.0);
        assert_eq!(improvement_percent(0.0, 0.4), 100.0);
        assert!((improvement_percent(0.051, 0.364) - 85.99).abs() < 0.01);
    }

    #[test]
    fn baseline_constant_input_is_silent() {
        let n = 800;
        let t: Vec<f64> = (0..n).map(|i| i as f64 / 100.0).collect();
        let src = SourceSeries { t, channels: std::array::from_fn(|c| vec![c as f64; n]) };
        assert!(baseline_detect(&src, &BaselineConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn baseline_finds_coherent_onset() {
        let n = 900;
        let t: Vec<f64> = (0..n).map(|i| i as f64 / 100.0).collect();
        let mut seed = 7u64;
        let mut lcg = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let channels = std::array::from_fn(|c| {
            (0..n)
                .map(|i| {
                    let s = if t[i] >= 4.5 { (2.0 * std::f64::consts::PI * 7.0 * t[i]).sin() * (1.0 + 0.5 * (0.7 * t[i] + c as f64).sin()) } else { 0.0 };
                    s + 0.3 * lcg()
                })
                .collect()
        });
        let out = baseline_detect(&SourceSeries { t, channels }, &BaselineConfig::default()).unwrap();
        assert!(out.windows(2).all(|w| w[0] < w[1]));
        assert!(out.iter().any(|&d| (d - 4.5).abs() <= 1.0), "{out:?}");
    }

    proptest! {
        #[test]
        fn metric_identity_and_translation(
            det in prop::collection::vec(0u32..1280, 0..6),
            truth in prop::collection::vec(0u32..1280, 0..4),
            shift in -10i32..10,
            speed in 0.1..2.0f64,
        ) {
            // Dyadic grid so that shifting is exact in floating point.
            let det: Vec<f64> = det.iter().map(|&k| k as f64 / 64.0).collect();
            let truth: Vec<f64> = truth.iter().map(|&k| k as f64 / 64.0).collect();
            let shift = shift as f64 * 0.5;
            let a = match_and_score(&det, &gt(&truth), speed, 1.0);
            for m in &a.matched {
                prop_assert!((m.error_m.abs() - (m.detected_t - m.gt_t).abs() * speed).abs() < 1e-12);
            }
            let det2: Vec<f64> = det.iter().map(|t| t + shift).collect();
            let truth2: Vec<f64> = truth.iter().map(|t| t + shift).collect();
            let b = match_and_score(&det2, &gt(&truth2), speed, 1.0);
            prop_assert_eq!(a.matched.len(), b.matched.len());
            prop_assert_eq!(a.missed.len(), b.missed.len());
            prop_assert_eq!(a.false_positives.len(), b.false_positives.len());
            for (x, y) in a.matched.iter().zip(&b.matched) {
                prop_assert!((x.error_m - y.error_m).abs() < 1e-9);
            }
        }
    }
}
