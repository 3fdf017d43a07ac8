use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{baseline_detect, improvement_percent, match_and_score, BaselineConfig, DetectionReport, ErrorSummary, FlightReport};
use crate::compress::{CompressionConfig, SizeReport};
use crate::error::{Error, Result};
use crate::nn::{self, InputNorm, NetworkModel, PreparedSample, TrainConfig, TrainHistory, WindowPlan, WindowSample};
use crate::params::DroneParams;
use crate::pipeline::{self, Analysis, PipelineConfig};
use crate::simulator::{fly_mission, MissionConfig, Scene};
use crate::telemetry::{format_sig9, FlightRecord};

pub const EVAL_FORMAT: &str = "edgesense-eval";

/// Ground plane followed by a raised platform whose leading edge position is
/// drawn per flight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneTemplate {
    pub x_start: f64,
    pub x_end: f64,
    /// Edge position is uniform on this interval, m.
    pub edge_range: [f64; 2],
    pub platform_height: f64,
    pub material_gain: f64,
}

impl Default for SceneTemplate {
    fn default() -> Self {
        Self { x_start: -2.0, x_end: 12.0, edge_range: [1.5, 2.5], platform_height: 0.3, material_gain: 1.0 }
    }
}

impl SceneTemplate {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.edge_range;
        if !(self.x_start < lo && lo <= hi && hi < self.x_end) {
            return Err(Error::validation("scene edge_range must lie inside (x_start, x_end)"));
        }
        if !(self.platform_height > 0.0) {
            return Err(Error::validation("scene platform_height must be > 0"));
        }
        Ok(())
    }

    pub fn scene(&self, edge_x: f64) -> Scene {
        Scene::height_edge(self.x_start, edge_x, self.x_end, self.platform_height, self.material_gain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub drone: DroneParams,
    /// Flight template; height and approach angle are set per flight.
    pub mission: MissionConfig,
    pub scene: SceneTemplate,
    pub pipeline: PipelineConfig,
    pub window: WindowPlan,
    pub train: TrainConfig,
    /// DF-loss weight.
    pub lambda: f64,
    /// Feed `ln(c + log_eps)` to the network instead of raw fused power.
    pub log_input: bool,
    pub log_eps: f64,
    pub train_flights: usize,
    /// Training flights cycle through these heights (m) and angles (degrees).
    pub train_heights: Vec<f64>,
    pub train_angles: Vec<f64>,
    pub test_flights: usize,
    /// Reference test condition.
    pub test_height: f64,
    pub test_angle: f64,
    pub heights: Vec<f64>,
    pub angles: Vec<f64>,
    pub baseline: BaselineConfig,
    /// Largest detection/edge gap that still counts as a match, s.
    pub max_match: f64,
    pub compression: CompressionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            drone: DroneParams::default(),
            mission: MissionConfig::default(),
            scene: SceneTemplate::default(),
            pipeline: PipelineConfig::default(),
            window: WindowPlan::default(),
            train: TrainConfig::default(),
            lambda: 0.5,
            log_input: true,
            log_eps: 1e-6,
            train_flights: 200,
            train_heights: vec![0.04],
            train_angles: vec![0.0],
            test_flights: 30,
            test_height: 0.04,
            test_angle: 0.0,
            heights: vec![0.04, 0.09, 0.12],
            angles: vec![0.0, 10.0, -10.0, 20.0, -20.0],
            baseline: BaselineConfig::default(),
            max_match: 1.0,
            compression: CompressionConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Every problem found, not just the first.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                out.push(format!("{field}: {e}"));
            }
        };
        check("drone", self.drone.validate());
        check("mission", self.mission.validate());
        check("scene", self.scene.validate());
        check("pipeline", self.pipeline.validate());
        check("window", self.window.validate());
        check("train", self.train.validate());
        check("baseline", self.baseline.validate());
        check("compression", self.compression.validate());
        if let Err(e) = NetworkModel::zeros(self.window.len) {
            out.push(format!("window: {e}"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push("lambda: must be >= 0".into());
        }
        if !(self.log_eps > 0.0) && self.log_input {
            out.push("log_eps: must be > 0 when log_input is set".into());
        }
        if self.train_flights == 0 || self.test_flights == 0 {
            out.push("train_flights/test_flights: must be >= 1".into());
        }
        if self.train_heights.is_empty() || self.train_angles.is_empty() {
            out.push("train_heights/train_angles: must be non-empty".into());
        }
        let z_min = self.drone.prop_radius / 2.0;
        for (name, hs) in [("train_heights", &self.train_heights), ("heights", &self.heights)] {
            if hs.iter().any(|&h| !(h > z_min)) {
                out.push(format!("{name}: every height must exceed {z_min} m"));
            }
        }
        if !(self.test_height > z_min) {
            out.push(format!("test_height: must exceed {z_min} m"));
        }
        if self.angles.iter().chain(&self.train_angles).chain([&self.test_angle]).any(|a| !(a.abs() < 60.0)) {
            out.push("angles: must lie in (-60, 60) degrees".into());
        }
        if !(self.max_match > 0.0) {
            out.push("max_match: must be > 0".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(d))
        }
    }

    pub fn miss_penalty_m(&self) -> f64 {
        self.max_match * self.mission.speed
    }
}

/// Parameters of one simulated flight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlightSpec {
    pub id: usize,
    pub seed: u64,
    pub edge_x: f64,
    pub height: f64,
    pub angle_deg: f64,
}

fn derive_seed(base: u64, set: u64, id: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(set);
    rng.set_word_pos(2 * id as u128);
    rng.random()
}

fn flight_specs(cfg: &ExperimentConfig, set: u64, count: usize, mut condition: impl FnMut(usize) -> (f64, f64)) -> Vec<FlightSpec> {
    (0..count)
        .map(|id| {
            let seed = derive_seed(cfg.seed, set, id);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(3);
            let [lo, hi] = cfg.scene.edge_range;
            let edge_x = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let (height, angle_deg) = condition(id);
            FlightSpec { id, seed, edge_x, height, angle_deg }
        })
        .collect()
}

fn train_specs(cfg: &ExperimentConfig) -> Vec<FlightSpec> {
    let (nh, na) = (cfg.train_heights.len(), cfg.train_angles.len());
    flight_specs(cfg, 1, cfg.train_flights, |id| (cfg.train_heights[id % nh], cfg.train_angles[(id / nh) % na]))
}

fn test_specs(cfg: &ExperimentConfig, height: f64, angle: f64) -> Vec<FlightSpec> {
    flight_specs(cfg, 2, cfg.test_flights, |_| (height, angle))
}

pub fn generate_flights(cfg: &ExperimentConfig, specs: &[FlightSpec]) -> Result<Vec<FlightRecord>> {
    specs
        .iter()
        .map(|s| {
            let mission = MissionConfig { height: s.height, approach_angle_deg: s.angle_deg, ..cfg.mission.clone() };
            fly_mission(&cfg.scene.scene(s.edge_x), &cfg.drone, &mission, s.seed)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDetector {
    pub model: NetworkModel,
    pub history: TrainHistory,
    /// Prepared training windows.
    pub data: Vec<PreparedSample>,
}

fn analyze_all(cfg: &ExperimentConfig, records: &[FlightRecord]) -> Result<Vec<Analysis>> {
    records.iter().map(|r| pipeline::analyze(r, &cfg.pipeline)).collect()
}

fn windows_of(cfg: &ExperimentConfig, analyses: &[Analysis]) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for a in analyses {
        out.extend(a.windows(&cfg.window)?);
    }
    Ok(out)
}

/// Untrained model with the input transform fitted on `windows`.
pub fn fitted_model(cfg: &ExperimentConfig, windows: &[WindowSample]) -> Result<NetworkModel> {
    let mut model = NetworkModel::init(cfg.window.len, cfg.train.seed)?;
    model.lambda = cfg.lambda;
    if cfg.log_input {
        model.input_norm = InputNorm::fit(windows.iter().map(|w| w.x.as_slice()), cfg.log_eps);
    }
    Ok(model)
}

pub fn prepare_all(model: &NetworkModel, windows: &[WindowSample]) -> Result<Vec<PreparedSample>> {
    windows.iter().map(|w| w.prepare(model)).collect()
}

/// Labelled windows of the training flights.
pub fn training_windows(cfg: &ExperimentConfig) -> Result<Vec<WindowSample>> {
    cfg.validate()?;
    let records = generate_flights(cfg, &train_specs(cfg))?;
    windows_of(cfg, &analyze_all(cfg, &records)?)
}

pub fn train_detector(cfg: &ExperimentConfig) -> Result<TrainedDetector> {
    cfg.validate()?;
    let windows = training_windows(cfg)?;
    let model = fitted_model(cfg, &windows)?;
    let data = prepare_all(&model, &windows)?;
    let (model, history) = nn::train(&model, &data, &cfg.train)?;
    Ok(TrainedDetector { model, history, data })
}

/// Outcome of one test condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub height: f64,
    pub angle_deg: f64,
    pub pipeline: ErrorSummary,
    pub baseline: ErrorSummary,
    pub improvement_percent: f64,
    /// Window-level classification accuracy of the network.
    pub window_accuracy: f64,
}

struct ConditionResult {
    point: SweepPoint,
    pipeline: DetectionReport,
    baseline: DetectionReport,
    specs: Vec<FlightSpec>,
    windows: Vec<WindowSample>,
}

fn run_condition(cfg: &ExperimentConfig, model: &NetworkModel, height: f64, angle: f64) -> Result<ConditionResult> {
    let specs = test_specs(cfg, height, angle);
    let records = generate_flights(cfg, &specs)?;
    let speed = cfg.mission.speed;
    let (mut nn_flights, mut base_flights, mut windows) = (Vec::new(), Vec::new(), Vec::new());
    for (spec, record) in specs.iter().zip(&records) {
        let analysis = pipeline::analyze(record, &cfg.pipeline)?;
        let det = pipeline::detect(model, &analysis, &cfg.pipeline)?;
        let gt = &analysis.record.ground_truth;
        nn_flights.push(FlightReport {
            id: spec.id,
            score: match_and_score(&det.edges, gt, speed, cfg.max_match),
            detections: det.edges,
        });
        let base = baseline_detect(&analysis.source, &cfg.baseline)?;
        base_flights.push(FlightReport { id: spec.id, score: match_and_score(&base, gt, speed, cfg.max_match), detections: base });
        windows.extend(analysis.windows(&cfg.window)?);
    }
    let penalty = cfg.miss_penalty_m();
    let pipeline = DetectionReport::new("pipeline", nn_flights, penalty);
    let baseline = DetectionReport::new("baseline", base_flights, penalty);
    let predicted = nn::predict_windows(model, &windows)?;
    let hits = predicted.iter().zip(&windows).filter(|(p, w)| **p == w.y).count();
    let point = SweepPoint {
        height,
        angle_deg: angle,
        improvement_percent: improvement_percent(pipeline.summary.mae_m, baseline.summary.mae_m),
        pipeline: pipeline.summary.clone(),
        baseline: baseline.summary.clone(),
        window_accuracy: hits as f64 / windows.len().max(1) as f64,
    };
    Ok(ConditionResult { point, pipeline, baseline, specs, windows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub windows: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub speed: f64,
    pub test_flights: usize,
    pub test_height: f64,
    pub test_angle: f64,
    pub training: Option<TrainingSummary>,
    pub pipeline: DetectionReport,
    pub baseline: DetectionReport,
    pub improvement_percent: f64,
    pub window_accuracy: f64,
    pub flights: Vec<FlightSpec>,
    pub height_sweep: Vec<SweepPoint>,
    pub angle_sweep: Vec<SweepPoint>,
    pub compression: Option<CompressionSummary>,
}

/// Pruned and quantized model measured on the reference test windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionSummary {
    pub float_window_accuracy: f64,
    pub compact_window_accuracy: f64,
    /// `100·(float − compact)` accuracy.
    pub accuracy_drop_points: f64,
    pub size: SizeReport,
}

fn compression_summary(
    cfg: &ExperimentConfig,
    model: &NetworkModel,
    train_data: Option<&[PreparedSample]>,
    test_windows: &[WindowSample],
) -> Result<Option<CompressionSummary>> {
    let data = match (cfg.compression.fine_tune, train_data) {
        (true, None) => return Ok(None),
        (_, d) => d.unwrap_or(&[]),
    };
    let compact = cfg.compression.apply(model, data, &cfg.train)?;
    let test = prepare_all(model, test_windows)?;
    let float = nn::accuracy(model, &test);
    let small = nn::accuracy(&compact.to_model()?, &test);
    Ok(Some(CompressionSummary {
        float_window_accuracy: float,
        compact_window_accuracy: small,
        accuracy_drop_points: 100.0 * (float - small),
        size: compact.size_report(),
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub summary: EvalSummary,
    pub model: NetworkModel,
    /// Labelled windows of the reference test condition.
    pub test_windows: Vec<WindowSample>,
}

/// Trains on fresh training flights, then evaluates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let trained = train_detector(cfg)?;
    let training = trained.history.epochs.last().map(|e| TrainingSummary {
        windows: trained.data.len(),
        epochs: e.epoch,
        final_loss: e.loss,
        final_accuracy: e.accuracy,
        lambda: trained.model.lambda,
    });
    let mut out = evaluate(cfg, &trained.model)?;
    out.summary.training = training;
    out.summary.compression = compression_summary(cfg, &out.model, Some(&trained.data), &out.test_windows)?;
    Ok(out)
}

/// Evaluates an already trained model on the test and sweep conditions.
/// Gradual-pruning fine-tuning needs training data, so with `fine_tune` set
/// the compression section is omitted.
pub fn run_experiment_with_model(cfg: &ExperimentConfig, model: &NetworkModel) -> Result<ExperimentOutput> {
    let mut out = evaluate(cfg, model)?;
    out.summary.compression = compression_summary(cfg, model, None, &out.test_windows)?;
    Ok(out)
}

fn evaluate(cfg: &ExperimentConfig, model: &NetworkModel) -> Result<ExperimentOutput> {
    cfg.validate()?;
    if model.input_len() != cfg.window.len {
        return Err(Error::Shape { expected: cfg.window.len.to_string(), got: model.input_len().to_string() });
    }
    let mut cache: Vec<ConditionResult> = Vec::new();
    let mut point = |h: f64, a: f64| -> Result<usize> {
        if let Some(i) = cache.iter().position(|c| c.point.height == h && c.point.angle_deg == a) {
            return Ok(i);
        }
        cache.push(run_condition(cfg, model, h, a)?);
        Ok(cache.len() - 1)
    };
    let base = point(cfg.test_height, cfg.test_angle)?;
    let heights = cfg.heights.iter().map(|&h| point(h, cfg.test_angle)).collect::<Result<Vec<_>>>()?;
    let angles = cfg.angles.iter().map(|&a| point(cfg.test_height, a)).collect::<Result<Vec<_>>>()?;
    let height_sweep = heights.into_iter().map(|i| cache[i].point.clone()).collect();
    let angle_sweep = angles.into_iter().map(|i| cache[i].point.clone()).collect();
    let reference = cache.swap_remove(base);
    let summary = EvalSummary {
        format: EVAL_FORMAT.into(),
        version: 1,
        seed: cfg.seed,
        speed: cfg.mission.speed,
        test_flights: cfg.test_flights,
        test_height: cfg.test_height,
        test_angle: cfg.test_angle,
        training: None,
        improvement_percent: reference.point.improvement_percent,
        window_accuracy: reference.point.window_accuracy,
        pipeline: reference.pipeline,
        baseline: reference.baseline,
        flights: reference.specs,
        height_sweep,
        angle_sweep,
        compression: None,
    };
    Ok(ExperimentOutput { summary, model: model.clone(), test_windows: reference.windows })
}

impl ExperimentOutput {
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    /// Writes `summary.json`, `flights.csv` and the plot-data CSVs into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.json"), self.summary_json()? + "\n")?;
        std::fs::write(dir.join("flights.csv"), flights_csv(&self.summary))?;
        std::fs::write(dir.join("error_vs_height.csv"), sweep_csv("height_m", &self.summary.height_sweep, |p| p.height))?;
        std::fs::write(dir.join("error_vs_angle.csv"), sweep_csv("angle_deg", &self.summary.angle_sweep, |p| p.angle_deg))?;
        std::fs::write(dir.join("error_cdf.csv"), cdf_csv(&self.summary))?;
        Ok(())
    }
}

fn flights_csv(s: &EvalSummary) -> String {
    let mut out = String::from("method,flight,status,gt_t,detected_t,error_m\n");
    for report in [&s.pipeline, &s.baseline] {
        for f in &report.flights {
            for m in &f.score.matched {
                let _ = writeln!(
                    out,
                    "{},{},matched,{},{},{}",
                    report.method,
                    f.id,
                    format_sig9(m.gt_t),
                    format_sig9(m.detected_t),
                    format_sig9(m.error_m)
                );
            }
            for t in &f.score.missed {
                let _ = writeln!(out, "{},{},missed,{},,", report.method, f.id, format_sig9(*t));
            }
            for t in &f.score.false_positives {
                let _ = writeln!(out, "{},{},false_positive,,{},", report.method, f.id, format_sig9(*t));
            }
        }
    }
    out
}

fn sweep_csv(key: &str, points: &[SweepPoint], value: impl Fn(&SweepPoint) -> f64) -> String {
    let mut out = format!("{key},pipeline_mae_m,baseline_mae_m,pipeline_missed,baseline_missed,window_accuracy\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            format_sig9(value(p)),
            format_sig9(p.pipeline.mae_m),
            format_sig9(p.baseline.mae_m),
            p.pipeline.missed,
            p.baseline.missed,
            format_sig9(p.window_accuracy)
        );
    }
    out
}

/// Empirical CDF of absolute error per method, misses at the penalty value.
fn cdf_csv(s: &EvalSummary) -> String {
    let mut out = String::from("method,abs_error_m,fraction\n");
    for report in [&s.pipeline, &s.baseline] {
        let mut errs: Vec<f64> = report
            .flights
            .iter()
            .flat_map(|f| {
                f.score
                    .matched
                    .iter()
                    .map(|m| m.error_m.abs())
                    .chain(std::iter::repeat_n(report.summary.miss_penalty_m, f.score.missed.len()))
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        let n = errs.len();
        for (i, e) in errs.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", report.method, format_sig9(*e), format_sig9((i + 1) as f64 / n as f64));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_and_stable() {
        let cfg = ExperimentConfig::default();
        let a = test_specs(&cfg, 0.04, 0.0);
        let b = test_specs(&cfg, 0.09, 10.0);
        assert_eq!(a.len(), 30);
        assert!(a.iter().zip(&b).all(|(x, y)| x.seed == y.seed && x.edge_x == y.edge_x));
        let train = train_specs(&cfg);
        assert!(train.iter().all(|t| a.iter().all(|s| s.seed != t.seed)));
        assert!(a.iter().all(|s| (1.5..2.5).contains(&s.edge_x)));
    }

    #[test]
    fn diagnostics_collect_every_problem() {
        let cfg = ExperimentConfig { lambda: -1.0, test_flights: 0, max_match: 0.0, ..Default::default() };
        let d = cfg.diagnostics();
        assert!(d.len() >= 3, "{d:?}");
        assert!(ExperimentConfig::default().diagnostics().is_empty());
    }
}
