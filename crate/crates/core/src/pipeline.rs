//! Record-level glue: alignment, features, disturbance, detection and gating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, NetworkModel, WindowPlan, WindowSample};
use crate::physics::{self, CfarConfig, DisturbanceSeries, EstimatorConfig};
use crate::spectral::{self, FusedFeatureSeries, SpectralConfig};
use crate::telemetry::{self, FlightRecord, SourceSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Common grid both telemetry streams are resampled onto, Hz.
    pub sample_rate: f64,
    pub spectral: SpectralConfig,
    pub cfar: CfarConfig,
    pub estimator: EstimatorConfig,
    /// Frames between consecutive classified windows at inference.
    pub detect_stride: usize,
    /// Half-width of the alert window a transition needs to survive, s.
    pub gate_window: f64,
    /// Whether network transitions are filtered by disturbance alerts.
    pub gate: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sample_rate: 100.0,
            spectral: SpectralConfig::default(),
            cfar: CfarConfig::default(),
            estimator: EstimatorConfig::default(),
            detect_stride: 1,
            gate_window: 0.25,
            gate: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::validation("sample_rate must be > 0"));
        }
        if (self.spectral.sample_rate - self.sample_rate).abs() > 1e-9 {
            return Err(Error::validation("spectral.sample_rate must equal sample_rate"));
        }
        if self.detect_stride == 0 {
            return Err(Error::validation("detect_stride must be >= 1"));
        }
        if !(self.gate_window >= 0.0 && self.gate_window.is_finite()) {
            return Err(Error::validation("gate_window must be >= 0"));
        }
        self.spectral.validate()?;
        self.cfar.validate()
    }
}

/// Everything derived from one record before the network runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub record: FlightRecord,
    pub source: SourceSeries,
    pub features: FusedFeatureSeries,
    pub disturbance: DisturbanceSeries,
}

pub fn analyze(record: &FlightRecord, cfg: &PipelineConfig) -> Result<Analysis> {
    cfg.validate()?;
    let record = telemetry::align(record, cfg.sample_rate)?;
    let source = telemetry::build_source_vector(&record)?;
    let features = spectral::extract_features(&source, &cfg.spectral)?;
    let disturbance = physics::estimate_disturbance_with(&record, &record.meta.drone, &cfg.estimator)?.with_cfar(&cfg.cfar)?;
    Ok(Analysis { record, source, features, disturbance })
}

impl Analysis {
    pub fn windows(&self, plan: &WindowPlan) -> Result<Vec<WindowSample>> {
        nn::build_windows(&self.features, &self.disturbance, &self.record, plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detections {
    /// Class transitions before gating, s.
    pub raw: Vec<f64>,
    /// Transitions that survive the alert gate (equal to `raw` when gating is off), s.
    pub edges: Vec<f64>,
}

pub fn detect(model: &NetworkModel, analysis: &Analysis, cfg: &PipelineConfig) -> Result<Detections> {
    let raw = nn::detect_edges(model, &analysis.features, cfg.detect_stride)?;
    let edges = if cfg.gate { physics::gate_detections(&raw, &analysis.disturbance, cfg.gate_window) } else { raw.clone() };
    Ok(Detections { raw, edges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{fly_mission, MissionConfig, Scene};
    use crate::DroneParams;

    #[test]
    fn analysis_shapes() {
        let scene = Scene::height_edge(-1.0, 2.0, 10.0, 0.3, 1.0);
        let cfg = MissionConfig { duration: 6.0, ..Default::default() };
        let rec = fly_mission(&scene, &DroneParams::default(), &cfg, 5).unwrap();
        let a = analyze(&rec, &PipelineConfig::default()).unwrap();
        assert_eq!(a.features.len(), rec.len() - 198);
        assert_eq!(a.disturbance.len(), rec.len());
        let w = a.windows(&WindowPlan::default()).unwrap();
        assert!(w.iter().any(|s| s.y == 0) && w.iter().any(|s| s.y == 1));
    }

    #[test]
    fn rejects_mismatched_rates() {
        let cfg = PipelineConfig { sample_rate: 50.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
