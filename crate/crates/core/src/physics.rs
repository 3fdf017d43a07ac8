//! Disturbance-force estimation and the leading-window CFAR detector.

use std::io::Write;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::DroneParams;
use crate::simulator::orthonormalize;
use crate::telemetry::{format_sig9, FlightRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfarConfig {
    pub p_fa: f64,
    /// Leading (reference) window length, samples.
    pub leading_window: usize,
    pub guard_cells: usize,
}

impl Default for CfarConfig {
    fn default() -> Self {
        Self { p_fa: 1e-6, leading_window: 50, guard_cells: 15 }
    }
}

impl CfarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_fa > 0.0 && self.p_fa < 1.0) {
            return Err(Error::validation("p_fa must lie in (0, 1)"));
        }
        if self.leading_window == 0 {
            return Err(Error::validation("leading_window must be >= 1"));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        cfar_alpha(self.leading_window, self.p_fa)
    }

    /// Samples before the first cell under test.
    pub fn warmup(&self) -> usize {
        self.leading_window + self.guard_cells
    }
}

/// Threshold multiplier `N·(P_FA^(−1/N) − 1)`.
pub fn cfar_alpha(n: usize, p_fa: f64) -> f64 {
    let n = n as f64;
    n * (p_fa.powf(-1.0 / n) - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfarOutput {
    pub alerts: Vec<bool>,
    /// `+inf` during warm-up.
    pub thresholds: Vec<f64>,
}

/// Causal CFAR: each cell is compared with `α` times the mean of the
/// `N` samples that end `guard` cells before it.
pub fn fr_cfar(x: &[f64], cfg: &CfarConfig) -> Result<CfarOutput> {
    cfg.validate()?;
    let (n, guard) = (cfg.leading_window, cfg.guard_cells);
    if x.len() <= n + guard {
        return Err(Error::invalid(format!("series of {} samples needs more than {} for CFAR", x.len(), n + guard)));
    }
    let alpha = cfg.alpha();
    let mut alerts = vec![false; x.len()];
    let mut thresholds = vec![f64::INFINITY; x.len()];
    for i in n + guard..x.len() {
        let start = i - guard - n;
        let mean = x[start..start + n].iter().sum::<f64>() / n as f64;
        let t = alpha * mean;
        thresholds[i] = t;
        alerts[i] = x[i] > t;
    }
    Ok(CfarOutput { alerts, thresholds })
}

/// Attitude-estimator options for [`estimate_disturbance_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Reset roll and pitch to level whenever the vehicle looks steady.
    pub relevel: bool,
    /// Body-rate norm below which the vehicle counts as steady, rad/s.
    pub steady_rate: f64,
    /// Allowed deviation of the specific-force norm from `g`, m/s².
    pub steady_accel: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { relevel: true, steady_rate: 0.05, steady_accel: 0.3 }
    }
}

/// Estimated external force per sample with CFAR annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSeries {
    pub t: Vec<f64>,
    /// World frame, N.
    pub f_w: Vec<[f64; 3]>,
    pub magnitude: Vec<f64>,
    pub alert: Vec<bool>,
    pub threshold: Vec<f64>,
}

impl DisturbanceSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Runs the CFAR detector over the magnitude and stores alerts and thresholds.
    pub fn with_cfar(mut self, cfg: &CfarConfig) -> Result<Self> {
        let out = fr_cfar(&self.magnitude, cfg)?;
        self.alert = out.alerts;
        self.threshold = out.thresholds;
        Ok(self)
    }

    pub fn alert_times(&self) -> Vec<f64> {
        self.t.iter().zip(&self.alert).filter(|(_, &a)| a).map(|(&t, _)| t).collect()
    }

    /// Writes the `t,fwx,fwy,fwz,mag,threshold,alert` dump.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,fwx,fwy,fwz,mag,threshold,alert")?;
        for i in 0..self.len() {
            let f = self.f_w[i];
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                format_sig9(self.t[i]),
                format_sig9(f[0]),
                format_sig9(f[1]),
                format_sig9(f[2]),
                format_sig9(self.magnitude[i]),
                format_sig9(self.threshold[i]),
                u8::from(self.alert[i])
            )?;
        }
        Ok(())
    }
}

fn level_with_heading(r: &Matrix3<f64>) -> Matrix3<f64> {
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).into_inner()
}

pub fn estimate_disturbance(record: &FlightRecord, params: &DroneParams) -> Result<DisturbanceSeries> {
    estimate_disturbance_with(record, params, &EstimatorConfig::default())
}

/// Newton's-second-law residual `f_w = m·a − m·g − R·f_u`.
///
/// The accelerometer reads specific force `a_b`, so the world acceleration is
/// `R·a_b + g` and the residual reduces to `R·(m·a_b − f_u)`; its norm does not
/// depend on the attitude estimate. `R` starts at identity and integrates the
/// gyro between samples.
pub fn estimate_disturbance_with(
    record: &FlightRecord,
    params: &DroneParams,
    cfg: &EstimatorConfig,
) -> Result<DisturbanceSeries> {
    params.validate()?;
    if !record.is_aligned() {
        return Err(Error::validation("disturbance estimation requires an aligned record"));
    }
    let n = record.len();
    let mut r = Matrix3::identity();
    let mut out = DisturbanceSeries {
        t: Vec::with_capacity(n),
        f_w: Vec::with_capacity(n),
        magnitude: Vec::with_capacity(n),
        alert: vec![false; n],
        threshold: vec![f64::INFINITY; n],
    };
    for (k, (imu, motor)) in record.imu.iter().zip(&record.motors).enumerate() {
        let acc = Vector3::from(imu.acc);
        let gyro = Vector3::from(imu.gyro);
        if cfg.relevel && gyro.norm() < cfg.steady_rate && (acc.norm() - params.g).abs() < cfg.steady_accel {
            r = level_with_heading(&r);
        }
        let thrust = params.thrust_from_pwm(&motor.pwm);
        let body = acc * params.mass - Vector3::new(0.0, 0.0, thrust);
        let f = r * body;
        out.t.push(imu.t);
        out.f_w.push([f.x, f.y, f.z]);
        out.magnitude.push(body.norm());
        if let Some(next) = record.imu.get(k + 1) {
            let dt = next.t - imu.t;
            r = orthonormalize(&(r * Rotation3::new(gyro * dt).into_inner()));
        }
    }
    Ok(out)
}

/// Transitions with at least one alert within `±window` of them.
pub fn gate_detections(transitions: &[f64], disturbance: &DisturbanceSeries, window: f64) -> Vec<f64> {
    let alerts = disturbance.alert_times();
    transitions
        .iter()
        .copied()
        .filter(|&t| {
            let i = alerts.partition_point(|&a| a < t - window);
            alerts.get(i).is_some_and(|&a| a <= t + window)
        })
        .collect()
}

/// CFAR threshold trace over `‖f_w‖` used to gate the training loss.
pub fn label_threshold(disturbance: &DisturbanceSeries, cfg: &CfarConfig) -> Result<Vec<f64>> {
    Ok(fr_cfar(&disturbance.magnitude, cfg)?.thresholds)
}
