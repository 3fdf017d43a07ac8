use serde::{Deserialize, Serialize};

use super::{Activations, NetworkModel, PreparedSample, CHANNELS};
use crate::error::{Error, Result};
use crate::physics::DisturbanceSeries;
use crate::spectral::FusedFeatureSeries;
use crate::telemetry::{nearest_index, FlightRecord};

/// One labelled training window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub x: Vec<[f64; CHANNELS]>,
    pub y: u8,
    /// `‖f_w‖` at the window end, N.
    pub f_mag: f64,
    /// CFAR threshold at the window end, N.
    pub threshold: f64,
    /// Window end time, s.
    pub t: f64,
}

impl WindowSample {
    pub fn prepare(&self, model: &NetworkModel) -> Result<PreparedSample> {
        Ok(PreparedSample { x: model.prepare(&self.x)?, y: self.y, f_mag: self.f_mag, threshold: self.threshold })
    }
}

/// Which window ends to sample from a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowPlan {
    pub len: usize,
    /// Stride between window ends away from edges, frames.
    pub stride: usize,
    /// Window ends within this many seconds of an edge use `dense_stride`.
    pub dense_radius: f64,
    pub dense_stride: usize,
}

impl Default for WindowPlan {
    fn default() -> Self {
        Self { len: super::DEFAULT_INPUT_LEN, stride: 10, dense_radius: 1.0, dense_stride: 2 }
    }
}

impl WindowPlan {
    pub fn validate(&self) -> Result<()> {
        if self.len == 0 || self.stride == 0 || self.dense_stride == 0 {
            return Err(Error::validation("window len and strides must be >= 1"));
        }
        if !(self.dense_radius >= 0.0) {
            return Err(Error::validation("dense_radius must be >= 0"));
        }
        Ok(())
    }

    fn ends(&self, times: &[f64], edges: &[f64]) -> Vec<usize> {
        let first = self.len - 1;
        (first..times.len())
            .filter(|&j| {
                let k = j - first;
                let near = edges.iter().any(|e| (times[j] - e).abs() <= self.dense_radius);
                if near {
                    k.is_multiple_of(self.dense_stride)
                } else {
                    k.is_multiple_of(self.stride)
                }
            })
            .collect()
    }
}

/// Labelled windows from one record: `y` is the surface class at the window
/// end, `f_mag` and `threshold` the disturbance sample nearest to it.
pub fn build_windows(
    features: &FusedFeatureSeries,
    disturbance: &DisturbanceSeries,
    record: &FlightRecord,
    plan: &WindowPlan,
) -> Result<Vec<WindowSample>> {
    plan.validate()?;
    if features.len() < plan.len {
        return Err(Error::invalid(format!("{} frames are fewer than one window of {}", features.len(), plan.len)));
    }
    if disturbance.is_empty() {
        return Err(Error::invalid("empty disturbance series"));
    }
    let edges: Vec<f64> = record.ground_truth.iter().map(|e| e.t).collect();
    Ok(plan
        .ends(&features.frame_times, &edges)
        .into_iter()
        .map(|j| {
            let t = features.frame_times[j];
            let k = nearest_index(&disturbance.t, t).expect("non-empty disturbance series");
            WindowSample {
                x: features.c[j + 1 - plan.len..=j].to_vec(),
                y: record.surface_state(t),
                f_mag: disturbance.magnitude[k],
                threshold: disturbance.threshold[k],
                t,
            }
        })
        .collect())
}

pub fn predict_windows(model: &NetworkModel, windows: &[WindowSample]) -> Result<Vec<u8>> {
    let mut act = Activations::new(&model.geo);
    windows
        .iter()
        .map(|w| {
            let x = model.prepare(&w.x)?;
            model.forward_into(&x, &mut act);
            Ok(u8::from(act.probs[1] > act.probs[0]))
        })
        .collect()
}

/// `(window end time, predicted class)` for windows ending at
/// `len − 1, len − 1 + stride, …`.
pub fn window_classes(model: &NetworkModel, features: &FusedFeatureSeries, stride: usize) -> Result<Vec<(f64, u8)>> {
    let len = model.input_len();
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    if features.len() < len {
        return Err(Error::invalid(format!("{} frames are fewer than one window of {len}", features.len())));
    }
    let mut act = Activations::new(&model.geo);
    (len - 1..features.len())
        .step_by(stride)
        .map(|j| {
            let x = model.prepare(&features.c[j + 1 - len..=j])?;
            model.forward_into(&x, &mut act);
            Ok((features.frame_times[j], u8::from(act.probs[1] > act.probs[0])))
        })
        .collect()
}

/// Midpoints between consecutive windows whose predicted classes differ.
pub fn detect_edges(model: &NetworkModel, features: &FusedFeatureSeries, stride: usize) -> Result<Vec<f64>> {
    Ok(transitions(&window_classes(model, features, stride)?))
}

pub(crate) fn transitions(classes: &[(f64, u8)]) -> Vec<f64> {
    classes.windows(2).filter(|w| w[0].1 != w[1].1).map(|w| 0.5 * (w[0].0 + w[1].0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_rule() {
        let c = [(1.0, 0), (2.0, 0), (3.0, 1), (4.0, 1)];
        assert_eq!(transitions(&c), vec![2.5]);
        assert!(transitions(&[(1.0, 1), (2.0, 1)]).is_empty());
    }

    #[test]
    fn plan_is_dense_near_edges() {
        let times: Vec<f64> = (0..400).map(|i| i as f64 * 0.01).collect();
        let plan = WindowPlan { len: 100, stride: 50, dense_radius: 0.1, dense_stride: 1 };
        let ends = plan.ends(&times, &[3.0]);
        assert_eq!(ends[0], 99);
        assert!(ends.contains(&149) && ends.contains(&299));
        assert!((291..=309).all(|j| ends.contains(&j)));
        assert!(!ends.contains(&150));
    }
}
