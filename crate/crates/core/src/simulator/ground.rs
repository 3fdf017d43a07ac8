use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::QuadrotorState;
use crate::error::{Error, Result};
use crate::params::DroneParams;
use crate::telemetry::EdgeKind;

/// One flat surface patch spanning `[x_start, x_end)` along the world x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub x_start: f64,
    pub x_end: f64,
    pub surface_height: f64,
    pub material_gain: f64,
}

/// Contiguous surface segments; every internal boundary is an edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub segments: Vec<Segment>,
}

impl Scene {
    pub fn flat(x_start: f64, x_end: f64, gain: f64) -> Self {
        Scene { segments: vec![Segment { x_start, x_end, surface_height: 0.0, material_gain: gain }] }
    }

    /// Ground up to `x_edge`, then a raised platform of `platform_height`.
    pub fn height_edge(x_start: f64, x_edge: f64, x_end: f64, platform_height: f64, gain: f64) -> Self {
        Scene {
            segments: vec![
                Segment { x_start, x_end: x_edge, surface_height: 0.0, material_gain: gain },
                Segment { x_start: x_edge, x_end, surface_height: platform_height, material_gain: gain },
            ],
        }
    }

    /// Two materials at the same height meeting at `x_edge`.
    pub fn material_edge(x_start: f64, x_edge: f64, x_end: f64, gain_a: f64, gain_b: f64) -> Self {
        Scene {
            segments: vec![
                Segment { x_start, x_end: x_edge, surface_height: 0.0, material_gain: gain_a },
                Segment { x_start: x_edge, x_end, surface_height: 0.0, material_gain: gain_b },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::validation("scene has no segments"));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.x_end > s.x_start) || !s.surface_height.is_finite() {
                return Err(Error::validation(format!("segment {i} has an empty or invalid span")));
            }
            if !(s.material_gain >= 0.0 && s.material_gain.is_finite()) {
                return Err(Error::validation(format!("segment {i} material_gain must be >= 0")));
            }
        }
        for (i, w) in self.segments.windows(2).enumerate() {
            if (w[0].x_end - w[1].x_start).abs() > 1e-9 {
                return Err(Error::validation(format!("segments {i} and {} are not contiguous", i + 1)));
            }
        }
        Ok(())
    }

    pub fn segment_at(&self, x: f64) -> Option<&Segment> {
        let last = self.segments.len().checked_sub(1)?;
        self.segments
            .iter()
            .enumerate()
            .find(|(i, s)| x >= s.x_start && (x < s.x_end || (*i == last && x <= s.x_end)))
            .map(|(_, s)| s)
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.segments[0].x_start, self.segments[self.segments.len() - 1].x_end)
    }

    pub fn max_surface_height(&self) -> f64 {
        self.segments.iter().map(|s| s.surface_height).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Internal boundaries with the kind of discontinuity they represent.
    pub fn boundaries(&self) -> Vec<(f64, EdgeKind)> {
        self.segments
            .windows(2)
            .map(|w| {
                let kind = if w[0].surface_height != w[1].surface_height {
                    EdgeKind::Height
                } else {
                    EdgeKind::Material
                };
                (w[1].x_start, kind)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundEffectKind {
    None,
    CheesemanBennett,
}

/// In-ground-effect disturbance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundEffectModel {
    pub kind: GroundEffectKind,
    /// Per-axis std (N) of the band-limited jitter at height `prop_radius`
    /// over a gain-1 surface; it scales with the mean lift excess.
    pub jitter_std: f64,
    /// Jitter pass band, Hz.
    pub jitter_band: [f64; 2],
    /// Body-frame application point of the disturbance, m.
    pub r_offset: [f64; 3],
}

impl Default for GroundEffectModel {
    fn default() -> Self {
        Self {
            kind: GroundEffectKind::CheesemanBennett,
            jitter_std: 0.25,
            jitter_band: [6.0, 8.0],
            r_offset: [0.01, 0.0, 0.0],
        }
    }
}

impl GroundEffectModel {
    pub fn none() -> Self {
        Self { kind: GroundEffectKind::None, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::validation("jitter_std must be >= 0"));
        }
        let [lo, hi] = self.jitter_band;
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::validation("jitter_band must satisfy 0 < lo < hi"));
        }
        Ok(())
    }
}

/// Fractional thrust excess in ground effect, `1/(1 − (R/4z)²) − 1`, with
/// `z` clamped to at least `R/2`.
pub fn ge_excess(z: f64, prop_radius: f64) -> f64 {
    let z = z.max(prop_radius / 2.0);
    let ratio = prop_radius / (4.0 * z);
    1.0 / (1.0 - ratio * ratio) - 1.0
}

/// Disturbance force (world frame) and torque (body frame) from ground effect.
///
/// `jitter_unit` is a unit-variance band-limited noise sample per axis; pass
/// zeros for the deterministic mean lift only.
pub fn ground_effect(
    state: &QuadrotorState,
    scene: &Scene,
    thrust: f64,
    model: &GroundEffectModel,
    params: &DroneParams,
    jitter_unit: &Vector3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    if model.kind == GroundEffectKind::None {
        return Ok((Vector3::zeros(), Vector3::zeros()));
    }
    let seg = scene.segment_at(state.p.x).ok_or_else(|| Error::SimulationFault {
        t: f64::NAN,
        message: format!("x = {:.3} m is outside the scene", state.p.x),
    })?;
    let z = state.p.z - seg.surface_height;
    if z <= 0.0 {
        return Err(Error::SimulationFault { t: f64::NAN, message: format!("below surface (z = {z:.4} m)") });
    }
    let excess = ge_excess(z, params.prop_radius);
    let lift = thrust * excess * seg.material_gain;
    let jitter_scale = model.jitter_std * seg.material_gain * excess / ge_excess(params.prop_radius, params.prop_radius);
    let f_w = Vector3::new(0.0, 0.0, lift) + jitter_unit * jitter_scale;
    let r_offset = Vector3::from(model.r_offset);
    let tau_w = r_offset.cross(&(state.r.transpose() * f_w));
    Ok((f_w, tau_w))
}

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    /// Band-pass with unit peak gain centred on the geometric mean of the band.
    fn band_pass(lo: f64, hi: f64, f_s: f64) -> Self {
        let f0 = (lo * hi).sqrt();
        let q = f0 / (hi - lo);
        let w0 = 2.0 * std::f64::consts::PI * f0 / f_s;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

/// Three independent channels of white noise shaped by a second-order
/// band-pass and scaled to unit stationary variance.
#[derive(Debug, Clone)]
pub struct BandPassNoise {
    filters: [Biquad; 3],
    gain: f64,
}

impl BandPassNoise {
    pub fn new<R: Rng>(band: [f64; 2], f_s: f64, rng: &mut R) -> Self {
        let proto = Biquad::band_pass(band[0], band[1], f_s);
        // Output variance for unit white input is the impulse-response energy.
        let mut probe = proto;
        let mut energy = 0.0;
        for k in 0..(20.0 * f_s) as usize {
            let y = probe.process(if k == 0 { 1.0 } else { 0.0 });
            energy += y * y;
        }
        let mut noise = BandPassNoise { filters: [proto; 3], gain: 1.0 / energy.sqrt() };
        // Reach steady state before the first sample is used.
        for _ in 0..(2.0 * f_s) as usize {
            noise.sample(rng);
        }
        noise
    }

    pub fn sample<R: Rng>(&mut self, rng: &mut R) -> Vector3<f64> {
        let g = self.gain;
        Vector3::from_fn(|i, _| {
            let w: f64 = rng.sample(StandardNormal);
            self.filters[i].process(w * g)
        })
    }
}
