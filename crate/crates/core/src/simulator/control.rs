use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::QuadrotorState;
use crate::params::DroneParams;

/// Gains of the cascaded position → attitude controller.
///
/// Attitude gains are angular-acceleration gains (they are multiplied by the
/// inertia tensor), so they read as `ω_n²` and `2ζω_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub kp_z: f64,
    pub kd_z: f64,
    pub ki_z: f64,
    pub integral_limit: f64,
    /// Along-track velocity gain, 1/s.
    pub kv_xy: f64,
    /// Cross-track position gain, 1/s².
    pub kp_xy: f64,
    /// Along-track position gain against the moving reference, 1/s².
    pub kp_along: f64,
    pub kp_att: f64,
    pub kd_att: f64,
    pub max_tilt: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kp_z: 16.0,
            kd_z: 5.6,
            ki_z: 8.0,
            integral_limit: 0.5,
            kv_xy: 3.0,
            kp_xy: 4.0,
            kp_along: 1.0,
            kp_att: 900.0,
            kd_att: 42.0,
            max_tilt: 0.5,
        }
    }
}

/// Straight-line flight target: a reference line through `origin` along
/// `heading` (rad from +x), flown at `speed` and constant `altitude`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setpoint {
    pub origin: Vector3<f64>,
    pub heading: f64,
    pub speed: f64,
    pub altitude: f64,
}

/// PD attitude with P(D) position and PID altitude; output is per-rotor
/// actuation.
#[derive(Debug, Clone)]
pub struct CascadedController {
    cfg: ControllerConfig,
    z_integral: f64,
    along_ref: f64,
    mixer_inv: nalgebra::Matrix4<f64>,
    u_max: f64,
}

impl CascadedController {
    pub fn new(cfg: ControllerConfig, params: &DroneParams) -> Self {
        let mixer_inv = params.mixer_matrix().try_inverse().expect("mixer matrix is invertible");
        Self { cfg, z_integral: 0.0, along_ref: 0.0, mixer_inv, u_max: params.u_scale() }
    }

    pub fn update(&mut self, s: &QuadrotorState, sp: &Setpoint, params: &DroneParams, dt: f64) -> [f64; 4] {
        let c = &self.cfg;
        let dir = Vector3::new(sp.heading.cos(), sp.heading.sin(), 0.0);
        let normal = Vector3::new(-dir.y, dir.x, 0.0);

        let v_ref = dir * sp.speed;
        let cross = (s.p - sp.origin).dot(&normal);
        let along = (s.p - sp.origin).dot(&dir) - self.along_ref;
        self.along_ref += sp.speed * dt;
        let mut acc = (v_ref - Vector3::new(s.v.x, s.v.y, 0.0)) * c.kv_xy
            - normal * (c.kp_xy * cross)
            - dir * (c.kp_along * along);

        let ez = sp.altitude - s.p.z;
        self.z_integral = (self.z_integral + ez * dt).clamp(-c.integral_limit, c.integral_limit);
        acc.z = c.kp_z * ez - c.kd_z * s.v.z + c.ki_z * self.z_integral;

        let mut force = (acc + Vector3::new(0.0, 0.0, params.g)) * params.mass;
        force.z = force.z.max(1e-3 * params.mass * params.g);
        // Limit tilt of the commanded thrust axis.
        let horiz = (force.x * force.x + force.y * force.y).sqrt();
        let max_h = force.z * c.max_tilt.tan();
        if horiz > max_h {
            force.x *= max_h / horiz;
            force.y *= max_h / horiz;
        }

        let b3 = s.r.column(2).into_owned();
        let thrust = force.dot(&b3).max(0.0);

        let b3d = force.normalize();
        let b1c = Vector3::x();
        let b2d = b3d.cross(&b1c).normalize();
        let b1d = b2d.cross(&b3d);
        let rd = Matrix3::from_columns(&[b1d, b2d, b3d]);

        let e = rd.transpose() * s.r - s.r.transpose() * rd;
        let e_r = Vector3::new(e[(2, 1)], e[(0, 2)], e[(1, 0)]) * 0.5;
        let j = params.inertia_matrix();
        let tau = -(j * (e_r * c.kp_att + s.omega * c.kd_att)) + s.omega.cross(&(j * s.omega));

        let u = self.mixer_inv * Vector4::new(thrust, tau.x, tau.y, tau.z);
        [0, 1, 2, 3].map(|i| u[i].clamp(0.0, self.u_max))
    }
}
