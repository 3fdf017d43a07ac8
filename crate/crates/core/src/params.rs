//! Physical parameters of the airframe shared by the simulator and the
//! disturbance estimator.

use nalgebra::{Matrix3, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid-body and rotor constants of a quadrotor.
///
/// Defaults describe a 35.6 g nano-quadrotor in "+" rotor layout. The rotor
/// actuation `u` is squared rotor speed; PWM commands map onto it through
/// [`DroneParams::pwm_to_actuation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DroneParams {
    /// kg
    pub mass: f64,
    /// m/s²
    pub g: f64,
    /// Thrust coefficient, N per unit actuation.
    pub k_t: f64,
    /// Rotor-arm length, m.
    pub arm_length: f64,
    /// Torque coefficient, N·m per unit actuation.
    pub c_q: f64,
    /// Inertia tensor, kg·m², row-major.
    pub inertia: [[f64; 3]; 3],
    /// Propeller radius, m.
    pub prop_radius: f64,
    /// Full-scale PWM command.
    pub pwm_max: f64,
    /// PWM fraction of full scale that holds hover; calibrates the PWM→actuation map.
    pub hover_pwm_fraction: f64,
}

impl Default for DroneParams {
    fn default() -> Self {
        let k_t = 2.88e-8;
        Self {
            mass: 0.0356,
            g: 9.81,
            k_t,
            arm_length: 0.046,
            c_q: 0.006 * k_t,
            inertia: [[1.657e-5, 0.0, 0.0], [0.0, 1.666e-5, 0.0], [0.0, 0.0, 2.926e-5]],
            prop_radius: 0.0225,
            pwm_max: 65535.0,
            hover_pwm_fraction: 0.6,
        }
    }
}

impl DroneParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("g", self.g),
            ("k_t", self.k_t),
            ("arm_length", self.arm_length),
            ("c_q", self.c_q),
            ("prop_radius", self.prop_radius),
            ("pwm_max", self.pwm_max),
            ("hover_pwm_fraction", self.hover_pwm_fraction),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("drone parameter {name} must be positive, got {v}")));
            }
        }
        if self.hover_pwm_fraction >= 1.0 {
            return Err(Error::validation("hover_pwm_fraction must be < 1"));
        }
        let j = self.inertia_matrix();
        if (j - j.transpose()).abs().max() > 1e-12 * j.abs().max() {
            return Err(Error::validation("inertia tensor must be symmetric"));
        }
        if j.cholesky().is_none() {
            return Err(Error::validation("inertia tensor must be positive definite"));
        }
        Ok(())
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        let j = &self.inertia;
        Matrix3::new(j[0][0], j[0][1], j[0][2], j[1][0], j[1][1], j[1][2], j[2][0], j[2][1], j[2][2])
    }

    /// Actuation produced by a full-scale PWM command.
    pub fn u_scale(&self) -> f64 {
        self.mass * self.g / (4.0 * self.k_t * self.hover_pwm_fraction.powi(2))
    }

    /// Per-rotor actuation that exactly balances gravity.
    pub fn hover_actuation(&self) -> f64 {
        self.mass * self.g / (4.0 * self.k_t)
    }

    /// Quadratic PWM→actuation map: `u = (pwm / pwm_max)² · u_scale`.
    pub fn pwm_to_actuation(&self, pwm: &[f64; 4]) -> [f64; 4] {
        let s = self.u_scale();
        pwm.map(|m| (m / self.pwm_max).powi(2) * s)
    }

    pub fn actuation_to_pwm(&self, u: &[f64; 4]) -> [f64; 4] {
        let s = self.u_scale();
        u.map(|ui| self.pwm_max * (ui.max(0.0) / s).sqrt())
    }

    /// Mixer matrix mapping actuation to the wrench `[Ψ, τx, τy, τz]`.
    pub fn mixer_matrix(&self) -> Matrix4<f64> {
        let kt = self.k_t;
        let kl = self.k_t * self.arm_length;
        let cq = self.c_q;
        #[rustfmt::skip]
        let h = Matrix4::new(
            kt,  kt,  kt,  kt,
            0.0, kl,  0.0, -kl,
            -kl, 0.0, kl,  0.0,
            -cq, cq,  -cq, cq,
        );
        h
    }

    /// Total rotor thrust for a PWM command (first row of the mixer).
    pub fn thrust_from_pwm(&self, pwm: &[f64; 4]) -> f64 {
        let u = Vector4::from(self.pwm_to_actuation(pwm));
        (self.mixer_matrix() * u)[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn defaults_validate() {
        DroneParams::default().validate().unwrap();
    }

    #[test]
    fn hover_pwm_balances_gravity() {
        let p = DroneParams::default();
        let h = p.hover_pwm_fraction * p.pwm_max;
        assert_relative_eq!(p.thrust_from_pwm(&[h; 4]), p.mass * p.g, max_relative = 1e-12);
    }

    #[test]
    fn pwm_map_round_trips() {
        let p = DroneParams::default();
        let u = [1.0e6, 2.5e6, 3.0e6, 4.2e6];
        let back = p.pwm_to_actuation(&p.actuation_to_pwm(&u));
        for (a, b) in u.iter().zip(back) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn rejects_asymmetric_inertia() {
        let mut p = DroneParams::default();
        p.inertia[0][1] = 1e-6;
        assert!(p.validate().is_err());
    }

    #[test]
    fn rejects_nonpositive_mass() {
        let p = DroneParams { mass: 0.0, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
