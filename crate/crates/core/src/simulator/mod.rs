//! Quadrotor flight simulator used to synthesize telemetry.
//!
//! Rigid-body dynamics are integrated at 1 kHz with a semi-implicit Euler
//! scheme; a cascaded controller closes the loop and telemetry is decimated
//! to the configured sample rate.

mod control;
mod ground;
mod mission;

pub use control::{CascadedController, ControllerConfig, Setpoint};
pub use ground::{ground_effect, ge_excess, BandPassNoise, GroundEffectKind, GroundEffectModel, Scene, Segment};
pub use mission::{fly_mission, ForceStep, MissionConfig};

use nalgebra::{Matrix3, Rotation3, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::params::DroneParams;

/// Rigid-body state: world position/velocity, body-to-world attitude and body rates.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrotorState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub r: Matrix3<f64>,
    pub omega: Vector3<f64>,
}

impl QuadrotorState {
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self { p, v: Vector3::zeros(), r: Matrix3::identity(), omega: Vector3::zeros() }
    }

    fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).chain(self.r.iter()).chain(self.omega.iter()).all(|x| x.is_finite())
    }
}

/// Skew-symmetric matrix with `skew(a) * b == a × b`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Gram–Schmidt re-orthonormalization of a near-rotation matrix.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let x = r.column(0).normalize();
    let y = r.column(1) - x * x.dot(&r.column(1));
    let y = y.normalize();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

/// Wrench `[Ψ, τx, τy, τz]` produced by actuation `u`.
pub fn mixer(u: &[f64; 4], params: &DroneParams) -> [f64; 4] {
    let phi = params.mixer_matrix() * Vector4::from(*u);
    [phi[0], phi[1], phi[2], phi[3]]
}

/// World-frame acceleration for the given thrust and external force.
pub fn linear_acceleration(r: &Matrix3<f64>, thrust: f64, f_w: &Vector3<f64>, params: &DroneParams) -> Vector3<f64> {
    let gravity = Vector3::new(0.0, 0.0, -params.g);
    gravity + (r * Vector3::new(0.0, 0.0, thrust) + f_w) / params.mass
}

/// Advances the state by `dt` under actuation `u` and external wrench.
///
/// Body rates and velocity are updated first; attitude uses the new rates
/// through the exponential map and position the trapezoid of old and new
/// velocity, which is exact under constant acceleration.
pub fn step_dynamics(
    state: &QuadrotorState,
    u: &[f64; 4],
    f_w: &Vector3<f64>,
    tau_w: &Vector3<f64>,
    params: &DroneParams,
    dt: f64,
) -> Result<QuadrotorState> {
    if !(dt > 0.0 && dt <= 0.02) {
        return Err(Error::invalid(format!("dt must lie in (0, 0.02], got {dt}")));
    }
    if !state.is_finite()
        || !u.iter().all(|x| x.is_finite())
        || !f_w.iter().chain(tau_w.iter()).all(|x| x.is_finite())
    {
        return Err(Error::invalid("non-finite input to step_dynamics"));
    }
    let [thrust, tx, ty, tz] = mixer(u, params);
    let tau_u = Vector3::new(tx, ty, tz);
    let j = params.inertia_matrix();
    let j_inv = j.try_inverse().ok_or_else(|| Error::invalid("singular inertia"))?;

    let a = linear_acceleration(&state.r, thrust, f_w, params);
    let omega_dot = j_inv * ((j * state.omega).cross(&state.omega) + tau_u + tau_w);

    let omega = state.omega + omega_dot * dt;
    let v = state.v + a * dt;
    let p = state.p + (state.v + v) * (0.5 * dt);
    let r = orthonormalize(&(state.r * Rotation3::new(omega * dt).into_inner()));
    Ok(QuadrotorState { p, v, r, omega })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> DroneParams {
        DroneParams::default()
    }

    #[test]
    fn hover_is_equilibrium() {
        let p = params();
        let s0 = QuadrotorState::at_rest(Vector3::new(0.0, 0.0, 1.0));
        let u = [p.hover_actuation(); 4];
        let s1 = step_dynamics(&s0, &u, &Vector3::zeros(), &Vector3::zeros(), &p, 1e-3).unwrap();
        assert!((s1.p - s0.p).amax() <= 1e-12);
        assert!((s1.v - s0.v).amax() <= 1e-12);
        assert!(s1.omega.amax() <= 1e-12);
        assert!((s1.r - s0.r).amax() <= 1e-12);
    }

    #[test]
    fn zero_thrust_is_free_fall() {
        let p = params();
        let a = linear_acceleration(&Matrix3::identity(), 0.0, &Vector3::zeros(), &p);
        assert_eq!(a, Vector3::new(0.0, 0.0, -9.81));
        let s0 = QuadrotorState::at_rest(Vector3::zeros());
        let s1 = step_dynamics(&s0, &[0.0; 4], &Vector3::zeros(), &Vector3::zeros(), &p, 1e-3).unwrap();
        assert_eq!(s1.v, Vector3::new(0.0, 0.0, -9.81 * 1e-3));
    }

    #[test]
    fn vertical_disturbance_at_hover() {
        let p = params();
        let a = linear_acceleration(&Matrix3::identity(), p.mass * p.g, &Vector3::new(0.0, 0.0, 0.1), &p);
        assert_relative_eq!(a.z, 0.1 / 0.0356, max_relative = 1e-9);
        assert_relative_eq!(a.z, 2.809, epsilon = 5e-4);
    }

    #[test]
    fn free_fall_tracks_parabola() {
        let p = params();
        let dt = 1e-3;
        let mut s = QuadrotorState::at_rest(Vector3::zeros());
        for k in 1..=2000 {
            s = step_dynamics(&s, &[0.0; 4], &Vector3::zeros(), &Vector3::zeros(), &p, dt).unwrap();
            let t = k as f64 * dt;
            assert!((s.p.z + 0.5 * 9.81 * t * t).abs() <= 10.0 * dt * dt);
        }
    }

    #[test]
    fn rejects_bad_dt_and_nan() {
        let p = params();
        let s = QuadrotorState::at_rest(Vector3::zeros());
        assert!(step_dynamics(&s, &[0.0; 4], &Vector3::zeros(), &Vector3::zeros(), &p, 0.05).is_err());
        assert!(step_dynamics(&s, &[f64::NAN, 0.0, 0.0, 0.0], &Vector3::zeros(), &Vector3::zeros(), &p, 1e-3).is_err());
    }

    #[test]
    fn mixer_columns() {
        let p = params();
        let phi = mixer(&[1.0, 0.0, 0.0, 0.0], &p);
        assert_eq!(phi, [p.k_t, 0.0, -p.k_t * p.arm_length, -p.c_q]);
        let phi = mixer(&[2.0; 4], &p);
        assert_relative_eq!(phi[0], 4.0 * p.k_t * 2.0);
        assert_eq!(&phi[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mixer_matches_dense_matmul() {
        let p = params();
        let h = [
            [p.k_t, p.k_t, p.k_t, p.k_t],
            [0.0, p.k_t * p.arm_length, 0.0, -p.k_t * p.arm_length],
            [-p.k_t * p.arm_length, 0.0, p.k_t * p.arm_length, 0.0],
            [-p.c_q, p.c_q, -p.c_q, p.c_q],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let u: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..5e6));
            let got = mixer(&u, &p);
            for i in 0..4 {
                let want: f64 = (0..4).map(|k| h[i][k] * u[k]).sum();
                assert!((got[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn attitude_stays_orthonormal() {
        let p = params();
        let mut s = QuadrotorState::at_rest(Vector3::zeros());
        s.omega = Vector3::new(3.0, -2.0, 5.0);
        for _ in 0..100_000 {
            s = step_dynamics(&s, &[0.0; 4], &Vector3::zeros(), &Vector3::zeros(), &p, 1e-3).unwrap();
        }
        let err = (s.r.transpose() * s.r - Matrix3::identity()).amax();
        assert!(err <= 1e-6, "orthonormality error {err}");
        assert!((s.r.determinant() - 1.0).abs() <= 1e-6);
    }

    proptest! {
        #[test]
        fn mixer_is_linear(
            u1 in prop::array::uniform4(0.0..4e6f64),
            u2 in prop::array::uniform4(0.0..4e6f64),
            a in 0.0..3.0f64,
            b in 0.0..3.0f64,
        ) {
            let p = params();
            let combo: [f64; 4] = std::array::from_fn(|i| a * u1[i] + b * u2[i]);
            let lhs = mixer(&combo, &p);
            let (m1, m2) = (mixer(&u1, &p), mixer(&u2, &p));
            for i in 0..4 {
                let rhs = a * m1[i] + b * m2[i];
                prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            }
        }
    }
}
