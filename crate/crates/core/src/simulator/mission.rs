use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    ground_effect, mixer, step_dynamics, BandPassNoise, CascadedController, ControllerConfig, GroundEffectModel,
    QuadrotorState, Scene, Setpoint,
};
use crate::error::{Error, Result};
use crate::params::DroneParams;
use crate::telemetry::{EdgeEvent, FlightMeta, FlightRecord, ImuSample, MotorSample};

/// External force applied on `[t_start, t_end)`, world frame, no torque.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceStep {
    pub t_start: f64,
    pub t_end: f64,
    pub force: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissionConfig {
    /// Horizontal speed along the flight line, m/s.
    pub speed: f64,
    /// Flight altitude above the highest surface in the scene, m.
    pub height: f64,
    /// Angle between the flight line and the edge normal (+x), degrees.
    pub approach_angle_deg: f64,
    pub duration: f64,
    pub x_start: f64,
    pub sim_dt: f64,
    pub sample_rate: f64,
    pub acc_noise_std: f64,
    pub gyro_noise_std: f64,
    pub ground_effect: GroundEffectModel,
    pub controller: ControllerConfig,
    pub injected: Vec<ForceStep>,
}

impl Default for MissionConfig {
    fn default() -> Self {
        Self {
            speed: 0.5,
            height: 0.04,
            approach_angle_deg: 0.0,
            duration: 9.0,
            x_start: 0.0,
            sim_dt: 1e-3,
            sample_rate: 100.0,
            acc_noise_std: 0.05,
            gyro_noise_std: 0.01,
            ground_effect: GroundEffectModel::default(),
            controller: ControllerConfig::default(),
            injected: Vec::new(),
        }
    }
}

impl MissionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::validation("mission speed must be > 0"));
        }
        if !(self.duration > 0.0 && self.sample_rate > 0.0) {
            return Err(Error::validation("duration and sample_rate must be > 0"));
        }
        if !(self.sim_dt > 0.0 && self.sim_dt <= 0.02) {
            return Err(Error::validation("sim_dt must lie in (0, 0.02]"));
        }
        let ratio = 1.0 / (self.sample_rate * self.sim_dt);
        if (ratio - ratio.round()).abs() > 1e-6 || ratio.round() < 1.0 {
            return Err(Error::validation("sample period must be an integer multiple of sim_dt"));
        }
        if self.acc_noise_std < 0.0 || self.gyro_noise_std < 0.0 {
            return Err(Error::validation("sensor noise std must be >= 0"));
        }
        self.ground_effect.validate()
    }
}

/// Flies a straight line over `scene` and records telemetry with ground truth.
///
/// The run is a pure function of its arguments: the jitter and sensor noise
/// use separate ChaCha streams derived from `seed`.
pub fn fly_mission(scene: &Scene, params: &DroneParams, cfg: &MissionConfig, seed: u64) -> Result<FlightRecord> {
    scene.validate()?;
    params.validate()?;
    cfg.validate()?;
    let z_min = params.prop_radius / 2.0;
    if cfg.height <= z_min {
        return Err(Error::validation(format!("height must exceed {z_min} m")));
    }

    let mut jitter_rng = ChaCha8Rng::seed_from_u64(seed);
    jitter_rng.set_stream(1);
    let mut sensor_rng = ChaCha8Rng::seed_from_u64(seed);
    sensor_rng.set_stream(2);

    let dt = cfg.sim_dt;
    let decimation = (1.0 / (cfg.sample_rate * dt)).round() as usize;
    let n_samples = (cfg.duration * cfg.sample_rate).round() as usize;
    let heading = cfg.approach_angle_deg.to_radians();
    let altitude = scene.max_surface_height() + cfg.height;
    let origin = Vector3::new(cfg.x_start, 0.0, altitude);
    let setpoint = Setpoint { origin, heading, speed: cfg.speed, altitude };

    let mut state = QuadrotorState::at_rest(origin);
    state.v = Vector3::new(heading.cos(), heading.sin(), 0.0) * cfg.speed;
    let mut controller = CascadedController::new(cfg.controller.clone(), params);
    let mut noise = BandPassNoise::new(cfg.ground_effect.jitter_band, 1.0 / dt, &mut jitter_rng);

    let boundaries = scene.boundaries();
    let mut imu = Vec::with_capacity(n_samples);
    let mut motors = Vec::with_capacity(n_samples);
    let mut ground_truth = Vec::new();

    for k in 0..n_samples * decimation {
        let t = k as f64 * dt;
        let fault = |e: Error| match e {
            Error::SimulationFault { message, .. } => Error::SimulationFault { t, message },
            other => other,
        };
        let u = controller.update(&state, &setpoint, params, dt);
        let thrust = mixer(&u, params)[0];
        let jitter = noise.sample(&mut jitter_rng);
        let (mut f_w, tau_w) = ground_effect(&state, scene, thrust, &cfg.ground_effect, params, &jitter).map_err(fault)?;
        for step in &cfg.injected {
            if t >= step.t_start && t < step.t_end {
                f_w += Vector3::from(step.force);
            }
        }

        if k % decimation == 0 {
            let ts = (k / decimation) as f64 / cfg.sample_rate;
            let specific = (Vector3::new(0.0, 0.0, thrust) + state.r.transpose() * f_w) / params.mass;
            let mut gauss = |std: f64| -> f64 {
                if std > 0.0 {
                    std * sensor_rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                }
            };
            let acc = [0, 1, 2].map(|i| specific[i] + gauss(cfg.acc_noise_std));
            let gyro = [0, 1, 2].map(|i| state.omega[i] + gauss(cfg.gyro_noise_std));
            imu.push(ImuSample { t: ts, acc, gyro });
            let pwm = params.actuation_to_pwm(&u).map(|m| m.min(params.pwm_max));
            motors.push(MotorSample { t: ts, pwm });
        }

        let next = step_dynamics(&state, &u, &f_w, &tau_w, params, dt)?;
        for &(xb, kind) in &boundaries {
            let (x0, x1) = (state.p.x, next.p.x);
            if (x0 < xb && x1 >= xb) || (x0 > xb && x1 <= xb) {
                let tc = t + dt * (xb - x0) / (x1 - x0);
                ground_truth.push(EdgeEvent { t: tc, kind, position: cfg.speed * tc });
            }
        }
        let off_track = (next.p - origin).dot(&Vector3::new(-heading.sin(), heading.cos(), 0.0));
        if !next.p.iter().all(|x| x.is_finite()) || off_track.abs() > 2.0 || (next.p.z - altitude).abs() > 2.0 {
            return Err(Error::SimulationFault { t, message: "position diverged".into() });
        }
        if next.omega.norm() > 50.0 {
            return Err(Error::SimulationFault { t, message: "body rates diverged".into() });
        }
        state = next;
    }

    let t_last = imu.last().map(|s| s.t).unwrap_or(0.0);
    ground_truth.retain(|e| e.t <= t_last);
    Ok(FlightRecord { imu, motors, ground_truth, meta: FlightMeta { drone: params.clone(), speed: cfg.speed } })
}
