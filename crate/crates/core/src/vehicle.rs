//! Planar vehicle kinematics with analytic Jacobians for the adjoint pass.
//!
//! Two models: a Dubins vehicle (heading rate commanded directly) and a
//! fixed-velocity Ackermann/bicycle model (heading rate (v/l) tan u).
//! Integration is explicit Euler at fixed dt; heading is wrapped to
//! (-pi, pi] after each step and the wrap is treated as identity in the
//! Jacobians.

use crate::math::{wrap_angle, Mat3, Vec3};
use serde::{Deserialize, Serialize};

/// Steering clamp for the Ackermann model, keeping tan(u) finite.
const ACKERMANN_STEER_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    pub fn as_vec(&self) -> Vec3 {
        [self.x, self.y, self.heading]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsModel {
    Dubins,
    Ackermann,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DynamicsParams {
    /// Fixed forward speed, m/s.
    pub speed: f64,
    /// Wheelbase, meters (Ackermann only).
    pub wheelbase: f64,
    /// Integration step, seconds.
    pub dt: f64,
    pub model: DynamicsModel,
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.speed > 0.0) {
            return Err(format!("speed must be positive, got {}", self.speed));
        }
        if self.model == DynamicsModel::Ackermann && !(self.wheelbase > 0.0) {
            return Err(format!("wheelbase must be positive, got {}", self.wheelbase));
        }
        if !(self.dt > 0.0) {
            return Err(format!("dt must be positive, got {}", self.dt));
        }
        Ok(())
    }

    fn heading_rate(&self, u: f64) -> f64 {
        match self.model {
            DynamicsModel::Dubins => u,
            DynamicsModel::Ackermann => {
                let u = clamp_ackermann(u);
                self.speed / self.wheelbase * u.tan()
            }
        }
    }
}

fn clamp_ackermann(u: f64) -> f64 {
    let lim = std::f64::consts::FRAC_PI_2 - ACKERMANN_STEER_EPS;
    u.clamp(-lim, lim)
}

/// One explicit Euler step of the chosen kinematic model.
pub fn dynamics_step(state: &VehicleState, u: f64, params: &DynamicsParams) -> VehicleState {
    let (s, c) = state.heading.sin_cos();
    let v = params.speed;
    VehicleState {
        x: state.x + params.dt * v * c,
        y: state.y + params.dt * v * s,
        heading: wrap_angle(state.heading + params.dt * params.heading_rate(u)),
    }
}

/// Exact Jacobians of the Euler map: (df/dstate, df/du).
pub fn dynamics_jacobians(state: &VehicleState, u: f64, params: &DynamicsParams) -> (Mat3, Vec3) {
    let (s, c) = state.heading.sin_cos();
    let v = params.speed;
    let dt = params.dt;
    let a = [
        [1.0, 0.0, -dt * v * s],
        [0.0, 1.0, dt * v * c],
        [0.0, 0.0, 1.0],
    ];
    let du = match params.model {
        DynamicsModel::Dubins => dt,
        DynamicsModel::Ackermann => {
            let u = clamp_ackermann(u);
            let sec = 1.0 / u.cos();
            dt * params.speed / params.wheelbase * sec * sec
        }
    };
    (a, [0.0, 0.0, du])
}
