//! Rigid-body model of a Crazyflie 2.x in × configuration.
//!
//! Body frame is FLU (x forward, y left, z up); world frame is z-up. Motors are
//! laid out as
//!
//! ```text
//!        +x
//!   M4 (+l,+l)   M1 (+l,-l)
//!   M3 (-l,+l)   M2 (-l,-l)
//! ```
//!
//! with `l = arm_length / sqrt(2)`. M1 and M3 spin counter-clockwise, so their
//! reaction torque about +z is negative.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalParams {
    pub mass_kg: f64,
    pub arm_length_m: f64,
    pub propeller_radius_m: f64,
    /// Principal moments (I_xx, I_yy, I_zz) in kg·m².
    pub inertia_diag: [f64; 3],
    /// Thrust per squared rotor speed, N/RPM².
    pub thrust_coeff: f64,
    /// Reaction torque per squared rotor speed, N·m/RPM².
    pub torque_coeff: f64,
    pub max_rpm: f64,
    pub gravity: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            mass_kg: 0.027,
            arm_length_m: 39.73e-3,
            propeller_radius_m: 23.1348e-3,
            inertia_diag: [1.395e-5, 1.436e-5, 2.173e-5],
            thrust_coeff: 3.16e-10,
            torque_coeff: 7.94e-12,
            max_rpm: 21702.0,
            gravity: 9.8,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("physical parameter `{0}` must be finite and strictly positive")]
    NonPositive(&'static str),
    #[error("hover is unreachable: 4·kF·max_rpm² = {max_thrust} N <= weight {weight} N")]
    CannotHover { max_thrust: f64, weight: f64 },
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<(), ParamsError> {
        let named = [
            ("mass_kg", self.mass_kg),
            ("arm_length_m", self.arm_length_m),
            ("propeller_radius_m", self.propeller_radius_m),
            ("inertia_diag[0]", self.inertia_diag[0]),
            ("inertia_diag[1]", self.inertia_diag[1]),
            ("inertia_diag[2]", self.inertia_diag[2]),
            ("thrust_coeff", self.thrust_coeff),
            ("torque_coeff", self.torque_coeff),
            ("max_rpm", self.max_rpm),
            ("gravity", self.gravity),
        ];
        for (name, value) in named {
            if !(value.is_finite() && value > 0.0) {
                return Err(ParamsError::NonPositive(name));
            }
        }
        let max_thrust = 4.0 * self.thrust_coeff * self.max_rpm * self.max_rpm;
        let weight = self.mass_kg * self.gravity;
        if max_thrust <= weight {
            return Err(ParamsError::CannotHover { max_thrust, weight });
        }
        Ok(())
    }

    /// Rotor speed at which the four rotors together carry the weight.
    pub fn hover_rpm(&self) -> f64 {
        (self.mass_kg * self.gravity / (4.0 * self.thrust_coeff)).sqrt()
    }

    pub fn inertia(&self) -> Vector3<f64> {
        Vector3::from(self.inertia_diag)
    }

    /// Lever arm of each rotor along body x and y.
    pub fn rotor_offset(&self) -> f64 {
        self.arm_length_m / std::f64::consts::SQRT_2
    }
}

/// Rotor speeds M1..M4 in RPM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorCommand {
    pub rpm: [f64; 4],
}

impl MotorCommand {
    pub fn uniform(rpm: f64) -> Self {
        Self { rpm: [rpm; 4] }
    }

    /// Clamps every component into `[0, max_rpm]`; NaN becomes 0.
    pub fn clamped(self, max_rpm: f64) -> Self {
        Self { rpm: self.rpm.map(|r| if r.is_nan() { 0.0 } else { r.clamp(0.0, max_rpm) }) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    /// World frame, metres, z up.
    pub position: Vector3<f64>,
    /// Rotation taking body vectors into the world frame.
    pub attitude: UnitQuaternion<f64>,
    /// World frame, m/s.
    pub lin_vel: Vector3<f64>,
    /// Body frame, rad/s.
    pub ang_vel: Vector3<f64>,
    pub rpm: Vector4<f64>,
    pub time_s: f64,
}

impl QuadState {
    /// Level and at rest at `position`, rotors idle.
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self {
            position,
            attitude: UnitQuaternion::identity(),
            lin_vel: Vector3::zeros(),
            ang_vel: Vector3::zeros(),
            rpm: Vector4::zeros(),
            time_s: 0.0,
        }
    }

    /// (roll, pitch, yaw) of the current attitude.
    pub fn euler(&self) -> [f64; 3] {
        euler_from_quat(&self.attitude)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.attitude.coords.iter().all(|v| v.is_finite())
            && self.lin_vel.iter().all(|v| v.is_finite())
            && self.ang_vel.iter().all(|v| v.is_finite())
            && self.rpm.iter().all(|v| v.is_finite())
            && self.time_s.is_finite()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimFault {
    #[error("non-finite state at t = {time_s} s")]
    NonFinite { time_s: f64 },
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
}

/// Collective thrust (N, along body +z) and body torque (N·m).
pub fn motor_wrench(cmd: &MotorCommand, params: &PhysicalParams) -> (f64, Vector3<f64>) {
    let sq = cmd.rpm.map(|r| r * r);
    let f = sq.map(|s| params.thrust_coeff * s);
    let l = params.rotor_offset();
    let thrust = f[0] + f[1] + f[2] + f[3];
    let torque = Vector3::new(
        l * (-f[0] - f[1] + f[2] + f[3]),
        l * (-f[0] + f[1] + f[2] - f[3]),
        params.torque_coeff * (-sq[0] + sq[1] - sq[2] + sq[3]),
    );
    (thrust, torque)
}

/// Advances one physics step with no external force.
pub fn step(state: &QuadState, cmd: &MotorCommand, params: &PhysicalParams, dt: f64) -> Result<QuadState, SimFault> {
    step_with_force(state, cmd, params, dt, &Vector3::zeros())
}

/// Advances one physics step; `external_force` is a world-frame force in N.
///
/// Velocities are updated first, then position and attitude from the mean of
/// the old and new rates, which is exact under constant acceleration. The
/// gyroscopic term is evaluated at the midpoint rate, which keeps torque-free
/// rotational energy constant.
pub fn step_with_force(
    state: &QuadState,
    cmd: &MotorCommand,
    params: &PhysicalParams,
    dt: f64,
    external_force: &Vector3<f64>,
) -> Result<QuadState, SimFault> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SimFault::BadTimeStep(dt));
    }
    let cmd = cmd.clamped(params.max_rpm);
    let (thrust, torque) = motor_wrench(&cmd, params);

    let body_thrust = Vector3::new(0.0, 0.0, thrust);
    let accel =
        (state.attitude * body_thrust + external_force) / params.mass_kg - Vector3::new(0.0, 0.0, params.gravity);
    let lin_vel = state.lin_vel + accel * dt;

    let ang_vel = integrate_rates(&state.ang_vel, &torque, &params.inertia(), dt);

    // Positions and attitude advance with the step-averaged rates.
    let position = state.position + (state.lin_vel + lin_vel) * (0.5 * dt);
    let mid_rate = (state.ang_vel + ang_vel) * 0.5;
    let rotated = state.attitude * UnitQuaternion::from_scaled_axis(mid_rate * dt);
    let attitude = UnitQuaternion::new_normalize(rotated.into_inner());

    let next =
        QuadState { position, attitude, lin_vel, ang_vel, rpm: Vector4::from(cmd.rpm), time_s: state.time_s + dt };
    if next.is_finite() {
        Ok(next)
    } else {
        Err(SimFault::NonFinite { time_s: next.time_s })
    }
}

/// Implicit-midpoint update of Euler's rotation equations, solved by fixed
/// point iteration. Converges in a handful of sweeps at control-scale rates.
fn integrate_rates(omega: &Vector3<f64>, torque: &Vector3<f64>, inertia: &Vector3<f64>, dt: f64) -> Vector3<f64> {
    let inertia_m = Matrix3::from_diagonal(inertia);
    let rate = |w: &Vector3<f64>| {
        let gyro = w.cross(&(inertia_m * w));
        (torque - gyro).component_div(inertia)
    };
    let mut next = omega + rate(omega) * dt;
    for _ in 0..64 {
        let mid = (omega + next) * 0.5;
        let candidate = omega + rate(&mid) * dt;
        let delta = (candidate - next).amax();
        next = candidate;
        if delta.is_nan() || delta <= 1e-15 * (1.0 + next.amax()) {
            break;
        }
    }
    next
}

/// ZYX Euler angles (roll, pitch, yaw) of a unit quaternion.
///
/// Roll and yaw lie in (−π, π], pitch in [−π/2, π/2]. Within 1e-6 rad of
/// gimbal lock yaw is set to 0 and the whole heading goes into roll.
pub fn euler_from_quat(q: &UnitQuaternion<f64>) -> [f64; 3] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let sin_pitch = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0);
    let pitch = sin_pitch.asin();
    if FRAC_PI_2 - pitch.abs() < 1e-6 {
        // R = Rz(ψ)Ry(±π/2)Rx(φ) only fixes φ∓ψ; pick ψ = 0.
        let pitch = FRAC_PI_2.copysign(pitch);
        let r01 = 2.0 * (x * y - w * z);
        let r11 = 1.0 - 2.0 * (x * x + z * z);
        let roll = if pitch > 0.0 { r01.atan2(r11) } else { (-r01).atan2(r11) };
        return [wrap_angle(roll), pitch, 0.0];
    }
    let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
    let yaw = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
    [wrap_angle(roll), pitch, wrap_angle(yaw)]
}

/// Inverse of [`euler_from_quat`]: `Rz(yaw)·Ry(pitch)·Rx(roll)`.
pub fn quat_from_euler(roll: f64, pitch: f64, yaw: f64) -> UnitQuaternion<f64> {
    let (sr, cr) = (roll * 0.5).sin_cos();
    let (sp, cp) = (pitch * 0.5).sin_cos();
    let (sy, cy) = (yaw * 0.5).sin_cos();
    UnitQuaternion::new_normalize(Quaternion::new(
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ))
}

/// Maps an angle into (−π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}
