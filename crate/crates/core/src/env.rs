//! Stabilization MDP: observation encoding, hover-centred action mapping,
//! control/physics stepping and episode end conditions.

use crate::dynamics::{self, MotorCommand, PhysicalParams, QuadState, SimFault};
use crate::reward::{self, ExplorationBound, RewardBreakdown, RewardConfig, RewardInput};
use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub const OBS_DIM: usize = 12;
pub const ACT_DIM: usize = 4;

/// Normalized (x, y, z, φ, θ, ψ, ẋ, ẏ, ż, p, q, r); every channel in [−1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

/// Affine scales applied channel-wise before clamping. Stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObsScales {
    pub position: [f64; 3],
    pub angle: f64,
    pub lin_vel: f64,
    pub ang_vel: f64,
}

impl Default for ObsScales {
    fn default() -> Self {
        // Horizontal radius and height of the widest initialization domain.
        Self { position: [2.0, 2.0, 2.0], angle: PI, lin_vel: 3.0, ang_vel: 10.0 }
    }
}

impl ObsScales {
    fn channel_scales(&self) -> [f64; OBS_DIM] {
        let [px, py, pz] = self.position;
        let (a, v, w) = (self.angle, self.lin_vel, self.ang_vel);
        [px, py, pz, a, a, a, v, v, v, w, w, w]
    }

    /// Raw channels in physical units, in observation order.
    pub fn raw(state: &QuadState) -> [f64; OBS_DIM] {
        let [roll, pitch, yaw] = state.euler();
        let (p, v, w) = (&state.position, &state.lin_vel, &state.ang_vel);
        [p.x, p.y, p.z, roll, pitch, yaw, v.x, v.y, v.z, w.x, w.y, w.z]
    }

    pub fn normalize(&self, state: &QuadState) -> Observation {
        self.normalize_raw(&Self::raw(state))
    }

    pub fn normalize_raw(&self, raw: &[f64; OBS_DIM]) -> Observation {
        let scales = self.channel_scales();
        Observation(std::array::from_fn(|i| (raw[i] / scales[i]).clamp(-1.0, 1.0)))
    }

    /// Inverse of [`normalize_raw`](Self::normalize_raw) for unclamped inputs.
    pub fn denormalize(&self, obs: &Observation) -> [f64; OBS_DIM] {
        let scales = self.channel_scales();
        std::array::from_fn(|i| obs.0[i] * scales[i])
    }
}

/// Limits on states accepted by [`QuadEnv::reset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResetLimits {
    pub max_horizontal_m: f64,
    pub max_height_m: f64,
    pub max_speed: f64,
    pub max_rate: f64,
}

impl Default for ResetLimits {
    fn default() -> Self {
        Self { max_horizontal_m: 10.0, max_height_m: 10.0, max_speed: 10.0, max_rate: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub physics_hz: u32,
    pub control_hz: u32,
    pub episode_length_s: f64,
    /// Fractional RPM swing around hover for a unit action.
    pub action_scale: f64,
    pub max_tilt_rad: f64,
    /// End the episode when the exploration cylinder is left. Evaluation turns this off.
    pub exploration_truncation: bool,
    pub obs_scales: ObsScales,
    pub reset_limits: ResetLimits,
    pub reward: RewardConfig,
    pub params: PhysicalParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            physics_hz: 240,
            control_hz: 30,
            episode_length_s: 5.0,
            action_scale: 0.05,
            max_tilt_rad: 40f64.to_radians(),
            exploration_truncation: true,
            obs_scales: ObsScales::default(),
            reset_limits: ResetLimits::default(),
            reward: RewardConfig::default(),
            params: PhysicalParams::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("physics rate {physics_hz} Hz is not a positive multiple of control rate {control_hz} Hz")]
    Rates { physics_hz: u32, control_hz: u32 },
    #[error("episode length must be positive, got {0} s")]
    EpisodeLength(f64),
    #[error("action scale must lie in (0, 1], got {0}")]
    ActionScale(f64),
    #[error("max tilt must lie in (0, π/2), got {0}")]
    MaxTilt(f64),
    #[error(transparent)]
    Params(#[from] dynamics::ParamsError),
    #[error(transparent)]
    Reward(#[from] reward::RewardConfigError),
    #[error("initial state rejected: {0}")]
    InvalidInitial(String),
    #[error("step called before reset or after the episode ended")]
    NotRunning,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.control_hz == 0 || self.physics_hz == 0 || !self.physics_hz.is_multiple_of(self.control_hz) {
            return Err(EnvError::Rates { physics_hz: self.physics_hz, control_hz: self.control_hz });
        }
        if !(self.episode_length_s.is_finite() && self.episode_length_s > 0.0) {
            return Err(EnvError::EpisodeLength(self.episode_length_s));
        }
        if !(self.action_scale > 0.0 && self.action_scale <= 1.0) {
            return Err(EnvError::ActionScale(self.action_scale));
        }
        if !(self.max_tilt_rad > 0.0 && self.max_tilt_rad < PI / 2.0) {
            return Err(EnvError::MaxTilt(self.max_tilt_rad));
        }
        self.params.validate()?;
        self.reward.validate()?;
        Ok(())
    }

    pub fn substeps(&self) -> u32 {
        self.physics_hz / self.control_hz
    }

    pub fn physics_dt(&self) -> f64 {
        1.0 / f64::from(self.physics_hz)
    }

    pub fn control_dt(&self) -> f64 {
        1.0 / f64::from(self.control_hz)
    }

    /// Control steps in an episode that runs to its time limit.
    pub fn max_steps(&self) -> u32 {
        (self.episode_length_s * f64::from(self.control_hz)).round() as u32
    }

    /// `RPM_i = RPM_hover · (1 + κ·a_i)`, with `a` clamped to [−1, 1] and the
    /// result clipped to the motor range.
    pub fn action_to_command(&self, action: &[f64; ACT_DIM]) -> MotorCommand {
        let hover = self.params.hover_rpm();
        MotorCommand {
            rpm: action.map(|a| {
                let a = if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) };
                hover * (1.0 + self.action_scale * a)
            }),
        }
        .clamped(self.params.max_rpm)
    }
}

/// Constant world-frame force applied over `[start_s, start_s + duration_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub start_s: f64,
    pub force: [f64; 3],
    pub duration_s: f64,
}

impl Disturbance {
    pub fn active_at(&self, t: f64) -> bool {
        t >= self.start_s && t < self.start_s + self.duration_s
    }
}

fn disturbance_force(disturbances: &[Disturbance], t: f64) -> Vector3<f64> {
    disturbances.iter().filter(|d| d.active_at(t)).fold(Vector3::zeros(), |acc, d| acc + Vector3::from(d.force))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationCause {
    /// |roll| or |pitch| beyond the tilt limit.
    Attitude,
    /// Reached z <= 0.
    Ground,
    /// Left the exploration cylinder.
    Exploration,
    /// The integrator produced a non-finite state.
    Fault,
}

impl TruncationCause {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Attitude => "attitude",
            Self::Ground => "ground",
            Self::Exploration => "exploration",
            Self::Fault => "fault",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub state: QuadState,
    pub step: u32,
    pub causes: Vec<TruncationCause>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: RewardBreakdown,
    /// Episode reached its time limit.
    pub terminated: bool,
    /// A safety bound was violated (see `info.causes`).
    pub truncated: bool,
    pub info: StepInfo,
}

impl StepResult {
    pub fn is_fault(&self) -> bool {
        self.info.causes.contains(&TruncationCause::Fault)
    }
}

#[derive(Debug, Clone)]
pub struct QuadEnv {
    cfg: EnvConfig,
    state: QuadState,
    bound: ExplorationBound,
    prev_omega: Vector3<f64>,
    steps: u32,
    running: bool,
}

impl QuadEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let state = QuadState::at_rest(Vector3::zeros());
        let bound = cfg.reward.exploration_bound(&state.position);
        Ok(Self { cfg, state, bound, prev_omega: Vector3::zeros(), steps: 0, running: false })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &QuadState {
        &self.state
    }

    pub fn exploration_bound(&self) -> &ExplorationBound {
        &self.bound
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    fn check_initial(&self, s: &QuadState) -> Result<(), EnvError> {
        let lim = &self.cfg.reset_limits;
        let reject = |msg: String| Err(EnvError::InvalidInitial(msg));
        if !s.is_finite() {
            return reject("non-finite component".into());
        }
        if (s.attitude.norm() - 1.0).abs() > 1e-6 {
            return reject("attitude quaternion is not unit".into());
        }
        if s.position.x.hypot(s.position.y) > lim.max_horizontal_m {
            return reject(format!("horizontal offset beyond {} m", lim.max_horizontal_m));
        }
        if s.position.z < 0.0 || s.position.z > lim.max_height_m {
            return reject(format!("height {} outside [0, {}]", s.position.z, lim.max_height_m));
        }
        if s.lin_vel.amax() > lim.max_speed || s.ang_vel.amax() > lim.max_rate {
            return reject("velocity beyond reset limits".into());
        }
        let [roll, pitch, _] = s.euler();
        if roll.abs() > self.cfg.max_tilt_rad || pitch.abs() > self.cfg.max_tilt_rad {
            return reject("initial tilt beyond the truncation limit".into());
        }
        if s.rpm.iter().any(|r| *r < 0.0 || *r > self.cfg.params.max_rpm) {
            return reject("rpm outside motor range".into());
        }
        Ok(())
    }

    /// Starts an episode from `initial`. The clock restarts at zero and the
    /// rotors are set to hover speed.
    pub fn reset(&mut self, initial: QuadState) -> Result<Observation, EnvError> {
        self.check_initial(&initial)?;
        let mut state = initial;
        state.time_s = 0.0;
        state.rpm = Vector4::repeat(self.cfg.params.hover_rpm());
        self.state = state;
        self.bound = self.cfg.reward.exploration_bound(&state.position);
        self.prev_omega = state.ang_vel;
        self.steps = 0;
        self.running = true;
        Ok(self.observe())
    }

    pub fn observe(&self) -> Observation {
        self.cfg.obs_scales.normalize(&self.state)
    }

    pub fn step(&mut self, action: &[f64; ACT_DIM]) -> Result<StepResult, EnvError> {
        self.step_with_disturbances(action, &[])
    }

    /// One control step; disturbances are evaluated on every physics substep
    /// using episode time.
    pub fn step_with_disturbances(
        &mut self,
        action: &[f64; ACT_DIM],
        disturbances: &[Disturbance],
    ) -> Result<StepResult, EnvError> {
        if !self.running {
            return Err(EnvError::NotRunning);
        }
        let cmd = self.cfg.action_to_command(action);
        let dt = self.cfg.physics_dt();
        let mut fault: Option<SimFault> = None;
        for _ in 0..self.cfg.substeps() {
            let force = disturbance_force(disturbances, self.state.time_s);
            match dynamics::step_with_force(&self.state, &cmd, &self.cfg.params, dt, &force) {
                Ok(next) => self.state = next,
                Err(e) => {
                    fault = Some(e);
                    break;
                }
            }
        }
        self.steps += 1;

        let euler = self.state.euler();
        let target = self.cfg.reward.target();
        let input = RewardInput {
            position: self.state.position,
            euler,
            omega_prev: self.prev_omega,
            omega_curr: self.state.ang_vel,
        };
        let reward = reward::evaluate(&input, &self.bound, &self.cfg.reward);
        self.prev_omega = self.state.ang_vel;

        let mut causes = Vec::new();
        if fault.is_some() {
            causes.push(TruncationCause::Fault);
        }
        if euler[0].abs() > self.cfg.max_tilt_rad || euler[1].abs() > self.cfg.max_tilt_rad {
            causes.push(TruncationCause::Attitude);
        }
        if self.state.position.z <= 0.0 {
            causes.push(TruncationCause::Ground);
        }
        if self.cfg.exploration_truncation && self.bound.escaped(&self.state.position, &target) {
            causes.push(TruncationCause::Exploration);
        }
        let truncated = !causes.is_empty();
        let terminated = self.steps >= self.cfg.max_steps();
        if truncated || terminated {
            self.running = false;
        }
        Ok(StepResult {
            observation: self.observe(),
            reward,
            terminated,
            truncated,
            info: StepInfo { state: self.state, step: self.steps, causes },
        })
    }
}
