//! Compounded stabilization reward.
//!
//! `R = bias − w_T·T_e − w_E·E + w_S·S − w_w·w_e` with default weights
//! (25, 20, 100, 20, 18). `T_e` penalizes distance and heading error, `E` is
//! the bounded-exploration term, `S` the stability bonus and `w_e` the change
//! in angular rate between control steps.

use crate::dynamics::wrap_angle;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Value of `E` when the exploration bound is violated.
pub const EXPLORATION_ESCAPED: f64 = 1.0;
/// Value of `E` inside the exploration bound.
pub const EXPLORATION_INSIDE: f64 = -0.2;
/// Value of `S` inside the tolerance sphere with small tilt.
pub const STABILITY_BONUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub bias: f64,
    pub target: f64,
    pub exploration: f64,
    pub stability: f64,
    pub navigation: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { bias: 25.0, target: 20.0, exploration: 100.0, stability: 20.0, navigation: 18.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub target_position: [f64; 3],
    pub target_yaw: f64,
    /// Slack added to the initial horizontal distance to form the exploration radius (m).
    pub delta_r: f64,
    /// Slack above the target height before exploration is penalized (m).
    pub delta_h: f64,
    /// Radius of the stability sphere around the target (m).
    pub delta_p: f64,
    /// Bound on roll² + pitch² for the stability bonus (rad²).
    pub delta_a: f64,
    pub weights: RewardWeights,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            target_position: [0.0, 0.0, 1.0],
            target_yaw: 0.0,
            delta_r: 0.5,
            delta_h: 0.5,
            delta_p: 0.10,
            delta_a: 0.05,
            weights: RewardWeights::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RewardConfigError {
    #[error("reward tolerance `{0}` must be finite and strictly positive")]
    Tolerance(&'static str),
    #[error("reward target must be finite")]
    Target,
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        for (name, v) in
            [("delta_r", self.delta_r), ("delta_h", self.delta_h), ("delta_p", self.delta_p), ("delta_a", self.delta_a)]
        {
            if !(v.is_finite() && v > 0.0) {
                return Err(RewardConfigError::Tolerance(name));
            }
        }
        if !self.target_position.iter().all(|v| v.is_finite()) || !self.target_yaw.is_finite() {
            return Err(RewardConfigError::Target);
        }
        Ok(())
    }

    pub fn target(&self) -> Vector3<f64> {
        Vector3::from(self.target_position)
    }

    /// Exploration cylinder for an episode starting at `initial`.
    pub fn exploration_bound(&self, initial: &Vector3<f64>) -> ExplorationBound {
        ExplorationBound {
            radius: horizontal_distance(initial, &self.target()) + self.delta_r,
            ceiling: self.target_position[2] + self.delta_h,
        }
    }
}

/// Per-episode exploration cylinder around the target axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationBound {
    pub radius: f64,
    pub ceiling: f64,
}

impl ExplorationBound {
    pub fn escaped(&self, current: &Vector3<f64>, target: &Vector3<f64>) -> bool {
        horizontal_distance(current, target) > self.radius || current.z > self.ceiling
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub target_penalty: f64,
    pub exploration: f64,
    pub stability: f64,
    pub navigation: f64,
    pub total: f64,
}

fn horizontal_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Euclidean distance to the target plus the wrapped heading error.
pub fn target_penalty(pos: &Vector3<f64>, yaw: f64, cfg: &RewardConfig) -> f64 {
    (cfg.target() - pos).norm() + wrap_angle(cfg.target_yaw - yaw).abs()
}

pub fn exploration_reward(current: &Vector3<f64>, initial: &Vector3<f64>, cfg: &RewardConfig) -> f64 {
    exploration_from_bound(current, &cfg.exploration_bound(initial), cfg)
}

pub fn exploration_from_bound(current: &Vector3<f64>, bound: &ExplorationBound, cfg: &RewardConfig) -> f64 {
    if bound.escaped(current, &cfg.target()) {
        EXPLORATION_ESCAPED
    } else {
        EXPLORATION_INSIDE
    }
}

pub fn stability_reward(current: &Vector3<f64>, roll: f64, pitch: f64, cfg: &RewardConfig) -> f64 {
    let tilt = roll * roll + pitch * pitch;
    if (current - cfg.target()).norm() < cfg.delta_p && tilt < cfg.delta_a {
        STABILITY_BONUS
    } else {
        -tilt
    }
}

pub fn navigation_penalty(omega_prev: &Vector3<f64>, omega_curr: &Vector3<f64>) -> f64 {
    (omega_prev - omega_curr).norm_squared()
}

pub fn total_reward(
    target_penalty: f64,
    exploration: f64,
    stability: f64,
    navigation: f64,
    weights: &RewardWeights,
) -> RewardBreakdown {
    let total = weights.bias - weights.target * target_penalty - weights.exploration * exploration
        + weights.stability * stability
        - weights.navigation * navigation;
    RewardBreakdown { target_penalty, exploration, stability, navigation, total }
}

impl RewardBreakdown {
    /// Largest per-step reward reachable under `weights`.
    pub fn upper_bound(weights: &RewardWeights) -> f64 {
        total_reward(0.0, EXPLORATION_INSIDE, STABILITY_BONUS, 0.0, weights).total
    }
}

/// Everything needed to score one control step.
#[derive(Debug, Clone, Copy)]
pub struct RewardInput {
    pub position: Vector3<f64>,
    pub euler: [f64; 3],
    pub omega_prev: Vector3<f64>,
    pub omega_curr: Vector3<f64>,
}

pub fn evaluate(input: &RewardInput, bound: &ExplorationBound, cfg: &RewardConfig) -> RewardBreakdown {
    let [roll, pitch, yaw] = input.euler;
    total_reward(
        target_penalty(&input.position, yaw, cfg),
        exploration_from_bound(&input.position, bound, cfg),
        stability_reward(&input.position, roll, pitch, cfg),
        navigation_penalty(&input.omega_prev, &input.omega_curr),
        &cfg.weights,
    )
}
