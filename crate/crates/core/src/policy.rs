//! A deployable policy: network parameters plus the observation
//! standardization they were trained behind, and the running statistics
//! behind both observation and return scaling.

use crate::env::{ACT_DIM, OBS_DIM};
use crate::nn::PolicyParams;
use serde::{Deserialize, Serialize};

const VAR_EPS: f64 = 1e-8;

fn merge(mean: &mut f64, var: &mut f64, count: f64, batch_mean: f64, batch_var: f64, n: f64) {
    let delta = batch_mean - *mean;
    let total = count + n;
    let m2 = *var * count + batch_var * n + delta * delta * count * n / total;
    *mean += delta * n / total;
    *var = m2 / total;
}

/// Streaming mean and variance, merged batch-wise (Chan et al.).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl Default for RunningStats {
    fn default() -> Self {
        Self { mean: 0.0, var: 1.0, count: 1e-4 }
    }
}

impl RunningStats {
    pub fn update(&mut self, batch: &[f64]) {
        if batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        let mean = batch.iter().sum::<f64>() / n;
        let var = batch.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        merge(&mut self.mean, &mut self.var, self.count, mean, var, n);
        self.count += n;
    }

    /// Multiplier that brings values to unit scale.
    pub fn inv_std(&self) -> f64 {
        1.0 / (self.var + VAR_EPS).sqrt()
    }
}

/// Per-channel standardization of observations, `clamp((x − μ) / σ, ±clip)`.
/// Training freezes it while a rollout is collected and folds the rollout's
/// observations in afterwards. Disabled, it passes observations through.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub enabled: bool,
    pub clip: f64,
    pub mean: [f64; OBS_DIM],
    pub var: [f64; OBS_DIM],
    pub count: f64,
}

impl Default for ObsNormalizer {
    fn default() -> Self {
        Self { enabled: true, clip: 10.0, mean: [0.0; OBS_DIM], var: [1.0; OBS_DIM], count: 1e-4 }
    }
}

impl ObsNormalizer {
    pub fn identity() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn apply(&self, obs: &[f64; OBS_DIM]) -> [f64; OBS_DIM] {
        if !self.enabled {
            return *obs;
        }
        std::array::from_fn(|i| ((obs[i] - self.mean[i]) / (self.var[i] + VAR_EPS).sqrt()).clamp(-self.clip, self.clip))
    }

    pub fn update(&mut self, batch: &[[f64; OBS_DIM]]) {
        if !self.enabled || batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        for i in 0..OBS_DIM {
            let mean = batch.iter().map(|o| o[i]).sum::<f64>() / n;
            let var = batch.iter().map(|o| (o[i] - mean).powi(2)).sum::<f64>() / n;
            merge(&mut self.mean[i], &mut self.var[i], self.count, mean, var, n);
        }
        self.count += n;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub params: PolicyParams,
    pub obs_norm: ObsNormalizer,
}

impl Policy {
    pub fn new(params: PolicyParams, obs_norm: ObsNormalizer) -> Self {
        Self { params, obs_norm }
    }

    /// Deterministic action (the actor mean) for an environment observation.
    pub fn act(&self, obs: &[f64; OBS_DIM]) -> [f64; ACT_DIM] {
        self.params.actor_mean(&self.obs_norm.apply(obs))
    }

    pub fn value(&self, obs: &[f64; OBS_DIM]) -> f64 {
        self.params.value(&self.obs_norm.apply(obs))
    }
}
