//! PPO trainer: vectorized rollout collection, GAE, clipped-surrogate updates
//! and episode-return (ECR) telemetry.

use crate::env::{EnvError, ACT_DIM, OBS_DIM};
use crate::exec::{self, Execution};
use crate::nn::{self, Adam, Batch, LossCoeffs, LossTerms, PolicyParams, PARAM_COUNT};
use crate::policy::{ObsNormalizer, Policy, RunningStats};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub n_envs: usize,
    pub rollout_steps_per_env: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub normalize_advantages: bool,
    /// Scale rewards seen by the learner by a running estimate of the
    /// discounted-return standard deviation. ECR logs stay in raw units.
    pub normalize_rewards: bool,
    /// Bound on scaled rewards when `normalize_rewards` is on.
    pub reward_clip: f64,
    /// Standardize observations with running per-channel statistics.
    pub normalize_observations: bool,
    pub obs_clip: f64,
    /// Treat safety truncations like time limits (bootstrap with V(s')).
    pub bootstrap_safety_truncation: bool,
    pub checkpoint_every: u64,
    /// Write elapsed wall time into ECR records; off for byte-reproducible logs.
    pub record_wall_clock: bool,
    pub execution: Execution,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            n_envs: 4,
            rollout_steps_per_env: 2048,
            batch_size: 128,
            epochs: 10,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            learning_rate: 3e-4,
            adam_eps: 1e-5,
            normalize_advantages: true,
            normalize_rewards: true,
            reward_clip: 10.0,
            normalize_observations: true,
            obs_clip: 10.0,
            bootstrap_safety_truncation: false,
            checkpoint_every: 500_000,
            record_wall_clock: true,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid PPO config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("training diverged at global step {global_step}: {what}")]
    Diverged { global_step: u64, what: String },
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.n_envs == 0 || self.rollout_steps_per_env == 0 || self.batch_size == 0 {
            return bad("n_envs, rollout_steps_per_env and batch_size must be positive");
        }
        if !(self.n_envs * self.rollout_steps_per_env).is_multiple_of(self.batch_size) {
            return bad("batch_size must divide n_envs * rollout_steps_per_env");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if self.reward_clip.is_nan() || self.reward_clip <= 0.0 {
            return bad("reward_clip must be positive");
        }
        if !(self.obs_clip > 0.0 && self.obs_clip.is_finite()) {
            return bad("obs_clip must be positive and finite");
        }
        if !(self.learning_rate >= 0.0 && self.max_grad_norm > 0.0 && self.adam_eps > 0.0) {
            return bad("learning_rate must be >= 0, max_grad_norm and adam_eps > 0");
        }
        Ok(())
    }

    pub fn steps_per_iteration(&self) -> u64 {
        (self.n_envs * self.rollout_steps_per_env) as u64
    }

    pub fn loss_coeffs(&self) -> LossCoeffs {
        LossCoeffs { clip_eps: self.clip_eps, policy: 1.0, value: self.value_coef, entropy: self.entropy_coef }
    }

    pub fn new_optimizer(&self) -> Adam {
        let mut adam = Adam::new(PARAM_COUNT, self.learning_rate);
        adam.eps = self.adam_eps;
        adam
    }
}

/// How an environment step ended the episode, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeEnd {
    Running,
    TimeLimit,
    Truncated,
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub reward: f64,
    pub end: EpisodeEnd,
}

/// Episodic environment driven by the trainer. `reset` draws its own initial
/// condition from `rng`.
pub trait Environment: Send {
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<[f64; OBS_DIM], EnvError>;
    fn step(&mut self, action: &[f64; ACT_DIM]) -> Result<Transition, EnvError>;
}

/// One finished training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcrRecord {
    pub global_step: u64,
    pub stage_id: String,
    pub episode_return: f64,
    pub episode_length: u32,
    pub wall_ms: u64,
}

/// Rollout storage indexed `[step * n_envs + env]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub steps: usize,
    pub obs: Vec<[f64; OBS_DIM]>,
    /// Unclamped policy samples; the env received their clamped version.
    pub actions: Vec<[f64; ACT_DIM]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Episode ended after this step.
    pub dones: Vec<bool>,
    /// V(s_{t+1}) used at episode ends; 0 when the end is terminal.
    pub boundary_values: Vec<f64>,
    /// V of each env's observation after the last step.
    pub last_values: Vec<f64>,
    /// GAE sees `clamp(reward · reward_scale, ±reward_clip)`.
    pub reward_scale: f64,
    pub reward_clip: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn env_series(&self, v: &[f64], env: usize) -> Vec<f64> {
        (0..self.steps).map(|t| v[t * self.n_envs + env]).collect()
    }

    /// Fills `advantages` and `returns` with GAE(γ, λ).
    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) {
        let n = self.len();
        self.advantages = vec![0.0; n];
        for e in 0..self.n_envs {
            let rewards: Vec<f64> = self
                .env_series(&self.rewards, e)
                .into_iter()
                .map(|r| (r * self.reward_scale).clamp(-self.reward_clip, self.reward_clip))
                .collect();
            let values = self.env_series(&self.values, e);
            let boundary = self.env_series(&self.boundary_values, e);
            let dones: Vec<bool> = (0..self.steps).map(|t| self.dones[t * self.n_envs + e]).collect();
            let adv = gae(&rewards, &values, &dones, &boundary, self.last_values[e], gamma, lambda);
            for (t, a) in adv.into_iter().enumerate() {
                self.advantages[t * self.n_envs + e] = a;
            }
        }
        self.returns = self.advantages.iter().zip(&self.values).map(|(a, v)| a + v).collect();
    }
}

/// GAE over one environment's consecutive steps.
///
/// `dones[t]` marks an episode ending after step `t`; the successor value is
/// then `boundary_values[t]` (the critic's value of the final observation for
/// bootstrapped ends, 0 for terminal ones) and the recursion is cut.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    boundary_values: &[f64],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if dones[t] {
            (boundary_values[t], 0.0)
        } else if t + 1 == n {
            (last_value, 0.0)
        } else {
            (values[t + 1], next_adv)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        adv[t] = delta + gamma * lambda * carry;
        next_adv = adv[t];
    }
    adv
}

/// Zero-mean, unit-variance (sample std) advantages, guarded for tiny spread.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len();
    if n < 2 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

struct Worker<E> {
    env: E,
    rng: ChaCha8Rng,
    obs: [f64; OBS_DIM],
    episode_return: f64,
    episode_length: u32,
    /// Discounted return since the episode started, for reward scaling.
    discounted: f64,
}

/// What one env produced during a rollout.
struct WorkerRollout {
    /// Environment observations before standardization.
    raw_obs: Vec<[f64; OBS_DIM]>,
    /// What the networks saw.
    obs: Vec<[f64; OBS_DIM]>,
    actions: Vec<[f64; ACT_DIM]>,
    log_probs: Vec<f64>,
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    boundary_values: Vec<f64>,
    last_value: f64,
    discounted: Vec<f64>,
    /// (step index, return, length)
    episodes: Vec<(usize, f64, u32)>,
}

impl<E: Environment> Worker<E> {
    fn rollout(
        &mut self,
        params: &PolicyParams,
        norm: &ObsNormalizer,
        steps: usize,
        bootstrap_safety: bool,
        gamma: f64,
    ) -> Result<WorkerRollout, EnvError> {
        let log_std = params.log_std();
        let mut r = WorkerRollout {
            raw_obs: Vec::with_capacity(steps),
            obs: Vec::with_capacity(steps),
            actions: Vec::with_capacity(steps),
            log_probs: Vec::with_capacity(steps),
            rewards: Vec::with_capacity(steps),
            values: Vec::with_capacity(steps),
            dones: Vec::with_capacity(steps),
            boundary_values: Vec::with_capacity(steps),
            last_value: 0.0,
            discounted: Vec::with_capacity(steps),
            episodes: Vec::new(),
        };
        for t in 0..steps {
            let obs = norm.apply(&self.obs);
            let mean = params.actor_mean(&obs);
            let value = params.value(&obs);
            let action = nn::sample(&mean, &log_std, &mut self.rng);
            let log_prob = nn::log_prob(&mean, &log_std, &action);
            let tr = self.env.step(&nn::clamp_action(&action))?;
            self.episode_return += tr.reward;
            self.episode_length += 1;
            self.discounted = self.discounted * gamma + tr.reward;
            r.discounted.push(self.discounted);
            let boundary = match tr.end {
                EpisodeEnd::Running => 0.0,
                EpisodeEnd::TimeLimit => params.value(&norm.apply(&tr.obs)),
                EpisodeEnd::Truncated if bootstrap_safety => params.value(&norm.apply(&tr.obs)),
                EpisodeEnd::Truncated | EpisodeEnd::Fault => 0.0,
            };
            let done = tr.end != EpisodeEnd::Running;
            r.raw_obs.push(self.obs);
            r.obs.push(obs);
            r.actions.push(action);
            r.log_probs.push(log_prob);
            r.rewards.push(tr.reward);
            r.values.push(value);
            r.dones.push(done);
            r.boundary_values.push(boundary);
            if done {
                // Faulted episodes stay in the buffer but not in ECR statistics.
                if tr.end != EpisodeEnd::Fault {
                    r.episodes.push((t, self.episode_return, self.episode_length));
                }
                self.episode_return = 0.0;
                self.episode_length = 0;
                self.discounted = 0.0;
                self.obs = self.env.reset(&mut self.rng)?;
            } else {
                self.obs = tr.obs;
            }
        }
        r.last_value = params.value(&norm.apply(&self.obs));
        Ok(r)
    }
}

/// Optional hooks into a training run.
pub trait TrainObserver {
    fn on_episode(&mut self, _record: &EcrRecord) {}
    fn on_update(&mut self, _global_step: u64, _stats: &UpdateStats) {}
    fn on_checkpoint(&mut self, _snapshot: &PolicySnapshot) {}
}

/// Observer that ignores everything.
pub struct NoObserver;
impl TrainObserver for NoObserver {}

/// Trainer state that survives between stages.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub params: PolicyParams,
    pub adam: Adam,
    pub global_step: u64,
    pub return_stats: RunningStats,
    pub obs_norm: ObsNormalizer,
}

impl PolicySnapshot {
    pub fn fresh(params: PolicyParams, adam: Adam) -> Self {
        Self { params, adam, global_step: 0, return_stats: RunningStats::default(), obs_norm: ObsNormalizer::default() }
    }

    pub fn policy(&self) -> Policy {
        Policy::new(self.params.clone(), self.obs_norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Plateau,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub snapshot: PolicySnapshot,
    pub ecr: Vec<EcrRecord>,
    pub stop: StopReason,
    pub updates: Vec<UpdateStats>,
}

pub struct Trainer<E> {
    cfg: PpoConfig,
    workers: Vec<Worker<E>>,
    params: PolicyParams,
    adam: Adam,
    rng: ChaCha8Rng,
    global_step: u64,
    stage_label: String,
    started: Instant,
    return_stats: RunningStats,
    obs_norm: ObsNormalizer,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<E: Environment> Trainer<E> {
    /// Resets every env with its own generator; stream 0 of `seed` drives
    /// minibatch shuffling, stream `i + 1` env `i`.
    pub fn new(
        cfg: PpoConfig,
        envs: Vec<E>,
        start: PolicySnapshot,
        seed: u64,
        stage_label: impl Into<String>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if envs.len() != cfg.n_envs {
            return Err(TrainError::Config(format!("expected {} envs, got {}", cfg.n_envs, envs.len())));
        }
        let mut workers = Vec::with_capacity(envs.len());
        for (i, mut env) in envs.into_iter().enumerate() {
            let mut rng = stream_rng(seed, i as u64 + 1);
            let obs = env.reset(&mut rng)?;
            workers.push(Worker { env, rng, obs, episode_return: 0.0, episode_length: 0, discounted: 0.0 });
        }
        let mut adam = start.adam;
        adam.lr = cfg.learning_rate;
        adam.eps = cfg.adam_eps;
        let obs_norm = ObsNormalizer { enabled: cfg.normalize_observations, clip: cfg.obs_clip, ..start.obs_norm };
        Ok(Self {
            cfg,
            workers,
            params: start.params,
            adam,
            rng: stream_rng(seed, 0),
            global_step: start.global_step,
            stage_label: stage_label.into(),
            started: Instant::now(),
            return_stats: start.return_stats,
            obs_norm,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            params: self.params.clone(),
            adam: self.adam.clone(),
            global_step: self.global_step,
            return_stats: self.return_stats,
            obs_norm: self.obs_norm,
        }
    }

    /// Runs every env for `rollout_steps_per_env` steps under the current
    /// policy. The policy is frozen during collection, so envs advance
    /// independently and are interleaved afterwards in lock-step order.
    pub fn collect_rollouts(&mut self) -> Result<(RolloutBuffer, Vec<EcrRecord>), TrainError> {
        let steps = self.cfg.rollout_steps_per_env;
        let n_envs = self.cfg.n_envs;
        let params = &self.params;
        let norm = &self.obs_norm;
        let bootstrap = self.cfg.bootstrap_safety_truncation;
        let gamma = self.cfg.gamma;
        let results =
            exec::map_mut(self.cfg.execution, &mut self.workers, |w| w.rollout(params, norm, steps, bootstrap, gamma));
        let rollouts = results.into_iter().collect::<Result<Vec<_>, _>>()?;

        let n = steps * n_envs;
        let mut buf = RolloutBuffer {
            n_envs,
            steps,
            obs: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            boundary_values: Vec::with_capacity(n),
            last_values: rollouts.iter().map(|r| r.last_value).collect(),
            reward_scale: 1.0,
            reward_clip: f64::INFINITY,
            advantages: Vec::new(),
            returns: Vec::new(),
        };
        for t in 0..steps {
            for r in &rollouts {
                buf.obs.push(r.obs[t]);
                buf.actions.push(r.actions[t]);
                buf.log_probs.push(r.log_probs[t]);
                buf.rewards.push(r.rewards[t]);
                buf.values.push(r.values[t]);
                buf.dones.push(r.dones[t]);
                buf.boundary_values.push(r.boundary_values[t]);
            }
        }

        let raw_obs: Vec<[f64; OBS_DIM]> =
            (0..steps).flat_map(|t| rollouts.iter().map(move |r| r.raw_obs[t])).collect();
        self.obs_norm.update(&raw_obs);

        if self.cfg.normalize_rewards {
            let mut step_returns = Vec::with_capacity(n_envs);
            for t in 0..steps {
                step_returns.clear();
                step_returns.extend(rollouts.iter().map(|r| r.discounted[t]));
                self.return_stats.update(&step_returns);
            }
            buf.reward_scale = self.return_stats.inv_std();
            buf.reward_clip = self.cfg.reward_clip;
        }

        let wall_ms = if self.cfg.record_wall_clock { self.started.elapsed().as_millis() as u64 } else { 0 };
        let mut episodes: Vec<(usize, usize, f64, u32)> = rollouts
            .iter()
            .enumerate()
            .flat_map(|(e, r)| r.episodes.iter().map(move |&(t, ret, len)| (t, e, ret, len)))
            .collect();
        episodes.sort_by_key(|&(t, e, _, _)| (t, e));
        let base = self.global_step;
        let records = episodes
            .into_iter()
            .map(|(t, e, ret, len)| EcrRecord {
                global_step: base + (t * n_envs + e + 1) as u64,
                stage_id: self.stage_label.clone(),
                episode_return: ret,
                episode_length: len,
                wall_ms,
            })
            .collect();
        self.global_step += n as u64;
        Ok((buf, records))
    }

    /// `epochs` passes of shuffled minibatches with one Adam step each.
    pub fn update(&mut self, buf: &RolloutBuffer) -> Result<UpdateStats, TrainError> {
        ppo_update(&mut self.params, &mut self.adam, buf, &self.cfg, &mut self.rng)
            .map_err(|what| TrainError::Diverged { global_step: self.global_step, what })
    }

    /// Collect → GAE → update until `budget` more steps are consumed (whole
    /// iterations only) or `plateau` reports convergence on the ECR history.
    pub fn train(
        &mut self,
        budget: u64,
        mut plateau: impl FnMut(&[EcrRecord]) -> bool,
        observer: &mut dyn TrainObserver,
    ) -> Result<TrainOutcome, TrainError> {
        let per_iter = self.cfg.steps_per_iteration();
        let iterations = budget / per_iter;
        let mut ecr = Vec::new();
        let mut updates = Vec::new();
        let mut stop = StopReason::Budget;
        let every = self.cfg.checkpoint_every;
        let mut ckpt_bucket = self.global_step.checked_div(every).unwrap_or(0);
        for _ in 0..iterations {
            let (mut buf, records) = self.collect_rollouts()?;
            for r in &records {
                observer.on_episode(r);
            }
            ecr.extend(records);
            buf.compute_gae(self.cfg.gamma, self.cfg.gae_lambda);
            let stats = self.update(&buf)?;
            observer.on_update(self.global_step, &stats);
            updates.push(stats);
            if every > 0 && self.global_step / every > ckpt_bucket {
                ckpt_bucket = self.global_step / every;
                observer.on_checkpoint(&self.snapshot());
            }
            if plateau(&ecr) {
                stop = StopReason::Plateau;
                break;
            }
        }
        Ok(TrainOutcome { snapshot: self.snapshot(), ecr, stop, updates })
    }
}

/// The update step on its own, for callers that manage rollouts themselves.
/// Returns an error message if a loss or gradient becomes non-finite.
pub fn ppo_update(
    params: &mut PolicyParams,
    adam: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, String> {
    let n = buf.len();
    assert_eq!(buf.advantages.len(), n, "compute_gae must run before the update");
    let coeffs = cfg.loss_coeffs();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; PARAM_COUNT];
    let mut stats = UpdateStats::default();
    let mut mb_obs = Vec::with_capacity(cfg.batch_size);
    let mut mb_act = Vec::with_capacity(cfg.batch_size);
    let mut mb_logp = Vec::with_capacity(cfg.batch_size);
    let mut mb_adv = Vec::with_capacity(cfg.batch_size);
    let mut mb_ret = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.batch_size) {
            mb_obs.clear();
            mb_act.clear();
            mb_logp.clear();
            mb_adv.clear();
            mb_ret.clear();
            for &i in chunk {
                mb_obs.push(buf.obs[i]);
                mb_act.push(buf.actions[i]);
                mb_logp.push(buf.log_probs[i]);
                mb_adv.push(buf.advantages[i]);
                mb_ret.push(buf.returns[i]);
            }
            if cfg.normalize_advantages {
                normalize_advantages(&mut mb_adv);
            }
            let batch = Batch {
                obs: &mb_obs,
                actions: &mb_act,
                old_log_probs: &mb_logp,
                advantages: &mb_adv,
                returns: &mb_ret,
            };
            let terms: LossTerms = nn::loss_and_grad(params, &batch, &coeffs, cfg.execution, &mut grad);
            if !terms.total.is_finite() {
                return Err(format!("non-finite loss {terms:?}"));
            }
            let norm = nn::clip_grad_norm(&mut grad, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err("non-finite gradient".into());
            }
            adam.update(params.as_mut_slice(), &grad);
            stats.policy_loss += terms.policy;
            stats.value_loss += terms.value;
            stats.entropy += terms.entropy;
            stats.approx_kl += terms.approx_kl;
            stats.clip_fraction += terms.clip_fraction;
            stats.grad_norm += norm;
            stats.minibatches += 1;
        }
    }
    if !params.is_finite() {
        return Err("non-finite parameters after update".into());
    }
    let k = stats.minibatches.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.clip_fraction /= k;
    stats.grad_norm /= k;
    Ok(stats)
}

/// Trailing mean of episode returns over `window` episodes, one value per record.
pub fn smoothed_returns(records: &[EcrRecord], window: usize) -> Vec<f64> {
    let returns: Vec<f64> = records.iter().map(|r| r.episode_return).collect();
    rolling_mean(&returns, window)
}

pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}
