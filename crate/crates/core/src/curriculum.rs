//! Staged initialization domains, ECR plateau detection and stage sequencing
//! with weight transfer.

use crate::dynamics::{euler_from_quat, quat_from_euler, wrap_angle, QuadState};
use crate::env::{EnvConfig, EnvError, QuadEnv, ACT_DIM, OBS_DIM};
use crate::ppo::{
    self, EcrRecord, Environment, EpisodeEnd, PolicySnapshot, PpoConfig, StopReason, TrainError, TrainObserver,
    Trainer, Transition,
};
use nalgebra::{Vector3, Vector4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
    Single,
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageId::One => "1",
            StageId::Two => "2",
            StageId::Three => "3",
            StageId::Single => "single",
        })
    }
}

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for Interval {
    fn from([lo, hi]: [f64; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

impl Interval {
    pub const ZERO: Interval = Interval { lo: 0.0, hi: 0.0 };

    pub fn symmetric(half_width: f64) -> Self {
        Self { lo: -half_width, hi: half_width }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }

    pub fn is_subset_of(&self, other: &Interval) -> bool {
        self.lo >= other.lo && self.hi <= other.hi
    }
}

/// Where initial positions are drawn from. Cylinders and annuli stand on the
/// ground plane around the z axis and are sampled uniformly by volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PositionSampler {
    Fixed { point: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Annulus { inner_radius: f64, outer_radius: f64, height: f64 },
}

impl PositionSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        match *self {
            PositionSampler::Fixed { point } => Vector3::from(point),
            PositionSampler::Cylinder { radius, height } => Self::sample_ring(rng, 0.0, radius, height),
            PositionSampler::Annulus { inner_radius, outer_radius, height } => {
                Self::sample_ring(rng, inner_radius, outer_radius, height)
            }
        }
    }

    fn sample_ring<R: Rng + ?Sized>(rng: &mut R, r_in: f64, r_out: f64, height: f64) -> Vector3<f64> {
        let u: f64 = rng.random();
        let r = (r_in * r_in + u * (r_out * r_out - r_in * r_in)).sqrt();
        let phi = rng.random_range(-PI..PI);
        let z = height * rng.random::<f64>();
        Vector3::new(r * phi.cos(), r * phi.sin(), z)
    }

    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        let r = p.x.hypot(p.y);
        match *self {
            PositionSampler::Fixed { point } => (p - Vector3::from(point)).amax() <= tol,
            PositionSampler::Cylinder { radius, height } => r <= radius + tol && p.z >= -tol && p.z <= height + tol,
            PositionSampler::Annulus { inner_radius, outer_radius, height } => {
                r >= inner_radius - tol && r <= outer_radius + tol && p.z >= -tol && p.z <= height + tol
            }
        }
    }
}

/// Initialization domain and step budget of one curriculum stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage_id: StageId,
    pub position: PositionSampler,
    pub rp_range_rad: Interval,
    pub yaw_range_rad: Interval,
    /// Per-axis world-frame linear velocity (m/s).
    pub lin_vel_range: Interval,
    /// Per-axis body rate (rad/s).
    pub ang_vel_range: Interval,
    pub step_budget: u64,
}

impl StageSpec {
    /// Take off and hover from the origin.
    pub fn stage1() -> Self {
        Self {
            stage_id: StageId::One,
            position: PositionSampler::Fixed { point: [0.0, 0.0, 0.0] },
            rp_range_rad: Interval::ZERO,
            yaw_range_rad: Interval::ZERO,
            lin_vel_range: Interval::ZERO,
            ang_vel_range: Interval::ZERO,
            step_budget: 6_200_000,
        }
    }

    /// Random position in a 2 m × 2 m cylinder and random attitude.
    pub fn stage2() -> Self {
        Self {
            stage_id: StageId::Two,
            position: PositionSampler::Cylinder { radius: 2.0, height: 2.0 },
            rp_range_rad: Interval::symmetric(15f64.to_radians()),
            yaw_range_rad: Interval::symmetric(PI),
            step_budget: 6_800_000,
            ..Self::stage1()
        }
    }

    /// Stage 2 plus random linear and angular velocities.
    pub fn stage3() -> Self {
        Self {
            stage_id: StageId::Three,
            lin_vel_range: Interval::symmetric(1.0),
            ang_vel_range: Interval::symmetric(1.0),
            step_budget: 7_000_000,
            ..Self::stage2()
        }
    }

    /// Single-stage baseline on the full stage-3 domain.
    pub fn single() -> Self {
        Self { stage_id: StageId::Single, step_budget: 20_000_000, ..Self::stage3() }
    }

    pub fn curriculum() -> Vec<Self> {
        vec![Self::stage1(), Self::stage2(), Self::stage3()]
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> QuadState {
        let position = self.position.sample(rng);
        let roll = self.rp_range_rad.sample(rng);
        let pitch = self.rp_range_rad.sample(rng);
        let yaw = self.yaw_range_rad.sample(rng);
        let lin_vel = Vector3::from_fn(|_, _| self.lin_vel_range.sample(rng));
        let ang_vel = Vector3::from_fn(|_, _| self.ang_vel_range.sample(rng));
        QuadState {
            position,
            attitude: quat_from_euler(roll, pitch, yaw),
            lin_vel,
            ang_vel,
            rpm: Vector4::zeros(),
            time_s: 0.0,
        }
    }

    /// Whether `s` could have been drawn from this domain (angles compared
    /// after a quaternion round trip, hence the small tolerance).
    pub fn contains(&self, s: &QuadState) -> bool {
        const TOL: f64 = 1e-9;
        let [roll, pitch, yaw] = euler_from_quat(&s.attitude);
        let yaw_ok = self.yaw_range_rad.hi - self.yaw_range_rad.lo >= 2.0 * PI - TOL
            || self.yaw_range_rad.contains(yaw, TOL)
            || self.yaw_range_rad.contains(wrap_angle(yaw + PI) - PI, TOL);
        self.position.contains(&s.position, TOL)
            && self.rp_range_rad.contains(roll, TOL)
            && self.rp_range_rad.contains(pitch, TOL)
            && yaw_ok
            && s.lin_vel.iter().all(|v| self.lin_vel_range.contains(*v, TOL))
            && s.ang_vel.iter().all(|v| self.ang_vel_range.contains(*v, TOL))
    }
}

/// A [`QuadEnv`] that resets from a stage's initialization domain.
#[derive(Debug, Clone)]
pub struct StagedEnv {
    env: QuadEnv,
    stage: StageSpec,
}

impl StagedEnv {
    pub fn new(cfg: EnvConfig, stage: StageSpec) -> Result<Self, EnvError> {
        Ok(Self { env: QuadEnv::new(cfg)?, stage })
    }

    pub fn inner(&self) -> &QuadEnv {
        &self.env
    }
}

impl Environment for StagedEnv {
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<[f64; OBS_DIM], EnvError> {
        let initial = self.stage.sample_initial_state(rng);
        Ok(self.env.reset(initial)?.0)
    }

    fn step(&mut self, action: &[f64; ACT_DIM]) -> Result<Transition, EnvError> {
        let r = self.env.step(action)?;
        let end = if r.is_fault() {
            EpisodeEnd::Fault
        } else if r.truncated {
            EpisodeEnd::Truncated
        } else if r.terminated {
            EpisodeEnd::TimeLimit
        } else {
            EpisodeEnd::Running
        };
        Ok(Transition { obs: r.observation.0, reward: r.reward.total, end })
    }
}

/// Declares a stage converged when the smoothed ECR has been flat for a
/// trailing window of environment steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauDetector {
    pub window_steps: u64,
    /// Allowed relative deviation of the smoothed ECR from its window mean,
    /// and allowed relative standard deviation of raw returns in the window.
    pub rel_band: f64,
    pub min_episodes: usize,
    pub smoothing_episodes: usize,
}

impl Default for PlateauDetector {
    fn default() -> Self {
        Self { window_steps: 1_000_000, rel_band: 0.05, min_episodes: 100, smoothing_episodes: 100 }
    }
}

/// `history` holds `(global_step, episode_return)` ordered by step.
///
/// True when the history spans at least `window_steps`, the trailing window
/// holds `min_episodes` episodes, every smoothed value in the window lies
/// within `±rel_band` of the window mean of the smoothed series, and the raw
/// returns in the window have relative standard deviation at most `rel_band`.
pub fn plateau_reached(history: &[(u64, f64)], det: &PlateauDetector) -> bool {
    let Some(&(last_step, _)) = history.last() else {
        return false;
    };
    if last_step < history[0].0 + det.window_steps {
        return false;
    }
    let start = last_step - det.window_steps;
    let first = history.partition_point(|&(s, _)| s < start);
    let in_window = history.len() - first;
    if in_window < det.min_episodes.max(2) {
        return false;
    }
    let returns: Vec<f64> = history.iter().map(|&(_, r)| r).collect();
    let smoothed = ppo::rolling_mean(&returns, det.smoothing_episodes);
    let window = &smoothed[first..];
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    let scale = mean.abs().max(f64::MIN_POSITIVE);
    if window.iter().any(|s| (s - mean).abs() > det.rel_band * scale) {
        return false;
    }
    let raw = &returns[first..];
    let raw_mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let var = raw.iter().map(|r| (r - raw_mean).powi(2)).sum::<f64>() / (raw.len() - 1) as f64;
    var.sqrt() <= det.rel_band * raw_mean.abs()
}

pub fn plateau_from_records(records: &[EcrRecord], det: &PlateauDetector) -> bool {
    let history: Vec<(u64, f64)> = records.iter().map(|r| (r.global_step, r.episode_return)).collect();
    plateau_reached(&history, det)
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub stage: StageSpec,
    pub start: PolicySnapshot,
    pub end: PolicySnapshot,
    pub ecr: Vec<EcrRecord>,
    pub stop: StopReason,
}

/// Trains one stage from a starting snapshot.
pub trait StageTrainer {
    fn train_stage(
        &mut self,
        stage: &StageSpec,
        index: usize,
        start: PolicySnapshot,
    ) -> Result<StageResult, TrainError>;
}

/// Runs `stages` in order, each starting from the previous stage's final
/// parameters and optimizer moments. Zero-budget stages pass their input
/// through untouched.
pub fn run_curriculum(
    stages: &[StageSpec],
    initial: PolicySnapshot,
    reset_optimizer: bool,
    trainer: &mut dyn StageTrainer,
) -> Result<Vec<StageResult>, TrainError> {
    let mut current = initial;
    let mut results = Vec::with_capacity(stages.len());
    for (i, stage) in stages.iter().enumerate() {
        if i > 0 && reset_optimizer {
            current.adam.reset_moments();
        }
        let result = if stage.step_budget == 0 {
            StageResult {
                stage: *stage,
                start: current.clone(),
                end: current.clone(),
                ecr: Vec::new(),
                stop: StopReason::Budget,
            }
        } else {
            trainer.train_stage(stage, i, current.clone())?
        };
        current = result.end.clone();
        results.push(result);
    }
    Ok(results)
}

/// PPO on [`StagedEnv`]s.
pub struct PpoStageTrainer<'a> {
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub seed: u64,
    pub plateau: Option<PlateauDetector>,
    pub observer: &'a mut dyn TrainObserver,
}

/// Mixes a master seed with a stage index (splitmix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StageTrainer for PpoStageTrainer<'_> {
    fn train_stage(
        &mut self,
        stage: &StageSpec,
        index: usize,
        start: PolicySnapshot,
    ) -> Result<StageResult, TrainError> {
        let envs = (0..self.ppo.n_envs).map(|_| StagedEnv::new(self.env, *stage)).collect::<Result<Vec<_>, _>>()?;
        let mut trainer = Trainer::new(
            self.ppo,
            envs,
            start.clone(),
            derive_seed(self.seed, index as u64),
            stage.stage_id.to_string(),
        )?;
        let plateau = self.plateau;
        let outcome = trainer.train(
            stage.step_budget,
            |ecr| plateau.is_some_and(|det| plateau_from_records(ecr, &det)),
            &mut *self.observer,
        )?;
        Ok(StageResult { stage: *stage, start, end: outcome.snapshot, ecr: outcome.ecr, stop: outcome.stop })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn stage1_is_fixed() {
        let mut r = rng(1);
        for _ in 0..100 {
            let s = StageSpec::stage1().sample_initial_state(&mut r);
            assert_eq!(s.position, Vector3::zeros());
            assert_eq!(s.attitude, nalgebra::UnitQuaternion::identity());
            assert_eq!(s.lin_vel, Vector3::zeros());
            assert_eq!(s.ang_vel, Vector3::zeros());
        }
    }

    #[test]
    fn stage2_ranges() {
        let mut r = rng(2);
        let lim = 15f64.to_radians() + 1e-9;
        for _ in 0..10_000 {
            let s = StageSpec::stage2().sample_initial_state(&mut r);
            assert!(s.position.x.hypot(s.position.y) <= 2.0);
            assert!((0.0..=2.0).contains(&s.position.z));
            let [roll, pitch, _] = s.euler();
            assert!(roll.abs() <= lim && pitch.abs() <= lim);
            assert_eq!(s.lin_vel, Vector3::zeros());
            assert_eq!(s.ang_vel, Vector3::zeros());
        }
    }

    #[test]
    fn stage3_velocity_ranges() {
        let mut r = rng(3);
        for _ in 0..10_000 {
            let s = StageSpec::stage3().sample_initial_state(&mut r);
            assert!(s.lin_vel.iter().all(|v| v.abs() <= 1.0));
            assert!(s.ang_vel.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn samples_pass_env_reset_validation() {
        let mut env = QuadEnv::new(EnvConfig::default()).unwrap();
        let mut r = rng(4);
        for stage in [StageSpec::stage1(), StageSpec::stage2(), StageSpec::stage3()] {
            for _ in 0..1000 {
                env.reset(stage.sample_initial_state(&mut r)).unwrap();
            }
        }
    }

    #[test]
    fn domains_are_nested() {
        let (s1, s2, s3) = (StageSpec::stage1(), StageSpec::stage2(), StageSpec::stage3());
        let mut r = rng(5);
        for _ in 0..5000 {
            let a = s1.sample_initial_state(&mut r);
            assert!(s1.contains(&a) && s2.contains(&a) && s3.contains(&a));
            let b = s2.sample_initial_state(&mut r);
            assert!(s2.contains(&b) && s3.contains(&b));
            let c = s3.sample_initial_state(&mut r);
            assert!(s3.contains(&c));
        }
        let fast = s3.sample_initial_state(&mut rng(6));
        assert!(!s2.contains(&fast));
    }

    #[test]
    fn interval_serde_is_a_pair() {
        let v = serde_json::to_string(&Interval { lo: -1.0, hi: 2.0 }).unwrap();
        assert_eq!(v, "[-1.0,2.0]");
        let s: StageSpec = serde_json::from_str(&serde_json::to_string(&StageSpec::stage3()).unwrap()).unwrap();
        assert_eq!(s, StageSpec::stage3());
    }

    #[test]
    fn annulus_respects_radii() {
        let a = PositionSampler::Annulus { inner_radius: 1.5, outer_radius: 2.0, height: 2.0 };
        let mut r = rng(8);
        for _ in 0..10_000 {
            let p = a.sample(&mut r);
            let rad = p.x.hypot(p.y);
            assert!((1.5..=2.0).contains(&rad));
            assert!(a.contains(&p, 0.0));
        }
    }

    #[test]
    fn plateau_basic_cases() {
        let det = PlateauDetector::default();
        assert!(!plateau_reached(&[], &det));
        let flat: Vec<(u64, f64)> = (0..1500).map(|i| (i * 1000, 5000.0)).collect();
        assert!(plateau_reached(&flat, &det));
        let rising: Vec<(u64, f64)> = (0..1500).map(|i| (i * 1000, 1000.0 + i as f64 * 5.0)).collect();
        assert!(!plateau_reached(&rising, &det));
        let short: Vec<(u64, f64)> = (0..500).map(|i| (i * 1000, 5000.0)).collect();
        assert!(!plateau_reached(&short, &det));
    }

    fn noisy_flat(rel_std: f64, seed: u64) -> Vec<(u64, f64)> {
        use rand_distr::{Distribution, Normal};
        let noise = Normal::new(0.0, rel_std * 5000.0).unwrap();
        let mut r = rng(seed);
        (0..2000).map(|i| (i * 750, 5000.0 + noise.sample(&mut r))).collect()
    }

    #[test]
    fn plateau_noise_levels() {
        let det = PlateauDetector::default();
        for seed in 0..5 {
            assert!(plateau_reached(&noisy_flat(0.03, seed), &det));
            assert!(!plateau_reached(&noisy_flat(0.10, seed), &det));
        }
    }

    /// Pearson statistic of `u` (values in [0, 1)) over equal bins.
    fn chi_square(u: impl Iterator<Item = f64>, bins: usize) -> f64 {
        let mut counts = vec![0usize; bins];
        let mut n = 0;
        for v in u {
            counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
            n += 1;
        }
        let expected = n as f64 / bins as f64;
        counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
    }

    #[test]
    fn stage3_marginals_are_uniform() {
        // Upper 1% point of chi-square with 19 degrees of freedom.
        const CRIT: f64 = 36.191;
        let mut r = rng(9);
        let spec = StageSpec::stage3();
        let samples: Vec<QuadState> = (0..10_000).map(|_| spec.sample_initial_state(&mut r)).collect();
        let rp = 15f64.to_radians();
        type Marginal = Box<dyn Fn(&QuadState) -> f64>;
        let marginals: Vec<(&str, Marginal)> = vec![
            ("r^2", Box::new(|s| (s.position.x.powi(2) + s.position.y.powi(2)) / 4.0)),
            ("azimuth", Box::new(|s| (s.position.y.atan2(s.position.x) + PI) / (2.0 * PI))),
            ("z", Box::new(|s| s.position.z / 2.0)),
            ("roll", Box::new(move |s| (s.euler()[0] + rp) / (2.0 * rp))),
            ("pitch", Box::new(move |s| (s.euler()[1] + rp) / (2.0 * rp))),
            ("yaw", Box::new(|s| (s.euler()[2] + PI) / (2.0 * PI))),
            ("vx", Box::new(|s| (s.lin_vel.x + 1.0) / 2.0)),
            ("wz", Box::new(|s| (s.ang_vel.z + 1.0) / 2.0)),
        ];
        for (name, f) in marginals {
            let stat = chi_square(samples.iter().map(f), 20);
            assert!(stat < CRIT, "{name}: chi2 = {stat}");
        }
    }

    #[test]
    fn zero_budget_passes_through() {
        struct Panics;
        impl StageTrainer for Panics {
            fn train_stage(&mut self, _: &StageSpec, _: usize, _: PolicySnapshot) -> Result<StageResult, TrainError> {
                panic!("must not train")
            }
        }
        let params = crate::nn::PolicyParams::init(&mut rng(10));
        let mut snap = PolicySnapshot::fresh(params, PpoConfig::default().new_optimizer());
        snap.global_step = 7;
        let stages = [StageSpec { step_budget: 0, ..StageSpec::stage1() }];
        let out = run_curriculum(&stages, snap.clone(), false, &mut Panics).unwrap();
        assert_eq!(out[0].end, snap);
    }

    #[test]
    fn seed_derivation_spreads() {
        let a = derive_seed(1, 0);
        let b = derive_seed(1, 1);
        let c = derive_seed(2, 0);
        assert!(a != b && a != c && b != c);
        assert_eq!(a, derive_seed(1, 0));
    }
}
