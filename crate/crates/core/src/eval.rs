//! Robust-stabilization protocol: region samplers, deterministic trials with
//! optional pushes, trajectory logs and metrics recomputable from those logs.

use crate::curriculum::{derive_seed, Interval, PositionSampler};
use crate::dynamics::{quat_from_euler, QuadState};
use crate::env::{Disturbance, EnvConfig, EnvError, QuadEnv};
use crate::exec::{self, Execution};
use crate::policy::Policy;
use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{self, Read, Write};
use std::path::Path;

/// Start regions. `Target` is at rest on the target pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    A,
    B,
    C,
    #[serde(rename = "target")]
    Target,
}

impl Region {
    pub const PROTOCOL: [Region; 3] = [Region::A, Region::B, Region::C];

    pub fn sampler(self) -> Option<PositionSampler> {
        match self {
            Region::A => Some(PositionSampler::Cylinder { radius: 1.5, height: 1.5 }),
            Region::B => Some(PositionSampler::Annulus { inner_radius: 1.5, outer_radius: 2.0, height: 2.0 }),
            Region::C => Some(PositionSampler::Cylinder { radius: 2.0, height: 2.0 }),
            Region::Target => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::A => "A",
            Region::B => "B",
            Region::C => "C",
            Region::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub duration_s: f64,
    pub success_radius_m: f64,
    pub near_ground_m: f64,
    /// Success is judged on the mean error over this trailing window.
    pub settle_window_s: f64,
    pub trials: usize,
    pub rp_range_rad: Interval,
    pub yaw_range_rad: Interval,
    pub lin_vel_range: Interval,
    pub ang_vel_range: Interval,
    pub push_force_n: f64,
    pub push_duration_s: f64,
    pub execution: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            duration_s: 8.0,
            success_radius_m: 0.1,
            near_ground_m: 0.3,
            settle_window_s: 1.0,
            trials: 30,
            rp_range_rad: Interval::symmetric(15f64.to_radians()),
            yaw_range_rad: Interval::symmetric(PI),
            lin_vel_range: Interval::symmetric(1.0),
            ang_vel_range: Interval::symmetric(1.0),
            push_force_n: 0.05,
            push_duration_s: 0.1,
            execution: Execution::Parallel,
        }
    }
}

impl EvalConfig {
    /// Initial state for `region`. Every region except `Target` randomizes
    /// attitude and velocities over the configured ranges.
    pub fn sample_initial<R: Rng + ?Sized>(&self, region: Region, target: Vector3<f64>, rng: &mut R) -> QuadState {
        let Some(sampler) = region.sampler() else {
            return QuadState::at_rest(target);
        };
        let position = sampler.sample(rng);
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

    /// Region of trial `index` when `trials` are split evenly over A, B, C in
    /// that order (any remainder goes to the earlier regions).
    pub fn region_of(&self, index: usize) -> Region {
        let base = self.trials / 3;
        let extra = self.trials % 3;
        let mut upper = 0;
        for (k, region) in Region::PROTOCOL.into_iter().enumerate() {
            upper += base + usize::from(k < extra);
            if index < upper {
                return region;
            }
        }
        Region::C
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub index: usize,
    pub region: Region,
    pub seed: u64,
    pub duration_s: f64,
    pub initial: QuadState,
    pub disturbances: Vec<Disturbance>,
}

/// One control-rate log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub phi: f64,
    pub theta: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
    pub rpm1: f64,
    pub rpm2: f64,
    pub rpm3: f64,
    pub rpm4: f64,
    pub reward_total: f64,
}

impl TrajectorySample {
    pub fn from_state(s: &QuadState, reward_total: f64) -> Self {
        let [phi, theta, psi] = s.euler();
        Self {
            t: s.time_s,
            x: s.position.x,
            y: s.position.y,
            z: s.position.z,
            phi,
            theta,
            psi,
            vx: s.lin_vel.x,
            vy: s.lin_vel.y,
            vz: s.lin_vel.z,
            wx: s.ang_vel.x,
            wy: s.ang_vel.y,
            wz: s.ang_vel.z,
            rpm1: s.rpm[0],
            rpm2: s.rpm[1],
            rpm3: s.rpm[2],
            rpm4: s.rpm[3],
            reward_total,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// Metrics derived from a trajectory alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub success: bool,
    pub convergence_time_s: Option<f64>,
    pub min_z_m: f64,
    pub large_transient: bool,
    pub final_error_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub index: usize,
    pub region: Region,
    pub seed: u64,
    #[serde(skip)]
    pub trajectory: Vec<TrajectorySample>,
    #[serde(flatten)]
    pub metrics: TrialMetrics,
    /// Safety truncation or integrator fault that ended the trial early.
    pub failure: Option<String>,
}

/// The trial ran to its full duration when the last sample is within one
/// physics tick of it.
fn completed(traj: &[TrajectorySample], duration_s: f64) -> bool {
    traj.last().is_some_and(|s| s.t >= duration_s - 1e-6)
}

pub fn compute_metrics(
    traj: &[TrajectorySample],
    target: Vector3<f64>,
    duration_s: f64,
    cfg: &EvalConfig,
) -> TrialMetrics {
    let errors: Vec<f64> = traj.iter().map(|s| (s.position() - target).norm()).collect();
    let t_end = traj.last().map_or(0.0, |s| s.t);
    let window: Vec<f64> =
        traj.iter().zip(&errors).filter(|(s, _)| s.t > t_end - cfg.settle_window_s + 1e-9).map(|(_, e)| *e).collect();
    let final_error_m =
        if window.is_empty() { f64::INFINITY } else { window.iter().sum::<f64>() / window.len() as f64 };
    let done = completed(traj, duration_s);
    let convergence_time_s = if done {
        let first_inside = errors.iter().rposition(|e| *e >= cfg.success_radius_m).map_or(0, |i| i + 1);
        traj.get(first_inside).map(|s| s.t)
    } else {
        None
    };
    let min_z_m = traj.iter().map(|s| s.z).fold(f64::INFINITY, f64::min);
    TrialMetrics {
        success: done && final_error_m < cfg.success_radius_m,
        convergence_time_s,
        min_z_m,
        large_transient: min_z_m < cfg.near_ground_m,
        final_error_m,
    }
}

/// Runs the deterministic policy mean from `spec.initial`. Exploration
/// truncation is off; tilt and ground still end the trial as a failure.
pub fn run_trial(
    policy: &Policy,
    env_cfg: &EnvConfig,
    spec: &TrialSpec,
    cfg: &EvalConfig,
) -> Result<TrialResult, EnvError> {
    let env_cfg = EnvConfig { exploration_truncation: false, episode_length_s: spec.duration_s, ..*env_cfg };
    let mut env = QuadEnv::new(env_cfg)?;
    let mut obs = env.reset(spec.initial)?;
    let mut trajectory = vec![TrajectorySample::from_state(env.state(), 0.0)];
    let mut failure = None;
    loop {
        let action = policy.act(&obs.0);
        let r = env.step_with_disturbances(&action, &spec.disturbances)?;
        trajectory.push(TrajectorySample::from_state(&r.info.state, r.reward.total));
        obs = r.observation;
        if r.truncated {
            let causes: Vec<&str> = r.info.causes.iter().map(|c| c.as_str()).collect();
            failure = Some(causes.join("+"));
            break;
        }
        if r.terminated {
            break;
        }
    }
    let metrics = compute_metrics(&trajectory, env_cfg.reward.target(), spec.duration_s, cfg);
    Ok(TrialResult { index: spec.index, region: spec.region, seed: spec.seed, trajectory, metrics, failure })
}

pub fn protocol_specs(cfg: &EvalConfig, target: Vector3<f64>, master_seed: u64) -> Vec<TrialSpec> {
    (0..cfg.trials)
        .map(|index| {
            let region = cfg.region_of(index);
            let seed = derive_seed(master_seed, index as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            TrialSpec {
                index,
                region,
                seed,
                duration_s: cfg.duration_s,
                initial: cfg.sample_initial(region, target, &mut rng),
                disturbances: Vec::new(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: Region,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean over trials that converged.
    pub mean_convergence_time_s: Option<f64>,
    pub large_transients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub master_seed: u64,
    pub eval: EvalConfig,
    pub env: EnvConfig,
    pub regions: Vec<RegionSummary>,
    pub successes: usize,
    pub trials: usize,
    pub large_transients: usize,
    pub results: Vec<TrialResult>,
}

pub fn summarize(results: &[TrialResult], regions: &[Region]) -> Vec<RegionSummary> {
    regions
        .iter()
        .map(|&region| {
            let of: Vec<&TrialResult> = results.iter().filter(|r| r.region == region).collect();
            let successes = of.iter().filter(|r| r.metrics.success).count();
            let times: Vec<f64> = of.iter().filter_map(|r| r.metrics.convergence_time_s).collect();
            RegionSummary {
                region,
                trials: of.len(),
                successes,
                success_rate: if of.is_empty() { 0.0 } else { successes as f64 / of.len() as f64 },
                mean_convergence_time_s: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
                large_transients: of.iter().filter(|r| r.metrics.large_transient).count(),
            }
        })
        .collect()
}

/// Runs the split A/B/C protocol; trials are independent and may run in parallel.
pub fn run_protocol(
    policy: &Policy,
    env_cfg: &EnvConfig,
    cfg: &EvalConfig,
    master_seed: u64,
) -> Result<ProtocolSummary, EnvError> {
    let specs = protocol_specs(cfg, env_cfg.reward.target(), master_seed);
    let results = exec::map(cfg.execution, &specs, |s| run_trial(policy, env_cfg, s, cfg))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let regions = summarize(&results, &Region::PROTOCOL);
    Ok(ProtocolSummary {
        master_seed,
        eval: *cfg,
        env: *env_cfg,
        successes: results.iter().filter(|r| r.metrics.success).count(),
        trials: results.len(),
        large_transients: results.iter().filter(|r| r.metrics.large_transient).count(),
        regions,
        results,
    })
}

/// Push schedule for a long hover run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceScript {
    pub duration_s: f64,
    #[serde(default = "default_start")]
    pub start: Region,
    #[serde(default)]
    pub seed: u64,
    pub pushes: Vec<Disturbance>,
}

fn default_start() -> Region {
    Region::Target
}

impl DisturbanceScript {
    /// 40 s at the target with pushes along +x, +y and −x at 10, 20 and 30 s.
    pub fn standard(cfg: &EvalConfig) -> Self {
        let f = cfg.push_force_n;
        let push = |start_s, force| Disturbance { start_s, force, duration_s: cfg.push_duration_s };
        Self {
            duration_s: 40.0,
            start: Region::Target,
            seed: 0,
            pushes: vec![push(10.0, [f, 0.0, 0.0]), push(20.0, [0.0, f, 0.0]), push(30.0, [-f, 0.0, 0.0])],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(format!("duration_s must be positive, got {}", self.duration_s));
        }
        for p in &self.pushes {
            if !(p.start_s.is_finite() && p.start_s >= 0.0 && p.duration_s > 0.0 && p.duration_s <= 2.0)
                || p.force.iter().any(|f| !f.is_finite())
            {
                return Err(format!("invalid push {p:?}"));
            }
        }
        Ok(())
    }

    pub fn trial(&self, cfg: &EvalConfig, target: Vector3<f64>) -> TrialSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        TrialSpec {
            index: 0,
            region: self.start,
            seed: self.seed,
            duration_s: self.duration_s,
            initial: cfg.sample_initial(self.start, target, &mut rng),
            disturbances: self.pushes.clone(),
        }
    }
}

/// Seconds from each push until the error is back inside `radius` for the
/// rest of the interval before the next push. `Some(0.0)` if the push never
/// left the band; `None` if it had not recovered by the next push or the end.
pub fn recovery_times(
    traj: &[TrajectorySample],
    pushes: &[Disturbance],
    target: Vector3<f64>,
    radius: f64,
) -> Vec<Option<f64>> {
    let mut starts: Vec<f64> = pushes.iter().map(|p| p.start_s).collect();
    starts.sort_by(f64::total_cmp);
    starts
        .iter()
        .enumerate()
        .map(|(k, &t0)| {
            let t1 = starts.get(k + 1).copied().unwrap_or(f64::INFINITY);
            let seg: Vec<&TrajectorySample> = traj.iter().filter(|s| s.t >= t0 && s.t < t1).collect();
            let outside = seg.iter().rposition(|s| (s.position() - target).norm() >= radius);
            match outside {
                None => Some(0.0),
                Some(i) => seg.get(i + 1).map(|s| s.t - t0),
            }
        })
        .collect()
}

pub const CSV_HEADER: [&str; 18] = [
    "t",
    "x",
    "y",
    "z",
    "phi",
    "theta",
    "psi",
    "vx",
    "vy",
    "vz",
    "wx",
    "wy",
    "wz",
    "rpm1",
    "rpm2",
    "rpm3",
    "rpm4",
    "reward_total",
];

/// Writes the trajectory with shortest round-trip float formatting, so
/// reading it back reproduces every value exactly.
pub fn write_trajectory_csv<W: Write>(traj: &[TrajectorySample], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in traj {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: Read>(input: R) -> csv::Result<Vec<TrajectorySample>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn save_trajectory(traj: &[TrajectorySample], path: &Path) -> io::Result<()> {
    let file = io::BufWriter::new(std::fs::File::create(path)?);
    write_trajectory_csv(traj, file).map_err(io::Error::other)
}

pub fn load_trajectory(path: &Path) -> io::Result<Vec<TrajectorySample>> {
    read_trajectory_csv(io::BufReader::new(std::fs::File::open(path)?)).map_err(io::Error::other)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, 1.0)
    }

    fn sample_at(t: f64, p: [f64; 3]) -> TrajectorySample {
        let mut s = QuadState::at_rest(Vector3::from(p));
        s.time_s = t;
        TrajectorySample::from_state(&s, 0.0)
    }

    #[test]
    fn region_split_is_ten_each() {
        let cfg = EvalConfig::default();
        let regions: Vec<Region> = (0..30).map(|i| cfg.region_of(i)).collect();
        for (k, r) in Region::PROTOCOL.iter().enumerate() {
            assert!(regions[k * 10..(k + 1) * 10].iter().all(|x| x == r));
        }
        let odd = EvalConfig { trials: 4, ..cfg };
        assert_eq!((0..4).map(|i| odd.region_of(i)).collect::<Vec<_>>(), [Region::A, Region::A, Region::B, Region::C]);
    }

    #[test]
    fn region_geometry() {
        let cfg = EvalConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for region in Region::PROTOCOL {
            for _ in 0..2000 {
                let s = cfg.sample_initial(region, target(), &mut rng);
                let r = s.position.x.hypot(s.position.y);
                let (lo, hi, h) = match region {
                    Region::A => (0.0, 1.5, 1.5),
                    Region::B => (1.5, 2.0, 2.0),
                    _ => (0.0, 2.0, 2.0),
                };
                assert!(r >= lo && r <= hi && s.position.z >= 0.0 && s.position.z <= h);
            }
        }
        assert_eq!(cfg.sample_initial(Region::Target, target(), &mut rng), QuadState::at_rest(target()));
    }

    #[test]
    fn metrics_on_synthetic_trajectories() {
        let cfg = EvalConfig { duration_s: 2.0, ..Default::default() };
        let traj: Vec<TrajectorySample> = (0..=60)
            .map(|k| {
                let t = k as f64 / 30.0;
                let off = if t < 0.5 { 1.0 - t } else { 0.01 };
                sample_at(t, [off, 0.0, 1.0])
            })
            .collect();
        let m = compute_metrics(&traj, target(), 2.0, &cfg);
        assert!(m.success);
        assert!((m.final_error_m - 0.01).abs() < 1e-15);
        assert_eq!(m.convergence_time_s, Some(15.0 / 30.0));
        assert_eq!(m.min_z_m, 1.0);
        assert!(!m.large_transient);

        let short = &traj[..40];
        let m = compute_metrics(short, target(), 2.0, &cfg);
        assert!(!m.success && m.convergence_time_s.is_none());
    }

    #[test]
    fn start_on_target_converges_at_zero() {
        let cfg = EvalConfig { duration_s: 1.0, ..Default::default() };
        let traj: Vec<TrajectorySample> = (0..=30).map(|k| sample_at(k as f64 / 30.0, [0.0, 0.0, 1.0])).collect();
        assert_eq!(compute_metrics(&traj, target(), 1.0, &cfg).convergence_time_s, Some(0.0));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let traj: Vec<TrajectorySample> = (0..50)
            .map(|_| {
                let s = EvalConfig::default().sample_initial(Region::C, target(), &mut rng);
                TrajectorySample::from_state(&s, rng.random::<f64>() * 1e3 - 500.0)
            })
            .collect();
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(read_trajectory_csv(&buf[..]).unwrap(), traj);
    }

    #[test]
    fn recovery_time_cases() {
        let push = |start_s| Disturbance { start_s, force: [0.05, 0.0, 0.0], duration_s: 0.1 };
        let traj: Vec<TrajectorySample> = (0..=300)
            .map(|k| {
                let t = k as f64 / 30.0;
                let x = if (2.0..4.5).contains(&t) { 0.2 } else { 0.0 };
                sample_at(t, [x, 0.0, 1.0])
            })
            .collect();
        let out = recovery_times(&traj, &[push(2.0), push(6.0)], target(), 0.1);
        assert!((out[0].unwrap() - 2.5).abs() < 1e-9);
        assert_eq!(out[1], Some(0.0));
        let stuck = recovery_times(&traj[..120], &[push(2.0)], target(), 0.1);
        assert_eq!(stuck, vec![None]);
    }

    #[test]
    fn untrained_policy_fails_region_c() {
        let params = crate::nn::PolicyParams::init(&mut ChaCha8Rng::seed_from_u64(1));
        let policy = Policy::new(params, crate::policy::ObsNormalizer::identity());
        let cfg = EvalConfig { trials: 3, ..Default::default() };
        let env = EnvConfig::default();
        let summary = run_protocol(&policy, &env, &cfg, 11).unwrap();
        assert_eq!(summary.results.len(), 3);
        assert!(!summary.results[2].metrics.success);
    }

    #[test]
    fn script_validation() {
        let cfg = EvalConfig::default();
        assert!(DisturbanceScript::standard(&cfg).validate().is_ok());
        let mut bad = DisturbanceScript::standard(&cfg);
        bad.pushes[0].duration_s = 3.0;
        assert!(bad.validate().is_err());
    }
}
