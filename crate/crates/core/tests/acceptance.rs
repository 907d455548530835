//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Arguments filter criteria by name, e.g.
//! `cargo test -p hoverlab --test acceptance -- gae dynamics`.

use hoverlab::checkpoint::PolicyCheckpoint;
use hoverlab::config::ExperimentConfig;
use hoverlab::curriculum::{
    plateau_reached, run_curriculum, PlateauDetector, PpoStageTrainer, StageResult, StageSpec, StageTrainer,
};
use hoverlab::dynamics::{motor_wrench, step, MotorCommand, PhysicalParams, QuadState};
use hoverlab::env::{EnvConfig, ACT_DIM, OBS_DIM};
use hoverlab::eval::{
    compute_metrics, read_trajectory_csv, run_protocol, run_trial, summarize, write_trajectory_csv, EvalConfig,
    ProtocolSummary, Region, TrialSpec,
};
use hoverlab::nn::{self, is_actor_param, param_layout, Batch, LossCoeffs, PolicyParams, PARAM_COUNT};
use hoverlab::policy::{ObsNormalizer, Policy};
use hoverlab::ppo::{
    gae, smoothed_returns, EcrRecord, NoObserver, PolicySnapshot, PpoConfig, RolloutBuffer, TrainError,
};
use hoverlab::reward::{evaluate, total_reward, RewardBreakdown, RewardConfig, RewardInput, RewardWeights};
use hoverlab::Execution;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

// ---------------------------------------------------------------- reward

fn reward_oracle() -> Outcome {
    let w = RewardWeights::default();
    let cases = [((0.0, -0.2, 2.0, 0.0), 85.0), ((3.0, 1.0, -0.01, 0.0), -135.2), ((1.0, -0.2, -0.05, 0.5), 15.0)];
    for ((t, e, s, n), want) in cases {
        let got = total_reward(t, e, s, n, &w).total;
        ensure((got - want).abs() <= 1e-12, || format!("total_reward({t}, {e}, {s}, {n}) = {got}, want {want}"))?;
    }
    ensure(RewardBreakdown::upper_bound(&w) == 85.0, || "upper bound is not 85".into())?;

    let cfg = RewardConfig::default();
    let target = Vector3::from(cfg.target_position);
    let horizontal = |p: &Vector3<f64>| (p.x - target.x).hypot(p.y - target.y);
    let mut r = rng(1);
    let (mut worst, mut bonus, mut escaped_n) = (0.0f64, 0, 0);
    for i in 0..100_000 {
        let initial = Vector3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(0.0..2.0));
        let (position, euler) = if i % 3 == 0 {
            let off = Vector3::from_fn(|_, _| r.random_range(-0.08..0.08));
            (target + off, [r.random_range(-0.2..0.2), r.random_range(-0.2..0.2), r.random_range(-0.3..0.3)])
        } else {
            let p = Vector3::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-0.5..3.0));
            (p, [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-PI..PI)])
        };
        let omega_prev = Vector3::from_fn(|_, _| r.random_range(-3.0..3.0));
        let omega_curr = Vector3::from_fn(|_, _| r.random_range(-3.0..3.0));
        let input = RewardInput { position, euler, omega_prev, omega_curr };
        let b = evaluate(&input, &cfg.exploration_bound(&initial), &cfg);

        let te = (position - target).norm() + wrap(cfg.target_yaw - euler[2]).abs();
        let escaped = horizontal(&position) > horizontal(&initial) + cfg.delta_r || position.z > target.z + cfg.delta_h;
        let e = if escaped { 1.0 } else { -0.2 };
        let tilt = euler[0] * euler[0] + euler[1] * euler[1];
        let inside = (position - target).norm() < cfg.delta_p && tilt < cfg.delta_a;
        let s = if inside { 2.0 } else { -tilt };
        let nav = (omega_prev - omega_curr).norm_squared();
        let want = 25.0 - 20.0 * te - 100.0 * e + 20.0 * s - 18.0 * nav;
        bonus += usize::from(inside);
        escaped_n += usize::from(escaped);

        let parts = [(b.target_penalty, te), (b.exploration, e), (b.stability, s), (b.navigation, nav)];
        for (got, exp) in parts {
            ensure((got - exp).abs() <= 1e-12 * exp.abs().max(1.0), || {
                format!("sample {i}: component {got} vs {exp}")
            })?;
        }
        let err = (b.total - want).abs() / want.abs().max(1.0);
        worst = worst.max(err);
        ensure(b.total <= 85.0, || format!("sample {i}: reward {} above the bound", b.total))?;

        // Random weights: the total is the same affine form of the components.
        let rw = RewardWeights {
            bias: r.random_range(-50.0..50.0),
            target: r.random_range(0.0..50.0),
            exploration: r.random_range(0.0..200.0),
            stability: r.random_range(0.0..50.0),
            navigation: r.random_range(0.0..50.0),
        };
        let got = total_reward(te, e, s, nav, &rw).total;
        let want = rw.bias - rw.target * te - rw.exploration * e + rw.stability * s - rw.navigation * nav;
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    ensure(worst <= 1e-12, || format!("affine identity off by {worst:e} (relative)"))?;
    ensure(bonus > 1000 && escaped_n > 1000, || format!("poor branch coverage: {bonus} bonus, {escaped_n} escaped"))?;
    Ok(format!("3 hand values exact; 1e5 samples, worst relative error {worst:.1e}; {bonus} bonus and {escaped_n} escaped samples"))
}

// -------------------------------------------------------------- dynamics

fn dynamics() -> Outcome {
    let p = PhysicalParams::default();
    let dt = 1.0 / 240.0;

    let v0 = Vector3::new(0.3, -0.2, 1.0);
    let p0 = Vector3::new(0.0, 0.0, 5.0);
    let mut s = QuadState { lin_vel: v0, ..QuadState::at_rest(p0) };
    for _ in 0..48 {
        s = step(&s, &MotorCommand::uniform(0.0), &p, dt).map_err(|e| e.to_string())?;
    }
    let t = s.time_s;
    let closed = p0 + v0 * t - Vector3::new(0.0, 0.0, 0.5 * p.gravity * t * t);
    let drop_err = (s.position - closed).norm();
    ensure((t - 0.2).abs() < 1e-12 && drop_err < 1e-3, || format!("ballistic drop error {drop_err:e} m at t={t}"))?;

    let start = Vector3::new(0.0, 0.0, 1.0);
    let mut s = QuadState::at_rest(start);
    let hover = MotorCommand::uniform(p.hover_rpm());
    let mut hover_err = 0.0f64;
    for _ in 0..240 {
        s = step(&s, &hover, &p, dt).map_err(|e| e.to_string())?;
        hover_err = hover_err.max((s.position - start).norm());
    }
    ensure(hover_err < 1e-3, || format!("hover drift {hover_err:e} m over 1 s"))?;

    for rpm in [0.0, 1234.5, p.hover_rpm(), 18_000.0, p.max_rpm] {
        let (_, torque) = motor_wrench(&MotorCommand::uniform(rpm), &p);
        ensure(torque == Vector3::zeros(), || format!("equal rpm {rpm} gives torque {torque:?}"))?;
    }

    let mut s = QuadState { ang_vel: Vector3::new(0.4, -0.3, 0.8), ..QuadState::at_rest(start) };
    let mut drift = 0.0f64;
    for _ in 0..100_000 {
        s = step(&s, &MotorCommand::uniform(0.0), &p, dt).map_err(|e| e.to_string())?;
        drift = drift.max((s.attitude.coords.norm() - 1.0).abs());
    }
    ensure(drift < 1e-6, || format!("quaternion norm drift {drift:e} over 1e5 steps"))?;

    let inertia = p.inertia();
    let energy = |w: &Vector3<f64>| 0.5 * w.dot(&inertia.component_mul(w));
    let mut s = QuadState { ang_vel: Vector3::new(1.0, -0.5, 0.7), ..QuadState::at_rest(start) };
    let e0 = energy(&s.ang_vel);
    let mut energy_err = 0.0f64;
    for _ in 0..240 {
        s = step(&s, &MotorCommand::uniform(0.0), &p, dt).map_err(|e| e.to_string())?;
        energy_err = energy_err.max((energy(&s.ang_vel) - e0).abs() / e0);
    }
    ensure(energy_err < 1e-6, || format!("rotational energy drift {energy_err:e} (relative) over 1 s"))?;

    Ok(format!(
        "drop {drop_err:.1e} m, hover {hover_err:.1e} m, torque 0, |q| drift {drift:.1e}, energy {energy_err:.1e}"
    ))
}

// ------------------------------------------------------------- gradients

struct GradFixture {
    obs: Vec<[f64; OBS_DIM]>,
    actions: Vec<[f64; ACT_DIM]>,
    old_log_probs: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

impl GradFixture {
    fn new(params: &PolicyParams, n: usize, r: &mut ChaCha8Rng) -> Self {
        let obs: Vec<[f64; OBS_DIM]> = (0..n).map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0))).collect();
        let actions: Vec<[f64; ACT_DIM]> = (0..n).map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0))).collect();
        let log_std = params.log_std();
        let old_log_probs = obs
            .iter()
            .zip(&actions)
            .map(|(o, a)| nn::log_prob(&params.actor_mean(o), &log_std, a) + r.random_range(-0.4..0.4))
            .collect();
        Self {
            obs,
            actions,
            old_log_probs,
            advantages: (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
            returns: (0..n).map(|_| r.random_range(-2.0..2.0)).collect(),
        }
    }

    fn batch(&self) -> Batch<'_> {
        Batch {
            obs: &self.obs,
            actions: &self.actions,
            old_log_probs: &self.old_log_probs,
            advantages: &self.advantages,
            returns: &self.returns,
        }
    }
}

fn gradients() -> Outcome {
    const H: f64 = 1e-5;
    let mut r = rng(3);
    let mut params = PolicyParams::init(&mut r);
    for v in params.as_mut_slice() {
        *v += 0.05 * r.random_range(-1.0..1.0);
    }
    let fx = GradFixture::new(&params, 48, &mut r);
    let batch = fx.batch();
    let ls = param_layout().into_iter().find(|t| t.name == "log_std").expect("log_std tensor");
    let log_std: Vec<usize> = (ls.offset..ls.offset + ls.len).collect();
    let actor: Vec<usize> = (0..PARAM_COUNT).filter(|&i| is_actor_param(i)).collect();
    let critic: Vec<usize> = (0..PARAM_COUNT).filter(|&i| !is_actor_param(i)).collect();
    let coeffs = |policy, value, entropy| LossCoeffs { clip_eps: 0.2, policy, value, entropy };
    let components = [
        ("clip", coeffs(1.0, 0.0, 0.0), &actor),
        ("value", coeffs(0.0, 1.0, 0.0), &critic),
        ("entropy", coeffs(0.0, 0.0, 1.0), &log_std),
    ];

    let mut grad = vec![0.0; PARAM_COUNT];
    let mut report = Vec::new();
    for (name, c, support) in components {
        let terms = nn::loss_and_grad(&params, &batch, &c, Execution::Sequential, &mut grad);
        if name == "clip" {
            ensure(terms.clip_fraction > 0.05 && terms.clip_fraction < 0.95, || {
                format!("fixture clips {:.2} of samples", terms.clip_fraction)
            })?;
        }
        let mut picks: Vec<usize> = support.to_vec();
        if picks.len() >= 20 {
            picks = (0..20).map(|_| support[r.random_range(0..support.len())]).collect();
        } else {
            picks.extend((picks.len()..20).map(|_| r.random_range(0..PARAM_COUNT)));
        }
        let mut worst = 0.0f64;
        for &i in &picks {
            let mut q = params.clone();
            q.as_mut_slice()[i] += H;
            let plus = nn::loss_and_grad(&q, &batch, &c, Execution::Sequential, &mut vec![0.0; PARAM_COUNT]).total;
            q.as_mut_slice()[i] -= 2.0 * H;
            let minus = nn::loss_and_grad(&q, &batch, &c, Execution::Sequential, &mut vec![0.0; PARAM_COUNT]).total;
            let fd = (plus - minus) / (2.0 * H);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            ensure(rel < 1e-4, || format!("{name}: parameter {i} analytic {:e} vs finite difference {fd:e}", grad[i]))?;
        }
        report.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!("worst relative error over 20 parameters: {}", report.join(", ")))
}

// ------------------------------------------------------------------- gae

/// Brute force: A_t = Σ_k (γλ)^(k−t) δ_k up to the first episode end or the
/// end of the segment.
fn gae_by_summation(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    boundary: &[f64],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut weight = 1.0;
            for k in t..n {
                let next = if dones[k] {
                    boundary[k]
                } else if k + 1 == n {
                    last_value
                } else {
                    values[k + 1]
                };
                sum += weight * (rewards[k] + gamma * next - values[k]);
                if dones[k] {
                    break;
                }
                weight *= gamma * lambda;
            }
            sum
        })
        .collect()
}

fn gae_oracle() -> Outcome {
    let (gamma, lambda) = (0.99, 0.95);
    let single = gae(&[1.0], &[0.5], &[false], &[0.0], 1.0, gamma, lambda)[0];
    ensure((single - 1.49).abs() < 1e-12, || format!("single step A = {single}, want 1.49"))?;
    let terminal = gae(&[1.0], &[0.5], &[true], &[0.0], 7.0, gamma, lambda)[0];
    ensure((terminal - 0.5).abs() < 1e-12, || format!("terminal A = {terminal}, want 0.5"))?;

    let mut r = rng(4);
    let mut worst = 0.0f64;
    let mut kinds = [0usize; 3];
    for trial in 0..3000 {
        let n_envs = 2;
        let steps = 10;
        let mut buf = RolloutBuffer {
            n_envs,
            steps,
            obs: vec![[0.0; OBS_DIM]; n_envs * steps],
            actions: vec![[0.0; ACT_DIM]; n_envs * steps],
            log_probs: vec![0.0; n_envs * steps],
            rewards: (0..n_envs * steps).map(|_| r.random_range(-5.0..5.0)).collect(),
            values: (0..n_envs * steps).map(|_| r.random_range(-5.0..5.0)).collect(),
            dones: vec![false; n_envs * steps],
            boundary_values: vec![0.0; n_envs * steps],
            last_values: (0..n_envs).map(|_| r.random_range(-5.0..5.0)).collect(),
            reward_scale: 1.0,
            reward_clip: f64::INFINITY,
            advantages: Vec::new(),
            returns: Vec::new(),
        };
        for i in 0..n_envs * steps {
            let t = i / n_envs;
            // Last step: terminal, bootstrapped truncation, or still running.
            let done = if t + 1 == steps { trial % 3 != 2 } else { r.random_bool(0.15) };
            if done {
                buf.dones[i] = true;
                let terminal = if t + 1 == steps { trial % 3 == 0 } else { r.random_bool(0.5) };
                buf.boundary_values[i] = if terminal { 0.0 } else { r.random_range(-5.0..5.0) };
            }
        }
        kinds[trial % 3] += 1;
        buf.compute_gae(gamma, lambda);
        for e in 0..n_envs {
            let col = |v: &[f64]| (0..steps).map(|t| v[t * n_envs + e]).collect::<Vec<_>>();
            let dones: Vec<bool> = (0..steps).map(|t| buf.dones[t * n_envs + e]).collect();
            let oracle = gae_by_summation(
                &col(&buf.rewards),
                &col(&buf.values),
                &dones,
                &col(&buf.boundary_values),
                buf.last_values[e],
                gamma,
                lambda,
            );
            for (t, want) in oracle.iter().enumerate() {
                let i = t * n_envs + e;
                worst = worst.max((buf.advantages[i] - want).abs());
                worst = worst.max((buf.returns[i] - (want + buf.values[i])).abs());
            }
        }
    }
    ensure(worst < 1e-10, || format!("GAE differs from direct summation by {worst:e}"))?;
    Ok(format!(
        "closed forms exact; {} terminal, {} bootstrapped, {} running segments, worst error {worst:.1e}",
        kinds[0], kinds[1], kinds[2]
    ))
}

// ----------------------------------------------------------- determinism

fn ecr_csv(records: &[EcrRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn small_ppo(execution: Execution) -> PpoConfig {
    PpoConfig {
        rollout_steps_per_env: 256,
        batch_size: 64,
        epochs: 3,
        record_wall_clock: false,
        execution,
        ..Default::default()
    }
}

fn fresh(seed: u64, ppo: &PpoConfig) -> PolicySnapshot {
    PolicySnapshot::fresh(PolicyParams::init(&mut rng(seed)), ppo.new_optimizer())
}

/// Runs `body` with a PPO stage trainer on the default env.
fn train(
    ppo: PpoConfig,
    seed: u64,
    body: &mut dyn FnMut(&mut PpoStageTrainer<'_>) -> Result<Vec<StageResult>, TrainError>,
) -> Result<Vec<StageResult>, String> {
    let mut observer = NoObserver;
    let mut inner = PpoStageTrainer { env: EnvConfig::default(), ppo, seed, plateau: None, observer: &mut observer };
    body(&mut inner).map_err(|e| e.to_string())
}

fn run_small(seed: u64, execution: Execution) -> Result<(Vec<u8>, Vec<u8>), String> {
    let ppo = small_ppo(execution);
    let budget = 3 * ppo.steps_per_iteration();
    let stages = [
        StageSpec { step_budget: budget, ..StageSpec::stage1() },
        StageSpec { step_budget: budget, ..StageSpec::stage2() },
    ];
    let results = train(ppo, seed, &mut |t| run_curriculum(&stages, fresh(seed, &ppo), false, t))?;
    let ecr: Vec<EcrRecord> = results.iter().flat_map(|r| r.ecr.clone()).collect();
    // The echoed config records the execution mode; keep it fixed so only training output is compared.
    let cfg = ExperimentConfig { ppo: small_ppo(Execution::Parallel), ..Default::default() };
    let last = results.last().expect("two stages");
    let ckpt = PolicyCheckpoint::new(&last.end, &cfg, last.stage.stage_id.to_string(), seed).to_bytes();
    Ok((ecr_csv(&ecr), ckpt))
}

fn determinism() -> Outcome {
    let a = run_small(7, Execution::Parallel)?;
    let b = run_small(7, Execution::Parallel)?;
    let c = run_small(7, Execution::Sequential)?;
    let other = run_small(8, Execution::Parallel)?;
    ensure(a.0.len() > 100, || "no episodes recorded".into())?;
    ensure(a.0 == b.0, || "ECR logs differ between identical runs".into())?;
    ensure(a.1 == b.1, || "checkpoints differ between identical runs".into())?;
    ensure(a == c, || "sequential and parallel execution disagree".into())?;
    ensure(a.1 != other.1, || "a different seed produced the same checkpoint".into())?;
    Ok(format!(
        "ECR log ({} bytes) and checkpoint ({} bytes) identical across reruns and execution modes",
        a.0.len(),
        a.1.len()
    ))
}

// ---------------------------------------------------------- desk learning

fn desk_scale_learning() -> Outcome {
    const BUDGET: u64 = 2_000_000;
    const MARK: u64 = 100_000;
    let seed = 0;
    let ppo = PpoConfig { record_wall_clock: false, ..Default::default() };
    let stages = [StageSpec { step_budget: BUDGET, ..StageSpec::stage1() }];
    let results = train(ppo, seed, &mut |t| run_curriculum(&stages, fresh(seed, &ppo), false, t))?;
    let stage = &results[0];
    let steps = stage.end.global_step;
    ensure(steps <= BUDGET, || format!("used {steps} steps"))?;

    let smoothed = smoothed_returns(&stage.ecr, 100);
    let at_mark = stage.ecr.partition_point(|r| r.global_step <= MARK);
    ensure(at_mark > 0, || "no episode finished by the 100k-step mark".into())?;
    let base = smoothed[at_mark - 1];
    let last = *smoothed.last().expect("episodes recorded");
    let (lo, hi) = smoothed.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let gain = (last - base) / (hi - lo);

    let eval = EvalConfig::default();
    let spec = TrialSpec {
        index: 0,
        region: Region::Target,
        seed,
        duration_s: 5.0,
        initial: QuadState::at_rest(Vector3::zeros()),
        disturbances: Vec::new(),
    };
    let trial = run_trial(&stage.end.policy(), &EnvConfig::default(), &spec, &eval).map_err(|e| e.to_string())?;
    let err = trial.metrics.final_error_m;
    let detail = format!(
        "{steps} steps; smoothed ECR {base:.0} at 100k, {last:.0} at end, range {:.0}..{:.0} (gain {:.0}% of range); \
         hover error over last 1 s {err:.3} m{}",
        lo,
        hi,
        100.0 * gain,
        trial.failure.as_deref().map_or(String::new(), |f| format!(" (ended early: {f})"))
    );
    if gain >= 0.5 && err < 0.15 && trial.failure.is_none() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ----------------------------------------------------------- eval protocol

fn trajectory_csv(r: &hoverlab::eval::TrialResult) -> Vec<u8> {
    let mut out = Vec::new();
    write_trajectory_csv(&r.trajectory, &mut out).expect("in-memory csv");
    out
}

fn same_protocol(a: &ProtocolSummary, b: &ProtocolSummary) -> bool {
    serde_json::to_string(a).ok() == serde_json::to_string(b).ok()
        && a.results.iter().zip(&b.results).all(|(x, y)| trajectory_csv(x) == trajectory_csv(y))
}

fn eval_protocol() -> Outcome {
    let cfg = EvalConfig::default();
    let target = Vector3::new(0.0, 0.0, 1.0);
    let tilt = 15f64.to_radians() + 1e-9;
    let mut r = rng(5);
    // (region, inner radius, outer radius, height)
    let geometry = [(Region::A, 0.0, 1.5, 1.5), (Region::B, 1.5, 2.0, 2.0), (Region::C, 0.0, 2.0, 2.0)];
    for (region, r_in, r_out, height) in geometry {
        let n = 10_000;
        let (mut outer_half, mut upper_half) = (0, 0);
        for _ in 0..n {
            let s = cfg.sample_initial(region, target, &mut r);
            let rho = s.position.x.hypot(s.position.y);
            ensure(rho >= r_in - 1e-12 && rho <= r_out + 1e-12, || format!("{region:?}: radius {rho}"))?;
            ensure((0.0..=height).contains(&s.position.z), || format!("{region:?}: height {}", s.position.z))?;
            let [roll, pitch, _] = s.euler();
            ensure(roll.abs() <= tilt && pitch.abs() <= tilt, || format!("{region:?}: tilt ({roll}, {pitch})"))?;
            let vel_ok = s.lin_vel.iter().chain(s.ang_vel.iter()).all(|v| v.abs() <= 1.0);
            ensure(vel_ok, || format!("{region:?}: velocity out of range"))?;
            outer_half += usize::from(rho * rho > 0.5 * (r_in * r_in + r_out * r_out));
            upper_half += usize::from(s.position.z > 0.5 * height);
        }
        // Uniform by volume: half the samples lie beyond the median radius² and above mid-height.
        for (what, count) in [("radius", outer_half), ("height", upper_half)] {
            let frac = count as f64 / n as f64;
            ensure((frac - 0.5).abs() < 0.025, || format!("{region:?}: {frac:.3} beyond the median {what}"))?;
        }
    }
    let split: Vec<Region> = (0..cfg.trials).map(|i| cfg.region_of(i)).collect();
    for region in Region::PROTOCOL {
        let k = split.iter().filter(|&&x| x == region).count();
        ensure(k == cfg.trials / 3, || format!("{k} trials in region {region:?}"))?;
    }

    let policy = Policy::new(PolicyParams::init(&mut rng(6)), ObsNormalizer::default());
    let env = EnvConfig::default();
    let run = |eval: &EvalConfig| run_protocol(&policy, &env, eval, 11).map_err(|e| e.to_string());
    let a = run(&cfg)?;
    let b = run(&cfg)?;
    let mut c = run(&EvalConfig { execution: Execution::Sequential, ..cfg })?;
    c.eval.execution = cfg.execution;
    ensure(same_protocol(&a, &b), || "protocol rerun differs".into())?;
    ensure(same_protocol(&a, &c), || "sequential protocol run differs".into())?;

    // A zero policy commands hover RPM, so a start on the target gives a full-length successful trial.
    let hover = Policy::new(PolicyParams::zeros(), ObsNormalizer::identity());
    let spec = TrialSpec {
        index: cfg.trials,
        region: Region::Target,
        seed: 0,
        duration_s: cfg.duration_s,
        initial: QuadState::at_rest(target),
        disturbances: Vec::new(),
    };
    let hover_trial = run_trial(&hover, &env, &spec, &cfg).map_err(|e| e.to_string())?;
    ensure(hover_trial.metrics.success, || format!("hover trial failed: {:?}", hover_trial.metrics))?;

    let mut recomputed = Vec::new();
    let mut samples = 0;
    for res in a.results.iter().chain([&hover_trial]) {
        let bytes = trajectory_csv(res);
        let traj = read_trajectory_csv(bytes.as_slice()).map_err(|e| e.to_string())?;
        ensure(traj == res.trajectory, || format!("trial {}: CSV round trip changed the trajectory", res.index))?;
        let m = compute_metrics(&traj, target, cfg.duration_s, &cfg);
        ensure(m == res.metrics, || format!("trial {}: recomputed {m:?} vs {:?}", res.index, res.metrics))?;
        samples += traj.len();
        recomputed.push(hoverlab::eval::TrialResult { metrics: m, ..res.clone() });
    }
    recomputed.pop();
    ensure(summarize(&recomputed, &Region::PROTOCOL) == a.regions, || "region summary differs after recompute".into())?;
    Ok(format!(
        "3×1e4 region samples in bounds and uniform; {} trials bit-identical on rerun; {samples} CSV rows recomputed exactly",
        a.trials
    ))
}

// ------------------------------------------------------------- curriculum

/// Records the snapshot each stage receives.
struct Recording<'a, 'b> {
    inner: &'a mut PpoStageTrainer<'b>,
    starts: Vec<PolicySnapshot>,
}

impl StageTrainer for Recording<'_, '_> {
    fn train_stage(
        &mut self,
        stage: &StageSpec,
        index: usize,
        start: PolicySnapshot,
    ) -> Result<StageResult, TrainError> {
        self.starts.push(start.clone());
        self.inner.train_stage(stage, index, start)
    }
}

fn snapshot_bytes(s: &PolicySnapshot) -> Vec<u8> {
    PolicyCheckpoint::new(s, &ExperimentConfig::default(), "x", 0).to_bytes()
}

fn plateau_series(r: &mut ChaCha8Rng, level: impl Fn(f64) -> f64, noise: f64) -> Vec<(u64, f64)> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (1..=5000u64)
        .map(|i| {
            let step = i * 600;
            let mean = level(step as f64);
            (step, mean * (1.0 + noise * normal.sample(r)))
        })
        .collect()
}

fn curriculum_mechanics() -> Outcome {
    let stages = StageSpec::curriculum();
    let single = StageSpec::single();
    let mut r = rng(8);
    let mut strict = [0usize; 3];
    for (k, stage) in stages.iter().enumerate() {
        for _ in 0..10_000 {
            let s = stage.sample_initial_state(&mut r);
            for later in &stages[k..] {
                ensure(later.contains(&s), || {
                    format!("stage {} sample outside stage {}", stage.stage_id, later.stage_id)
                })?;
            }
            ensure(single.contains(&s), || format!("stage {} sample outside the single-stage domain", stage.stage_id))?;
            if k > 0 && !stages[k - 1].contains(&s) {
                strict[k] += 1;
            }
        }
    }
    ensure(strict[1] > 9_000 && strict[2] > 9_000, || format!("later stages barely widen the domain: {strict:?}"))?;

    let ppo = small_ppo(Execution::Parallel);
    let budget = 2 * ppo.steps_per_iteration();
    let mut plan: Vec<StageSpec> = stages.iter().map(|s| StageSpec { step_budget: budget, ..*s }).collect();
    plan.insert(2, StageSpec { step_budget: 0, ..stages[1] });
    let mut starts = Vec::new();
    let results = train(ppo, 9, &mut |t| {
        let mut rec = Recording { inner: t, starts: Vec::new() };
        let out = run_curriculum(&plan, fresh(9, &ppo), false, &mut rec);
        starts = rec.starts;
        out
    })?;
    ensure(starts.len() == 3, || format!("{} stages trained, want 3", starts.len()))?;
    for i in 1..results.len() {
        let prev = snapshot_bytes(&results[i - 1].end);
        ensure(snapshot_bytes(&results[i].start) == prev, || {
            format!("stage {i} does not start where stage {} ended", i - 1)
        })?;
        ensure(results[i].end.global_step > results[i - 1].end.global_step || plan[i].step_budget == 0, || {
            format!("stage {i} did not train")
        })?;
    }
    ensure(snapshot_bytes(&results[2].end) == snapshot_bytes(&results[1].end), || {
        "zero-budget stage changed the policy".into()
    })?;
    for (start, result) in starts.iter().zip(results.iter().filter(|r| r.stage.step_budget > 0)) {
        ensure(snapshot_bytes(start) == snapshot_bytes(&result.start), || {
            "trainer received a modified snapshot".into()
        })?;
    }

    let det = PlateauDetector::default();
    let mut r = rng(10);
    let flat = plateau_series(&mut r, |_| 5000.0, 0.03);
    let noisy = plateau_series(&mut r, |_| 5000.0, 0.10);
    let trending = plateau_series(&mut r, |s| 1000.0 + 4000.0 * s / 3.0e6, 0.03);
    let short = &flat[..1000];
    let verdicts = [
        ("flat", plateau_reached(&flat, &det), true),
        ("noisy", plateau_reached(&noisy, &det), false),
        ("trending", plateau_reached(&trending, &det), false),
        ("shorter than window", plateau_reached(short, &det), false),
    ];
    for (name, got, want) in verdicts {
        ensure(got == want, || format!("plateau on {name} series: {got}, want {want}"))?;
    }
    Ok(format!(
        "3×1e4 samples nested in later stages; weights and optimizer state carried bit-identically over {} boundaries; plateau verdicts correct on 4 series",
        results.len() - 1
    ))
}

// ------------------------------------------------------------------ main

fn main() -> ExitCode {
    let criteria: [(&str, Check); 8] = [
        ("reward-oracle", reward_oracle),
        ("dynamics", dynamics),
        ("gradient-check", gradients),
        ("gae-oracle", gae_oracle),
        ("determinism", determinism),
        ("desk-scale-learning", desk_scale_learning),
        ("eval-protocol", eval_protocol),
        ("curriculum-mechanics", curriculum_mechanics),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
