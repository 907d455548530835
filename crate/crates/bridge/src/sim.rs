//! The served simulation, independent of any transport.

use crate::protocol::{Command, StateFrame};
use hoverlab::dynamics::QuadState;
use hoverlab::env::{Disturbance, EnvConfig, EnvError, Observation, QuadEnv};
use hoverlab::eval::{EvalConfig, Region};
use hoverlab::policy::Policy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Long enough that a served episode never hits its time limit.
const SERVE_EPISODE_S: f64 = 1.0e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeConfig {
    pub env: EnvConfig,
    pub eval: EvalConfig,
    /// Control steps per wall-clock second. The control rate means real time.
    pub rate_hz: f64,
    pub seed: u64,
    pub telemetry_capacity: usize,
    pub command_capacity: usize,
}

impl BridgeConfig {
    pub fn new(env: EnvConfig, eval: EvalConfig) -> Self {
        Self { env, eval, rate_hz: f64::from(env.control_hz), seed: 0, telemetry_capacity: 1024, command_capacity: 64 }
    }
}

pub struct BridgeSim {
    policy: Policy,
    env: QuadEnv,
    eval: EvalConfig,
    rng: ChaCha8Rng,
    obs: Observation,
    disturbances: Vec<Disturbance>,
    region: Region,
    clock_s: f64,
    episode: u64,
    seq: u64,
    paused: bool,
    rate_hz: f64,
    pending_events: Vec<String>,
}

impl BridgeSim {
    /// Starts paused, at rest on the target.
    pub fn new(policy: Policy, cfg: &BridgeConfig) -> Result<Self, EnvError> {
        let env_cfg = EnvConfig { exploration_truncation: false, episode_length_s: SERVE_EPISODE_S, ..cfg.env };
        let mut env = QuadEnv::new(env_cfg)?;
        let obs = env.reset(QuadState::at_rest(env_cfg.reward.target()))?;
        Ok(Self {
            policy,
            env,
            eval: cfg.eval,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            obs,
            disturbances: Vec::new(),
            region: Region::Target,
            clock_s: 0.0,
            episode: 0,
            seq: 0,
            paused: true,
            rate_hz: cfg.rate_hz,
            pending_events: Vec::new(),
        })
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn state(&self) -> &QuadState {
        self.env.state()
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    fn reset(&mut self, region: Region) -> Result<(), EnvError> {
        let target = self.env.config().reward.target();
        let initial = self.eval.sample_initial(region, target, &mut self.rng);
        self.obs = self.env.reset(initial)?;
        self.disturbances.clear();
        self.region = region;
        self.episode += 1;
        Ok(())
    }

    /// Applies a validated command. Pushes take effect on the next control step.
    pub fn handle(&mut self, cmd: Command) -> Result<(), EnvError> {
        match cmd {
            Command::Push { force, duration_s } => {
                let start_s = self.env.state().time_s;
                self.disturbances.push(Disturbance { start_s, force, duration_s });
                self.pending_events.push("push".into());
            }
            Command::Reset { region } => {
                self.reset(region)?;
                self.pending_events.push(format!("reset:{}", region.as_str()));
            }
            Command::Pause => self.paused = true,
            Command::Resume => self.paused = false,
            Command::SetRate { hz } => self.rate_hz = hz,
        }
        Ok(())
    }

    /// Advances one control step unless paused. A safety truncation restarts
    /// the episode in the last reset region.
    pub fn tick(&mut self) -> Result<Option<StateFrame>, EnvError> {
        if self.paused {
            return Ok(None);
        }
        let action = self.policy.act(&self.obs.0);
        let r = self.env.step_with_disturbances(&action, &self.disturbances)?;
        self.clock_s += self.env.config().control_dt();
        let now = r.info.state.time_s;
        self.disturbances.retain(|d| d.start_s + d.duration_s > now);
        self.obs = r.observation;
        let s = r.info.state;
        let mut events = std::mem::take(&mut self.pending_events);
        let episode = self.episode;
        if r.truncated || r.terminated {
            let causes: Vec<&str> = r.info.causes.iter().map(|c| c.as_str()).collect();
            events.push(format!("truncated:{}", causes.join("+")));
            self.reset(self.region)?;
        }
        let frame = StateFrame {
            seq: self.seq,
            t: self.clock_s,
            episode,
            episode_t: s.time_s,
            pos: s.position.into(),
            euler: s.euler(),
            lin_vel: s.lin_vel.into(),
            ang_vel: s.ang_vel.into(),
            rpm: s.rpm.into(),
            reward_total: r.reward.total,
            events,
        };
        self.seq += 1;
        Ok(Some(frame))
    }
}
