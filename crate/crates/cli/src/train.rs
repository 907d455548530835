use crate::{create_dir, load_config, open_checkpoint, resolve_seed, usage, write_config_echo, Mode, TrainArgs};
use anyhow::Context;
use hoverlab::checkpoint::{save_checkpoint, PolicyCheckpoint};
use hoverlab::config::ExperimentConfig;
use hoverlab::curriculum::{run_curriculum, PpoStageTrainer, StageId, StageResult, StageSpec, StageTrainer};
use hoverlab::nn::PolicyParams;
use hoverlab::ppo::{EcrRecord, PolicySnapshot, StopReason, TrainError, TrainObserver, UpdateStats};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::VecDeque;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

/// Streams ECR and update statistics to CSV and writes periodic checkpoints.
struct RunLog {
    dir: PathBuf,
    cfg: ExperimentConfig,
    seed: u64,
    stage: StageId,
    ecr: csv::Writer<BufWriter<File>>,
    updates: csv::Writer<BufWriter<File>>,
    recent: VecDeque<f64>,
    error: Option<anyhow::Error>,
}

#[derive(Serialize)]
struct UpdateRow<'a> {
    global_step: u64,
    stage_id: &'a str,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    approx_kl: f64,
    clip_fraction: f64,
    grad_norm: f64,
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

impl RunLog {
    fn keep<T>(&mut self, r: anyhow::Result<T>) {
        if let (Err(e), None) = (r, &self.error) {
            self.error = Some(e);
        }
    }

    fn checkpoint(&self, snapshot: &PolicySnapshot) -> PolicyCheckpoint {
        PolicyCheckpoint::new(snapshot, &self.cfg, self.stage.to_string(), self.seed)
    }

    fn mean_recent(&self) -> f64 {
        self.recent.iter().sum::<f64>() / self.recent.len().max(1) as f64
    }
}

impl TrainObserver for RunLog {
    fn on_episode(&mut self, record: &EcrRecord) {
        if self.recent.len() == 100 {
            self.recent.pop_front();
        }
        self.recent.push_back(record.episode_return);
        let r = self.ecr.serialize(record).context("writing ecr.csv");
        self.keep(r);
    }

    fn on_update(&mut self, global_step: u64, s: &UpdateStats) {
        let stage = self.stage.to_string();
        let row = UpdateRow {
            global_step,
            stage_id: &stage,
            policy_loss: s.policy_loss,
            value_loss: s.value_loss,
            entropy: s.entropy,
            approx_kl: s.approx_kl,
            clip_fraction: s.clip_fraction,
            grad_norm: s.grad_norm,
        };
        let r = self.updates.serialize(row).and_then(|_| self.updates.flush().map_err(Into::into));
        let r2 = self.ecr.flush();
        self.keep(r.context("writing updates.csv"));
        self.keep(r2.context("writing ecr.csv"));
        log::info!(
            "stage {} step {global_step}: ecr(100) {:.1}, kl {:.4}, clip {:.3}",
            self.stage,
            self.mean_recent(),
            s.approx_kl,
            s.clip_fraction
        );
    }

    fn on_checkpoint(&mut self, snapshot: &PolicySnapshot) {
        let path = self.dir.join("checkpoints").join(format!("step_{:010}.ckpt", snapshot.global_step));
        let r =
            save_checkpoint(&self.checkpoint(snapshot), &path).with_context(|| format!("writing {}", path.display()));
        self.keep(r);
    }
}

/// Runs each stage through PPO, saving a checkpoint at its end. `offset`
/// keeps per-stage seeds aligned with a full run when `--stage` is used.
struct CliTrainer {
    log: RunLog,
    plateau: bool,
    offset: usize,
}

impl StageTrainer for CliTrainer {
    fn train_stage(
        &mut self,
        stage: &StageSpec,
        index: usize,
        start: PolicySnapshot,
    ) -> Result<StageResult, TrainError> {
        self.log.stage = stage.stage_id;
        self.log.recent.clear();
        log::info!("stage {}: budget {} steps", stage.stage_id, stage.step_budget);
        let cfg = &self.log.cfg;
        let (env, ppo, seed, plateau) =
            (cfg.env, cfg.ppo, self.log.seed, self.plateau.then_some(cfg.curriculum.plateau));
        let mut inner = PpoStageTrainer { env, ppo, seed, plateau, observer: &mut self.log };
        let result = inner.train_stage(stage, index + self.offset, start)?;
        let path = self.log.dir.join(format!("stage_{}.ckpt", stage.stage_id));
        let r = save_checkpoint(&self.log.checkpoint(&result.end), &path)
            .with_context(|| format!("writing {}", path.display()));
        self.log.keep(r);
        Ok(result)
    }
}

#[derive(Serialize)]
struct StageReport {
    stage_id: String,
    start_step: u64,
    end_step: u64,
    stop: StopReason,
    episodes: usize,
    final_ecr_mean_100: Option<f64>,
}

#[derive(Serialize)]
struct TrainReport {
    mode: String,
    master_seed: u64,
    policy_hash: String,
    stages: Vec<StageReport>,
}

fn report(results: &[StageResult]) -> Vec<StageReport> {
    results
        .iter()
        .map(|r| {
            let tail = &r.ecr[r.ecr.len().saturating_sub(100)..];
            StageReport {
                stage_id: r.stage.stage_id.to_string(),
                start_step: r.start.global_step,
                end_step: r.end.global_step,
                stop: r.stop,
                episodes: r.ecr.len(),
                final_ecr_mean_100: (!tail.is_empty())
                    .then(|| tail.iter().map(|e| e.episode_return).sum::<f64>() / tail.len() as f64),
            }
        })
        .collect()
}

pub fn run(args: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(args.config.as_deref(), &args.set)?;
    let seed = resolve_seed(args.seed, &cfg);
    cfg.seed = Some(seed);

    let (mut stages, plateau) = match args.mode {
        Mode::Curriculum => (cfg.curriculum.stages.clone(), cfg.curriculum.plateau_enabled),
        Mode::Single => (vec![cfg.curriculum.single], false),
    };
    let mut offset = 0;
    if let Some(k) = args.stage {
        if args.mode != Mode::Curriculum {
            return Err(usage("--stage only applies to --mode curriculum"));
        }
        let k = k as usize;
        if k > stages.len() {
            return Err(usage(format!("--stage {k} out of range: the curriculum has {} stages", stages.len())));
        }
        stages = vec![stages[k - 1]];
        offset = k - 1;
    }
    if stages.is_empty() {
        return Err(usage("the configuration defines no stages"));
    }

    let start = match &args.init {
        Some(path) => {
            let ckpt = open_checkpoint(path)?;
            ckpt.check_config(&cfg, args.allow_config_mismatch)?;
            ckpt.snapshot()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            PolicySnapshot::fresh(PolicyParams::init(&mut rng), cfg.ppo.new_optimizer())
        }
    };

    create_dir(&args.out)?;
    create_dir(&args.out.join("checkpoints"))?;
    write_config_echo(&args.out, &cfg)?;

    let log = RunLog {
        dir: args.out.clone(),
        cfg: cfg.clone(),
        seed,
        stage: stages[0].stage_id,
        ecr: csv_writer(&args.out.join("ecr.csv"))?,
        updates: csv_writer(&args.out.join("updates.csv"))?,
        recent: VecDeque::with_capacity(100),
        error: None,
    };
    let mut trainer = CliTrainer { log, plateau, offset };
    let results = run_curriculum(&stages, start, cfg.curriculum.reset_optimizer, &mut trainer)?;
    trainer.log.ecr.flush().context("writing ecr.csv")?;
    if let Some(e) = trainer.log.error.take() {
        return Err(e);
    }

    let last = results.last().expect("at least one stage");
    let final_ckpt = PolicyCheckpoint::new(&last.end, &cfg, last.stage.stage_id.to_string(), seed);
    save_checkpoint(&final_ckpt, &args.out.join("final.ckpt"))?;

    let mode = match args.mode {
        Mode::Curriculum => "curriculum",
        Mode::Single => "single",
    };
    let summary =
        TrainReport { mode: mode.into(), master_seed: seed, policy_hash: cfg.policy_hash(), stages: report(&results) };
    let path = args.out.join("train_summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", path.display()))?;
    for s in &summary.stages {
        println!(
            "stage {}: steps {}..{} ({:?}), {} episodes, final ECR(100) {}",
            s.stage_id,
            s.start_step,
            s.end_step,
            s.stop,
            s.episodes,
            s.final_ecr_mean_100.map_or("n/a".to_string(), |v| format!("{v:.1}"))
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
