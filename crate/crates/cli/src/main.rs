//! `hoverlab`: train, evaluate, serve and inspect hover policies.

mod evaluate;
mod inspect;
mod serve;
mod train;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use hoverlab::checkpoint::{load_checkpoint, PolicyCheckpoint};
use hoverlab::config::{ConfigError, ExperimentConfig};
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hoverlab", version, about = "Crazyflie hover simulator and curriculum PPO workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy with the staged curriculum or the single-stage baseline.
    Train(TrainArgs),
    /// Run the A/B/C stabilization protocol and, optionally, a push script.
    Eval(EvalArgs),
    /// Fly a checkpoint live and stream telemetry over WebSocket.
    Serve(ServeArgs),
    /// Print a checkpoint's manifest.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Curriculum,
    Single,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Experiment TOML; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "HOVERLAB_SEED")]
    pub seed: Option<u64>,
    /// Train only curriculum stage k (1-based).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub stage: Option<u64>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Load `--init` even if it was trained under a different config.
    #[arg(long)]
    pub allow_config_mismatch: bool,
    /// Override a config value, e.g. `--set ppo.learning_rate=1e-4`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "HOVERLAB_SEED")]
    pub seed: Option<u64>,
    /// TOML push schedule run after the protocol.
    #[arg(long)]
    pub disturbance_script: Option<PathBuf>,
    /// Experiment TOML; the checkpoint's own config when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub allow_config_mismatch: bool,
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Control steps per wall-clock second; real time when omitted.
    #[arg(long)]
    pub rate_hz: Option<f64>,
    #[arg(long, env = "HOVERLAB_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Print the full manifest as JSON.
    #[arg(long)]
    pub json: bool,
}

/// Bad input from the caller: exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn require_file(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn config_error(e: ConfigError) -> anyhow::Error {
    usage(e.to_string())
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => {
            require_file(p)?;
            ExperimentConfig::load(p, overrides).map_err(config_error)
        }
        None => ExperimentConfig::defaults_with(overrides).map_err(config_error),
    }
}

/// The checkpoint's embedded config with `overrides` applied on top.
pub fn checkpoint_config(ckpt: &PolicyCheckpoint, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::from_toml_str(&ckpt.config.to_toml(), overrides).map_err(config_error)
}

pub fn open_checkpoint(path: &Path) -> anyhow::Result<PolicyCheckpoint> {
    require_file(path)?;
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

/// Command line, then `HOVERLAB_SEED` (both via clap), then the config file, then 0.
pub fn resolve_seed(flag: Option<u64>, cfg: &ExperimentConfig) -> u64 {
    flag.or(cfg.seed).unwrap_or_else(|| {
        log::warn!("no seed given; using 0");
        0
    })
}

/// Writes `config.toml` into `dir`, headed by the invoking command line.
pub fn write_config_echo(dir: &Path, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    let text = format!(
        "# hoverlab {}\n# {}\n# policy hash {}\n{}",
        env!("CARGO_PKG_VERSION"),
        argv.join(" "),
        cfg.policy_hash(),
        cfg.to_toml()
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train::run(a),
        Command::Eval(a) => evaluate::run(a),
        Command::Serve(a) => serve::run(a),
        Command::Inspect(a) => inspect::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("run `hoverlab --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
