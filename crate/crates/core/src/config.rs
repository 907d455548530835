//! One TOML file per experiment, with `section.key=value` overrides.

use crate::curriculum::{PlateauDetector, StageSpec};
use crate::env::EnvConfig;
use crate::eval::EvalConfig;
use crate::ppo::PpoConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub stages: Vec<StageSpec>,
    /// Domain and budget for `--mode single`.
    pub single: StageSpec,
    pub plateau_enabled: bool,
    pub plateau: PlateauDetector,
    pub reset_optimizer: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            stages: StageSpec::curriculum(),
            single: StageSpec::single(),
            plateau_enabled: true,
            plateau: PlateauDetector::default(),
            reset_optimizer: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; the command line and `HOVERLAB_SEED` take precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub curriculum: CurriculumConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected section.key=value")]
    OverrideSyntax(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn defaults_with(overrides: &[String]) -> Result<Self, ConfigError> {
        Self::from_toml_str("", overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ppo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let det = &self.curriculum.plateau;
        if det.window_steps == 0 || !(det.rel_band > 0.0 && det.rel_band < 1.0) {
            return Err(ConfigError::Invalid("plateau needs window_steps > 0 and 0 < rel_band < 1".into()));
        }
        let e = &self.eval;
        if !(e.duration_s > 0.0 && e.settle_window_s > 0.0 && e.success_radius_m > 0.0) || e.trials == 0 {
            return Err(ConfigError::Invalid("eval durations, radius and trial count must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the sections that shape a trained policy (env, ppo,
    /// curriculum). Seed and evaluation settings are excluded so a checkpoint
    /// can be evaluated under any seed or protocol.
    pub fn policy_hash(&self) -> String {
        let canonical = serde_json::json!({
            "env": self.env,
            "ppo": self.ppo,
            "curriculum": self.curriculum,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

/// Sets `section.key=value` in `table`. The value is read as a TOML literal,
/// falling back to a bare string (`--set ppo.execution=sequential`).
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::OverrideSyntax(spec.to_string());
    let (path, raw) = spec.split_once('=').ok_or_else(bad)?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(bad());
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().ok_or_else(bad)?;
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(bad)?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
