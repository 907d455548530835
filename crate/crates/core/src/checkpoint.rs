//! Binary policy checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! JSON manifest, then every array as little-endian `f64` in manifest order.

use crate::config::ExperimentConfig;
use crate::env::ObsScales;
use crate::nn::{param_layout, Adam, PolicyParams, PARAM_COUNT};
use crate::policy::{ObsNormalizer, Policy, RunningStats};
use crate::ppo::PolicySnapshot;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"HVRLCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage_id: String,
    pub global_step: u64,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub params: PolicyParams,
    pub adam: Adam,
    pub obs_scales: ObsScales,
    /// Discounted-return statistics used to scale training rewards.
    pub return_stats: RunningStats,
    /// Observation standardization the networks expect.
    pub obs_norm: ObsNormalizer,
    pub provenance: Provenance,
    pub config_hash: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHeader {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub byte_order: String,
    pub dtype: String,
    pub arrays: Vec<ArraySpec>,
    pub data_len: usize,
    pub data_sha256: String,
    pub adam: AdamHeader,
    pub obs_scales: ObsScales,
    pub return_stats: RunningStats,
    pub obs_norm: ObsNormalizer,
    pub provenance: Provenance,
    pub config_hash: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("array `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint format version {found} is not supported (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint was trained under config {found}, current config is {expected}; pass the override flag to load anyway")]
    HashMismatch { expected: String, found: String },
}

fn expected_arrays() -> Vec<ArraySpec> {
    let mut arrays: Vec<ArraySpec> =
        param_layout().into_iter().map(|t| ArraySpec { name: t.name, shape: t.shape, offset: t.offset }).collect();
    arrays.push(ArraySpec { name: "adam.m".into(), shape: vec![PARAM_COUNT], offset: PARAM_COUNT });
    arrays.push(ArraySpec { name: "adam.v".into(), shape: vec![PARAM_COUNT], offset: 2 * PARAM_COUNT });
    arrays
}

impl PolicyCheckpoint {
    pub fn new(
        snapshot: &PolicySnapshot,
        config: &ExperimentConfig,
        stage_id: impl Into<String>,
        master_seed: u64,
    ) -> Self {
        Self {
            params: snapshot.params.clone(),
            adam: snapshot.adam.clone(),
            obs_scales: config.env.obs_scales,
            return_stats: snapshot.return_stats,
            obs_norm: snapshot.obs_norm,
            provenance: Provenance { stage_id: stage_id.into(), global_step: snapshot.global_step, master_seed },
            config_hash: config.policy_hash(),
            config: config.clone(),
        }
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            params: self.params.clone(),
            adam: self.adam.clone(),
            global_step: self.provenance.global_step,
            return_stats: self.return_stats,
            obs_norm: self.obs_norm,
        }
    }

    pub fn policy(&self) -> Policy {
        Policy::new(self.params.clone(), self.obs_norm)
    }

    fn data(&self) -> Vec<f64> {
        let mut data = Vec::with_capacity(3 * PARAM_COUNT);
        data.extend_from_slice(self.params.as_slice());
        data.extend_from_slice(&self.adam.m);
        data.extend_from_slice(&self.adam.v);
        data
    }

    pub fn manifest(&self) -> Manifest {
        let bytes = f64s_to_le(&self.data());
        Manifest {
            format_version: FORMAT_VERSION,
            byte_order: "little".into(),
            dtype: "f64".into(),
            arrays: expected_arrays(),
            data_len: 3 * PARAM_COUNT,
            data_sha256: hex::encode(Sha256::digest(&bytes)),
            adam: AdamHeader {
                lr: self.adam.lr,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
                step: self.adam.step,
            },
            obs_scales: self.obs_scales,
            return_stats: self.return_stats,
            obs_norm: self.obs_norm,
            provenance: self.provenance.clone(),
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + 24 * PARAM_COUNT);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&f64s_to_le(&self.data()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let manifest = read_manifest(bytes)?;
        let expected = expected_arrays();
        if manifest.arrays.len() != expected.len() {
            return Err(CheckpointError::Corrupt(format!(
                "expected {} arrays, found {}",
                expected.len(),
                manifest.arrays.len()
            )));
        }
        for (want, got) in expected.iter().zip(&manifest.arrays) {
            if want.name != got.name {
                return Err(CheckpointError::Corrupt(format!("expected array `{}`, found `{}`", want.name, got.name)));
            }
            if want.shape != got.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: got.name.clone(),
                    expected: want.shape.clone(),
                    found: got.shape.clone(),
                });
            }
            if want.offset != got.offset {
                return Err(CheckpointError::Corrupt(format!(
                    "array `{}` at offset {}, expected {}",
                    got.name, got.offset, want.offset
                )));
            }
        }
        let total: usize = manifest.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if total != manifest.data_len {
            return Err(CheckpointError::Corrupt(format!(
                "shapes cover {total} values, data_len is {}",
                manifest.data_len
            )));
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("header checked")) as usize;
        let body = &bytes[HEADER_LEN + manifest_len..];
        if body.len() != manifest.data_len * 8 {
            return Err(CheckpointError::Corrupt(format!(
                "data section is {} bytes, expected {}",
                body.len(),
                manifest.data_len * 8
            )));
        }
        if hex::encode(Sha256::digest(body)) != manifest.data_sha256 {
            return Err(CheckpointError::Corrupt("data checksum mismatch".into()));
        }
        if manifest.config.policy_hash() != manifest.config_hash {
            return Err(CheckpointError::Corrupt("embedded config does not match its recorded hash".into()));
        }
        let data: Vec<f64> =
            body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        let params = PolicyParams::from_vec(data[..PARAM_COUNT].to_vec()).expect("length checked");
        let h = manifest.adam;
        let adam = Adam {
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            step: h.step,
            m: data[PARAM_COUNT..2 * PARAM_COUNT].to_vec(),
            v: data[2 * PARAM_COUNT..].to_vec(),
        };
        Ok(Self {
            params,
            adam,
            obs_scales: manifest.obs_scales,
            return_stats: manifest.return_stats,
            obs_norm: manifest.obs_norm,
            provenance: manifest.provenance,
            config_hash: manifest.config_hash,
            config: manifest.config,
        })
    }

    /// Compares the training config hash with `current`. A mismatch is an
    /// error unless `allow_mismatch`, in which case it is logged and returned.
    pub fn check_config(
        &self,
        current: &ExperimentConfig,
        allow_mismatch: bool,
    ) -> Result<Option<String>, CheckpointError> {
        let expected = current.policy_hash();
        if expected == self.config_hash {
            return Ok(None);
        }
        let err = CheckpointError::HashMismatch { expected, found: self.config_hash.clone() };
        if allow_mismatch {
            log::warn!("{err}");
            Ok(Some(err.to_string()))
        } else {
            Err(err)
        }
    }
}

fn f64s_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Parses and version-checks the header and manifest only.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest, CheckpointError> {
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Corrupt(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if bytes[..8] != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, supported: FORMAT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| HEADER_LEN.checked_add(l))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Corrupt(format!("manifest length {len} exceeds file size")))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..end])
        .map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(CheckpointError::Corrupt("manifest and header disagree on format version".into()));
    }
    if manifest.byte_order != "little" || manifest.dtype != "f64" {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported encoding {} {}",
            manifest.byte_order, manifest.dtype
        )));
    }
    Ok(manifest)
}

pub fn save_checkpoint(ckpt: &PolicyCheckpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes())
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyCheckpoint, CheckpointError> {
    let bytes =
        std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    PolicyCheckpoint::from_bytes(&bytes)
}

pub fn load_manifest(path: &Path) -> Result<Manifest, CheckpointError> {
    let bytes =
        std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    read_manifest(&bytes)
}
