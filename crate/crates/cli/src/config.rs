//! Run configuration: one JSON file drives pretraining, evaluation and
//! sweeps. Unknown fields are rejected, and every output artifact embeds the
//! SHA-256 digest of the canonical config serialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mrlb_core::augment::AugmentationConfig;
use mrlb_core::encoder::EncoderConfig;
use mrlb_core::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

impl LrSchedule {
    /// Learning rate at `step` of `total` steps.
    pub fn lr_at(&self, base: f32, step: u64, total: u64) -> f32 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f32 / total.max(1) as f32;
                base * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MocoConfig {
    /// Negative-key queue size.
    pub k: usize,
    /// Key-encoder EMA momentum.
    pub m: f32,
    /// InfoNCE temperature.
    pub tau: f32,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f32,
    pub seed: u64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_sgd_momentum")]
    pub sgd_momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    /// Checkpoint every N steps; 0 means only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_sgd_momentum() -> f32 {
    0.9
}

fn default_weight_decay() -> f32 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default = "default_true")]
    pub cam_filter: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { cam_filter: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Manifest with train/query/gallery splits.
    pub manifest: PathBuf,
    /// Directory holding the image files referenced by the manifest.
    pub data_dir: PathBuf,
    /// Output directory for checkpoints, metrics, reports.
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub augmentation: AugmentationConfig,
    pub moco: MocoConfig,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Desk-scale defaults over the toy encoder and the recommended Re-ID
    /// augmentation recipe.
    pub fn desk_default(manifest: PathBuf, data_dir: PathBuf, out_dir: PathBuf) -> Self {
        let encoder = EncoderConfig::toy();
        let (h, w, _) = encoder.input_size;
        RunConfig {
            augmentation: AugmentationConfig::reid_default((h, w)),
            moco: MocoConfig {
                k: 4096,
                m: 0.99,
                tau: 0.07,
                batch_size: 16,
                steps: 2000,
                lr: 0.06,
                seed: 0,
                lr_schedule: LrSchedule::Constant,
                sgd_momentum: default_sgd_momentum(),
                weight_decay: default_weight_decay(),
                checkpoint_every: 0,
            },
            encoder,
            eval: EvalSettings::default(),
            paths: PathsConfig { manifest, data_dir, out_dir },
        }
    }

    /// Field-path validation beyond what serde enforces.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, detail: String| Err(Error::invalid(field, detail));
        self.augmentation.validate().map_err(|e| Error::invalid("augmentation", e.to_string()))?;
        self.encoder.validate().map_err(|e| Error::invalid("encoder", e.to_string()))?;
        let m = &self.moco;
        if m.batch_size < 2 {
            return fail("moco.batch_size", format!("{} must be >= 2", m.batch_size));
        }
        if m.k < m.batch_size || m.k % m.batch_size != 0 {
            return fail(
                "moco.k",
                format!("{} must be a positive multiple of batch_size {}", m.k, m.batch_size),
            );
        }
        if !(0.0..=1.0).contains(&m.m) {
            return fail("moco.m", format!("{} outside [0, 1]", m.m));
        }
        if m.tau <= 0.0 {
            return fail("moco.tau", format!("{} must be > 0", m.tau));
        }
        if m.steps == 0 {
            return fail("moco.steps", "must be >= 1".into());
        }
        if m.lr < 0.0 {
            return fail("moco.lr", format!("{} must be >= 0", m.lr));
        }
        let (h, w, _) = self.encoder.input_size;
        if self.augmentation.output_size != (h, w) {
            return fail(
                "augmentation.output_size",
                format!("{:?} must match encoder input ({h}, {w})", self.augmentation.output_size),
            );
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        mrlb_core::protocol::hex_string(&self.digest())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::invalid("config", format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

pub fn save_config(config: &RunConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(config)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Worker count for view generation: an execution detail, never part of
/// the config digest. Explicit override first, then `MRLB_THREADS`, then 1.
pub fn resolve_workers(override_value: Option<usize>) -> usize {
    if let Some(v) = override_value {
        return v.max(1);
    }
    std::env::var("MRLB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(1)
}
