//! Run configuration: one flat TOML file with a section per module,
//! overridable from the command line with `--set section.key=value`.
//! Precedence: flags > file > defaults.
//!
//! Two hashes derive from a config. The model hash covers everything that
//! determines parameter shapes and preprocessing geometry; checkpoints
//! refuse to load under a different model hash. The full hash covers the
//! entire config and is stamped into every artifact for provenance.

use crate::augment::AugmentationPolicy;
use crate::backbone::BackboneConfig;
use crate::baselines::MilAttentionConfig;
use crate::error::{Error, Result};
use crate::eval::{SelectionPolicy, SplitSpec};
use crate::preprocess::RoiSpec;
use crate::ssl::SslSchedule;
use crate::stage2::Stage2Schedule;
use crate::synth::{DatasetParams, PhantomConfig};
use crate::transformer::TransformerConfig;
use crate::vicreg::VicregWeights;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub roi: RoiSpec,
    pub phantom: PhantomConfig,
    pub dataset: DatasetParams,
    pub backbone: BackboneConfig,
    pub projector: crate::backbone::ProjectorConfig,
    pub augment: AugmentationPolicy,
    pub vicreg: VicregWeights,
    pub ssl: SslSchedule,
    pub transformer: TransformerConfig,
    pub stage2: Stage2Schedule,
    pub mil: MilAttentionConfig,
    pub split: SplitSpec,
    pub selection: SelectionPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "runs/default".into(),
            roi: RoiSpec::default(),
            phantom: PhantomConfig::default(),
            dataset: DatasetParams::default(),
            backbone: BackboneConfig::default(),
            projector: crate::backbone::ProjectorConfig::default(),
            augment: AugmentationPolicy::default(),
            vicreg: VicregWeights::default(),
            ssl: SslSchedule::default(),
            transformer: TransformerConfig::default(),
            stage2: Stage2Schedule::default(),
            mil: MilAttentionConfig::default(),
            split: SplitSpec::default(),
            selection: SelectionPolicy::default(),
        }
    }
}

impl RunConfig {
    /// Reduced profile sized for CPU-only end-to-end runs: coarser frames,
    /// 16x16 ROIs on a 2.5 mm stride, the compact backbone, shorter
    /// schedules. The transformer keeps its full depth.
    pub fn half_scale() -> Self {
        RunConfig {
            out_dir: "runs/half_scale".into(),
            roi: RoiSpec {
                roi_size_mm: 5.0,
                stride_mm: 2.5,
                overlap_threshold: 0.66,
                output_size_px: (16, 16),
            },
            phantom: PhantomConfig {
                image_size_px: (128, 192),
                ..PhantomConfig::default()
            },
            backbone: BackboneConfig::compact(),
            projector: crate::backbone::ProjectorConfig::compact(),
            ssl: SslSchedule {
                epochs: 20,
                batch_size: 64,
                warmup_epochs: 2,
                peak_lr: 1e-4,
                eval_cadence: 5,
                max_batches_per_epoch: 50,
                probe_max_samples: 1536,
            },
            transformer: TransformerConfig {
                max_grid: (16, 24),
                ..TransformerConfig::default()
            },
            stage2: Stage2Schedule {
                epochs: 15,
                transformer_peak_lr: 1e-4,
                transformer_warmup_epochs: 2,
                backbone_peak_lr: 3e-5,
                backbone_warmup_epochs: 3,
                cores_per_batch: 8,
            },
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.roi.validate()?;
        self.phantom.validate()?;
        self.backbone.validate()?;
        self.projector.validate()?;
        self.augment.validate()?;
        self.vicreg.validate()?;
        self.ssl.validate()?;
        self.transformer.validate()?;
        self.stage2.validate()?;
        self.split.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Apply `section.key=value` overrides on top of this config.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut value =
            toml::Value::try_from(self).map_err(|e| Error::Format(e.to_string()))?;
        for ov in overrides {
            let (path, raw) = ov.split_once('=').ok_or_else(|| {
                Error::InvalidInput(format!("override '{ov}' is not of the form key=value"))
            })?;
            let parsed: toml::Value = {
                // parse the raw text through a one-entry table so numbers,
                // booleans, arrays, and strings all work
                let attempt = format!("x = {raw}");
                match attempt.parse::<toml::Table>() {
                    Ok(t) => t["x"].clone(),
                    Err(_) => toml::Value::String(raw.to_string()),
                }
            };
            let mut segs: Vec<&str> = path.split('.').collect();
            let leaf = segs.pop().unwrap();
            let mut cursor = &mut value;
            for seg in segs {
                cursor = cursor
                    .as_table_mut()
                    .and_then(|t| t.get_mut(seg))
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("unknown config section in '{path}'"))
                    })?;
            }
            let table = cursor.as_table_mut().ok_or_else(|| {
                Error::InvalidInput(format!("override path '{path}' hits a non-table"))
            })?;
            if !table.contains_key(leaf) {
                return Err(Error::InvalidInput(format!("unknown config key '{path}'")));
            }
            table.insert(leaf.to_string(), parsed);
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Format(format!("override produced invalid config: {e}")))?;
        Ok(cfg)
    }

    fn hash_of(parts: &[&str]) -> String {
        let mut hasher = Sha256::new();
        for p in parts {
            hasher.update(p.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(&hasher.finalize()[..8])
    }

    /// Hash over everything that fixes parameter shapes and bag geometry.
    pub fn model_hash(&self) -> String {
        let roi = toml::to_string(&self.roi).unwrap_or_default();
        let bb = toml::to_string(&self.backbone).unwrap_or_default();
        let proj = toml::to_string(&self.projector).unwrap_or_default();
        let tf = toml::to_string(&self.transformer).unwrap_or_default();
        let mil = toml::to_string(&self.mil).unwrap_or_default();
        Self::hash_of(&[&roi, &bb, &proj, &tf, &mil])
    }

    /// Hash over the complete configuration.
    pub fn full_hash(&self) -> String {
        Self::hash_of(&[&self.to_toml().unwrap_or_default()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_preserves_the_config() {
        let cfg = RunConfig::default();
        let s = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&s).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.full_hash(), back.full_hash());
    }

    #[test]
    fn defaults_match_the_published_schedules() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.ssl.epochs, 200);
        assert_eq!(cfg.ssl.batch_size, 64);
        assert_eq!(cfg.ssl.warmup_epochs, 10);
        assert_eq!(cfg.stage2.epochs, 70);
        assert_eq!(cfg.stage2.transformer_warmup_epochs, 5);
        assert_eq!(cfg.stage2.backbone_peak_lr, 3e-5);
        assert_eq!(cfg.transformer.blocks, 12);
        assert_eq!(cfg.transformer.heads, 8);
        assert_eq!(cfg.transformer.dim, 256);
        assert_eq!(cfg.transformer.mlp_dim, 512);
        assert_eq!(cfg.vicreg.lambda, 25.0);
        assert_eq!(cfg.vicreg.mu, 25.0);
        assert_eq!(cfg.vicreg.nu, 1.0);
        assert_eq!(cfg.roi.roi_size_mm, 5.0);
        assert_eq!(cfg.roi.stride_mm, 1.0);
        assert_eq!(cfg.roi.overlap_threshold, 0.66);
        assert_eq!(cfg.roi.output_size_px, (256, 256));
        assert_eq!(cfg.split.train_frac, 0.60);
        assert_eq!(cfg.selection.min_involvement, 0.40);
        cfg.validate().unwrap();
        RunConfig::half_scale().validate().unwrap();
    }

    #[test]
    fn overrides_take_precedence_and_change_the_hash() {
        let cfg = RunConfig::default();
        let out = cfg
            .apply_overrides(&[
                "ssl.epochs=3".to_string(),
                "roi.stride_mm=2.0".to_string(),
                "seed=99".to_string(),
            ])
            .unwrap();
        assert_eq!(out.ssl.epochs, 3);
        assert_eq!(out.roi.stride_mm, 2.0);
        assert_eq!(out.seed, 99);
        assert_ne!(cfg.full_hash(), out.full_hash());
        // stride is part of the geometry, so the model hash moves too
        assert_ne!(cfg.model_hash(), out.model_hash());
        // but a schedule-only change keeps the model hash
        let sched_only = cfg.apply_overrides(&["ssl.epochs=3".to_string()]).unwrap();
        assert_eq!(cfg.model_hash(), sched_only.model_hash());
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        let cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["nope.key=1".to_string()]).is_err());
        assert!(cfg.apply_overrides(&["ssl.bogus=1".to_string()]).is_err());
        assert!(cfg.apply_overrides(&["just-a-key".to_string()]).is_err());
    }
}
