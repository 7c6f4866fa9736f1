//! Merged run configuration.
//!
//! Precedence is command-line flag > config file > built-in default: a
//! config file may specify any subset of fields (every section is
//! `#[serde(default)]`), and the driver applies flag overrides on top.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{DiscriminatorVariant, GrlConfig, LossWeights};
use crate::dataset::{DataGenConfig, DatasetManifest};
use crate::embedder::{Arm, BlockKind, ExtractorMode, ModelConfig};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub variant: DiscriminatorVariant,
    /// Hidden width; `None` uses the representation width `D_b`.
    pub hidden: Option<usize>,
    pub dropout: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { variant: DiscriminatorVariant::NonLinear2, hidden: None, dropout: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub embedding: BlockKind,
    pub batch_size: usize,
    /// Subsample each subject's candidate set to at most this many stimuli.
    pub max_candidates: Option<usize>,
    pub candidate_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { embedding: BlockKind::FineGeometric, batch_size: 64, max_candidates: None, candidate_seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataGenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub grl: GrlConfig,
    pub discriminator: DiscriminatorConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale defaults with the teacher sized to the model.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.sync_teacher();
        c
    }

    /// Full-scale model and data sizes.
    pub fn full_scale() -> Self {
        let mut c = Self { model: ModelConfig::full_scale(), ..Self::default() };
        c.train.epochs = 600;
        c.train.batch_size = 24;
        c.train.max_lr = 1e-4;
        c.data.voxel_min = 12_000;
        c.data.voxel_max = 17_000;
        c.sync_teacher();
        c
    }

    /// Copy the model's token counts and width into the teacher config.
    pub fn sync_teacher(&mut self) {
        self.data.teacher.image_tokens = self.model.image_tokens;
        self.data.teacher.text_tokens = self.model.text_tokens;
        self.data.teacher.width = self.model.width;
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Whether the adversarial term participates in training.
    pub fn adversarial_enabled(&self) -> bool {
        self.loss.lambda0 > 0.0 && self.discriminator.variant != DiscriminatorVariant::None
    }

    /// Reject invalid combinations before any compute.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let t = &self.data.teacher;
        if (t.image_tokens, t.text_tokens, t.width)
            != (self.model.image_tokens, self.model.text_tokens, self.model.width)
        {
            return Err(Error::Config(format!(
                "teacher emits ({} + {}) tokens of width {}, model expects ({} + {}) of width {}",
                t.image_tokens,
                t.text_tokens,
                t.width,
                self.model.image_tokens,
                self.model.text_tokens,
                self.model.width
            )));
        }
        if self.loss.lambda1 == 0.0 && self.loss.lambda2 == 0.0 {
            return Err(Error::Config("at least one of lambda1 (MSE) and lambda2 (SoftCLIP) must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.discriminator.dropout) {
            return Err(Error::Config("discriminator dropout must lie in [0, 1)".into()));
        }
        if self.model.arm != Arm::Assist && self.eval.embedding != BlockKind::FineGeometric {
            log::info!(
                "arm {} has no fine blocks; retrieval falls back to the nearest available block",
                self.model.arm.label()
            );
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        if self.model.extractor_mode == ExtractorMode::SubjectSpecific && !self.train.exclude_subjects.is_empty() {
            return Err(Error::Config(
                "subject-specific extractors cannot evaluate held-out subjects; use unified mode for leave-one-subject-out".into(),
            ));
        }
        Ok(())
    }

    /// Checks that need the dataset: grouping fits every subject and the
    /// teacher matches.
    pub fn validate_against(&self, manifest: &DatasetManifest) -> Result<()> {
        let t = &manifest.teacher;
        if (t.image_tokens, t.text_tokens, t.width)
            != (self.model.image_tokens, self.model.text_tokens, self.model.width)
        {
            return Err(Error::Config(format!(
                "dataset teacher has ({} + {}) tokens of width {}, model expects ({} + {}) of width {}",
                t.image_tokens,
                t.text_tokens,
                t.width,
                self.model.image_tokens,
                self.model.text_tokens,
                self.model.width
            )));
        }
        for e in &manifest.subject_entries {
            if e.voxel_count < self.model.groups.max(self.model.group_size) {
                return Err(Error::Config(format!(
                    "subject {} has {} voxels, fewer than max(G={}, K={})",
                    e.subject_id, e.voxel_count, self.model.groups, self.model.group_size
                )));
            }
        }
        for s in &self.train.exclude_subjects {
            if !manifest.subject_entries.iter().any(|e| e.subject_id == *s) {
                return Err(Error::Config(format!("excluded subject {s} is not in the dataset")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}, "loss": {"lambda0": 0.0}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.loss.lambda0, 0.0);
        assert_eq!(c.loss.lambda1, 1e5);
        assert_eq!(c.model, ModelConfig::desk());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn invalid_combinations_rejected() {
        let mut c = RunConfig::desk();
        c.model.width = 60;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.loss.lambda1 = 0.0;
        c.loss.lambda2 = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.model.extractor_mode = ExtractorMode::SubjectSpecific;
        c.train.exclude_subjects = vec![3];
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.model.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_scale_defaults() {
        let c = RunConfig::full_scale();
        assert_eq!((c.model.groups, c.model.group_size, c.model.tokens), (512, 32, 512));
        assert_eq!((c.model.image_tokens, c.model.text_tokens, c.model.width), (257, 77, 768));
        assert_eq!(c.model.context_len(crate::embedder::Branch::Mutual), 846);
        assert_eq!((c.loss.lambda0, c.loss.lambda1, c.loss.lambda2, c.loss.tau), (1.0, 1e5, 1.0, 0.005));
    }
}
