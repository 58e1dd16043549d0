use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Reduction;
use crate::dataset::{AffineRanges, PAPER_COUNTS};
use crate::error::{Error, Result};
use crate::mixture::MixtureConfig;
use crate::models::ArchProfile;
use crate::trainer::TrainConfig;

pub const DEFAULT_SEED: u64 = 20180412;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Classifier on augmented real data only.
    Baseline,
    /// Baseline plus disentanglement and the mixture-augmented classifier.
    Proposed,
}

/// Everything one experiment depends on, as a flat table so that every field
/// maps to one CLI flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scheme: Scheme,
    pub out_dir: PathBuf,
    /// FFDS file; the synthetic benchmark is generated when unset.
    pub dataset: Option<PathBuf>,
    pub counts: Vec<usize>,
    pub data_seed: Option<u64>,

    pub image_size: usize,
    pub channels: Vec<usize>,
    pub code_dim: usize,
    pub decoder_seed_hw: usize,

    pub k: usize,
    pub val_fraction: f64,

    pub lambda: f64,
    pub epochs_step1: usize,
    pub epochs_step2: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adv_updates_per_gen_update: usize,
    pub early_stop_patience: usize,
    pub views_per_epoch: usize,
    pub step2_views_per_epoch: usize,
    pub step2_batch_size: usize,
    pub decoder_dropout: f64,
    pub reconstruction: Reduction,
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotation_deg: f64,
    pub translation: f64,
    pub recalibrate_bn: bool,

    pub alpha: f64,
    pub synthetic_ratio: f64,
    pub neighbors_per_class: usize,
    /// 0 means every class.
    pub classes_in_mixture: usize,

    pub probe: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let profile = ArchProfile::desk();
        let train = TrainConfig::default();
        let mix = MixtureConfig::default();
        RunConfig {
            seed: DEFAULT_SEED,
            scheme: Scheme::Proposed,
            out_dir: PathBuf::from("runs/default"),
            dataset: None,
            counts: PAPER_COUNTS.to_vec(),
            data_seed: None,
            image_size: profile.image_size,
            channels: profile.channels,
            code_dim: profile.code_dim,
            decoder_seed_hw: profile.decoder_seed_hw,
            k: 3,
            val_fraction: 0.3,
            lambda: train.lambda,
            epochs_step1: train.epochs_step1,
            epochs_step2: train.epochs_step2,
            batch_size: train.batch_size,
            lr: train.lr,
            adv_updates_per_gen_update: train.adv_updates_per_gen_update,
            early_stop_patience: train.early_stop_patience,
            views_per_epoch: train.views_per_epoch,
            step2_views_per_epoch: train.step2_views_per_epoch,
            step2_batch_size: train.step2_batch_size,
            decoder_dropout: train.decoder_dropout,
            reconstruction: train.reconstruction,
            scale_min: train.augment.scale.0,
            scale_max: train.augment.scale.1,
            rotation_deg: train.augment.rotation_deg,
            translation: train.augment.translation,
            recalibrate_bn: train.recalibrate_bn,
            alpha: mix.alpha,
            synthetic_ratio: mix.synthetic_ratio,
            neighbors_per_class: mix.neighbors_per_class,
            classes_in_mixture: 0,
            probe: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// Architecture for `class_count` classes.
    pub fn profile(&self, class_count: usize) -> ArchProfile {
        ArchProfile {
            image_size: self.image_size,
            channels: self.channels.clone(),
            code_dim: self.code_dim,
            decoder_seed_hw: self.decoder_seed_hw,
            class_count,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            epochs_step1: self.epochs_step1,
            epochs_step2: self.epochs_step2,
            batch_size: self.batch_size,
            lr: self.lr,
            adv_updates_per_gen_update: self.adv_updates_per_gen_update,
            seed,
            early_stop_patience: self.early_stop_patience,
            views_per_epoch: self.views_per_epoch,
            step2_views_per_epoch: self.step2_views_per_epoch,
            step2_batch_size: self.step2_batch_size,
            decoder_dropout: self.decoder_dropout,
            reconstruction: self.reconstruction,
            augment: AffineRanges {
                scale: (self.scale_min, self.scale_max),
                rotation_deg: self.rotation_deg,
                translation: self.translation,
            },
            recalibrate_bn: self.recalibrate_bn,
        }
    }

    pub fn mixture_config(&self) -> MixtureConfig {
        MixtureConfig {
            alpha: self.alpha,
            synthetic_ratio: self.synthetic_ratio,
            neighbors_per_class: self.neighbors_per_class,
            classes_in_mixture: (self.classes_in_mixture > 0).then_some(self.classes_in_mixture),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return Err(Error::Config(format!(
                "val_fraction {} must lie in (0, 1)",
                self.val_fraction
            )));
        }
        if self.dataset.is_none() && self.counts.len() < 2 {
            return Err(Error::Config("synthetic counts need at least 2 classes".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config("scale range must satisfy 0 < scale_min <= scale_max".into()));
        }
        if self.rotation_deg < 0.0 || !(0.0..0.5).contains(&self.translation) {
            return Err(Error::Config("rotation and translation ranges must be nonnegative".into()));
        }
        self.profile(self.counts.len().max(2)).validate()?;
        self.train_config(self.seed).validate()?;
        if self.scheme == Scheme::Proposed {
            self.mixture_config().validate()?;
            if self.epochs_step2 == 0 {
                return Err(Error::Config("the proposed scheme needs epochs_step2 > 0".into()));
            }
        }
        Ok(())
    }
}
