use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::BatchConfig;
use crate::ensembling::EmaConfig;
use crate::error::{Error, Result};
use crate::geometry::DEFAULT_SHARPNESS;
use crate::model::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "supervised")]
    Supervised,
    #[serde(rename = "mt")]
    MeanTeacher,
    #[serde(rename = "ce-mt-u")]
    CompetitiveUnidirectional,
    #[serde(rename = "ce-mt-b")]
    CompetitiveBidirectional,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Supervised,
        Method::MeanTeacher,
        Method::CompetitiveUnidirectional,
        Method::CompetitiveBidirectional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::MeanTeacher => "mt",
            Method::CompetitiveUnidirectional => "ce-mt-u",
            Method::CompetitiveBidirectional => "ce-mt-b",
        }
    }

    pub fn has_teacher(self) -> bool {
        self != Method::Supervised
    }

    pub fn has_second_student(self) -> bool {
        matches!(
            self,
            Method::CompetitiveUnidirectional | Method::CompetitiveBidirectional
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Seeds of every random stream in a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub sampler: u64,
    pub init: u64,
}

impl Seeds {
    /// All seeds derived from one experiment seed.
    pub fn from_run_seed(data: u64, run: u64) -> Self {
        Self {
            data,
            split: run,
            sampler: 1000 + run,
            init: 2000 + run,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampConfig {
    pub w_max: f64,
    /// Ramp length as a fraction of the total iterations.
    pub fraction: f64,
}

impl Default for RampConfig {
    fn default() -> Self {
        Self {
            w_max: 0.1,
            fraction: 0.25,
        }
    }
}

/// Input perturbation applied to the teacher: clipped Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub std: f64,
    pub clip: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            std: 0.1,
            clip: 0.2,
        }
    }
}

/// Where the Dice losses that drive the competitive weights are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum CompetitionSource {
    /// Labeled part of the current mini-batch.
    Batch,
    /// Every full labeled volume, re-measured every `every` steps.
    FullSet { every: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Defaults to the training patch shape when empty.
    pub patch_shape: Vec<usize>,
    /// Defaults to half the patch shape when empty.
    pub stride: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub iterations: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub schedule_step: usize,
    pub momentum: f64,
    pub network: NetworkConfig,
    pub batch: BatchConfig,
    pub ema: EmaConfig,
    /// Teacher decay during the first steps is `min(1 - 1/(step+1), alpha)`.
    pub ema_warmup: bool,
    pub ramp: RampConfig,
    pub teacher_noise: NoiseConfig,
    pub competition: CompetitionSource,
    pub seeds: Seeds,
    /// Sharpness of the distance-to-mask transform.
    pub sharpness: f64,
    pub inference: InferenceConfig,
    /// Test hook: replaces the second student's Dice loss with a constant.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pin_dice_l2: Option<f64>,
    /// Where to write the offending batch when a loss turns non-finite.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Method::CompetitiveBidirectional)
    }
}

impl TrainConfig {
    /// Desk-scale defaults: 1500 iterations, decay every 625.
    pub fn desk(method: Method) -> Self {
        Self {
            method,
            iterations: 1500,
            lr: 0.01,
            lr_decay: 0.1,
            schedule_step: 625,
            momentum: 0.0,
            network: NetworkConfig::default(),
            batch: BatchConfig::default(),
            ema: EmaConfig::default(),
            ema_warmup: true,
            ramp: RampConfig::default(),
            teacher_noise: NoiseConfig::default(),
            competition: CompetitionSource::Batch,
            seeds: Seeds::default(),
            sharpness: DEFAULT_SHARPNESS,
            inference: InferenceConfig::default(),
            pin_dice_l2: None,
            dump_dir: None,
        }
    }

    /// Iteration schedule of the full-scale protocol: 6000 iterations,
    /// decay every 2500.
    pub fn full_scale(mut self) -> Self {
        self.iterations = 6000;
        self.schedule_step = 2500;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.network.check_patch_shape(&self.batch.patch_shape)?;
        let positive = [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("sharpness", self.sharpness),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.schedule_step == 0 {
            return Err(Error::Config("schedule_step must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch.labeled == 0 {
            return Err(Error::Config("batches need at least one labeled sample".into()));
        }
        if self.method.has_teacher() {
            self.ema.validate()?;
            if self.batch.unlabeled == 0 {
                return Err(Error::Config(format!(
                    "method {} needs unlabeled samples in each batch",
                    self.method
                )));
            }
            if !(self.ramp.w_max >= 0.0) || !(0.0..=1.0).contains(&self.ramp.fraction) {
                return Err(Error::Config("ramp w_max must be >= 0 and fraction in [0, 1]".into()));
            }
        }
        if let CompetitionSource::FullSet { every: 0 } = self.competition {
            return Err(Error::Config("full-set competition interval must be positive".into()));
        }
        if let Some(l) = self.pin_dice_l2 {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("pinned Dice loss {l} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn ramp_length(&self) -> usize {
        (self.ramp.fraction * self.iterations as f64).round() as usize
    }

    pub fn inference_patch(&self) -> Vec<usize> {
        if self.inference.patch_shape.is_empty() {
            self.batch.patch_shape.clone()
        } else {
            self.inference.patch_shape.clone()
        }
    }

    pub fn inference_stride(&self) -> Vec<usize> {
        if self.inference.stride.is_empty() {
            self.inference_patch().iter().map(|&p| (p / 2).max(1)).collect()
        } else {
            self.inference.stride.clone()
        }
    }
}

/// `lr * decay^floor(step / schedule_step)`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    config.lr * config.lr_decay.powi((step / config.schedule_step) as i32)
}
