use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_volume, Sample, SamplePool, SyntheticConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub partition: Partition,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
}

/// Labeled/unlabeled roles of the training samples under one split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub n_labeled: usize,
    pub seed: u64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: SyntheticConfig,
    pub n_test: usize,
    pub samples: Vec<ManifestEntry>,
    pub splits: Vec<SplitEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reads every listed volume; returns the train and test pools in
    /// manifest order.
    pub fn load_pools(&self, dir: &Path) -> Result<(SamplePool, SamplePool)> {
        let mut train = SamplePool::default();
        let mut test = SamplePool::default();
        for e in &self.samples {
            let image = load_volume(&dir.join(&e.image))?;
            let mask = load_volume(&dir.join(&e.mask))?;
            if image.shape() != mask.shape() {
                return Err(Error::Format(format!("{}: image and mask shapes differ", e.id)));
            }
            let s = Sample {
                id: e.id.clone(),
                image,
                mask,
            };
            match e.partition {
                Partition::Train => train.samples.push(s),
                Partition::Test => test.samples.push(s),
            }
        }
        Ok((train, test))
    }
}
