//! On-disk dataset: VSEG1 volumes plus a hashed manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cemt_core::data::{
    generate_with, split, write_volume, DatasetManifest, ManifestEntry, Partition, SamplePool, SemiDataset, SplitEntry,
};
use cemt_core::trainer::Seeds;
use cemt_core::volume::Volume;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::spec::ExperimentSpec;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("hash mismatch for {path}: expected {expected}, found {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("existing manifest {0} was produced by a different dataset spec")]
    ManifestMismatch(PathBuf),
    #[error("split of {n_labeled} labeled samples with seed {seed} is not listed in the manifest")]
    MissingSplit { n_labeled: usize, seed: u64 },
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct GenerateSummary {
    pub written: usize,
    pub verified: usize,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(v: &Volume) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_volume(&mut buf, v)?;
    Ok(buf)
}

fn check_hash(path: &Path, expected: &str) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let found = sha256_hex(&bytes);
    if found != expected {
        return Err(DatasetError::HashMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found,
        }
        .into());
    }
    Ok(())
}

/// Writes `bytes` unless an identical file is already present.
fn put(path: &Path, bytes: &[u8], summary: &mut GenerateSummary) -> Result<String> {
    let hash = sha256_hex(bytes);
    if path.exists() {
        check_hash(path, &hash)?;
        summary.verified += 1;
    } else {
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        summary.written += 1;
    }
    Ok(hash)
}

/// Generates the dataset described by `spec` into `dir`. Existing files are
/// verified against their expected hashes instead of being rewritten.
pub fn generate(spec: &ExperimentSpec, dir: &Path) -> Result<GenerateSummary> {
    let generator = spec.generator()?;
    let pool = generate_with(&generator)?;
    let (train, _) = pool.clone().partition(spec.dataset.n_test)?;
    fs::create_dir_all(dir.join("volumes")).with_context(|| format!("creating {}", dir.display()))?;

    let mut summary = GenerateSummary::default();
    let n_train = train.len();
    let mut samples = Vec::with_capacity(pool.len());
    for (i, s) in pool.samples.iter().enumerate() {
        let image = format!("volumes/{}_image.vseg", s.id);
        let mask = format!("volumes/{}_mask.vseg", s.id);
        samples.push(ManifestEntry {
            id: s.id.clone(),
            partition: if i < n_train { Partition::Train } else { Partition::Test },
            image_sha256: put(&dir.join(&image), &encode(&s.image)?, &mut summary)?,
            mask_sha256: put(&dir.join(&mask), &encode(&s.mask)?, &mut summary)?,
            image,
            mask,
        });
    }

    let mut splits = Vec::new();
    for &n_labeled in &spec.splits {
        for &seed in &spec.seeds {
            let seed = Seeds::from_run_seed(spec.dataset.seed, seed).split;
            let d = split(&train, n_labeled, seed)?;
            splits.push(SplitEntry {
                n_labeled,
                seed,
                labeled: d.labeled.iter().map(|s| s.id.clone()).collect(),
                unlabeled: d.unlabeled.iter().map(|s| s.id.clone()).collect(),
            });
        }
    }

    let manifest = DatasetManifest {
        generator,
        n_test: spec.dataset.n_test,
        samples,
        splits,
    };
    let path = dir.join(MANIFEST);
    if path.exists() {
        let existing = DatasetManifest::load(&path)?;
        if existing != manifest {
            return Err(DatasetError::ManifestMismatch(path).into());
        }
        summary.verified += 1;
    } else {
        manifest.save(&path)?;
        summary.written += 1;
    }
    Ok(summary)
}

/// A verified dataset loaded back from disk.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub train: SamplePool,
    pub test: SamplePool,
}

impl LoadedDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let manifest =
            DatasetManifest::load(&path).with_context(|| format!("loading dataset manifest {}", path.display()))?;
        for e in &manifest.samples {
            check_hash(&dir.join(&e.image), &e.image_sha256)?;
            check_hash(&dir.join(&e.mask), &e.mask_sha256)?;
        }
        let (train, test) = manifest.load_pools(dir)?;
        Ok(Self { manifest, train, test })
    }

    /// The labeled/unlabeled split recorded in the manifest.
    pub fn split(&self, n_labeled: usize, seed: u64) -> Result<SemiDataset> {
        let entry = self
            .manifest
            .splits
            .iter()
            .find(|s| s.n_labeled == n_labeled && s.seed == seed)
            .ok_or(DatasetError::MissingSplit { n_labeled, seed })?;
        let d = split(&self.train, n_labeled, seed)?;
        let ids: Vec<&str> = d.labeled.iter().map(|s| s.id.as_str()).collect();
        anyhow::ensure!(
            ids == entry.labeled.iter().map(String::as_str).collect::<Vec<_>>(),
            "labeled samples of split {n_labeled}/{seed} disagree with the manifest"
        );
        Ok(d)
    }
}
