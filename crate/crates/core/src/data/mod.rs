//! Datasets: synthetic generation, labeled/unlabeled splitting, patch
//! sampling with augmentation, and on-disk formats.

mod io;
mod manifest;
mod synthetic;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::mask_to_sdf_or_constant;
use crate::volume::Volume;

pub use io::{load_volume, read_volume, save_volume, write_volume};
pub use manifest::{DatasetManifest, ManifestEntry, Partition, SplitEntry};
pub use synthetic::{generate_synthetic, generate_with, SyntheticConfig};

/// Independent random stream `stream` of the master seed.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// An image with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Volume,
    pub mask: Volume,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SamplePool {
    pub samples: Vec<Sample>,
}

impl SamplePool {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `n_test` samples as a held-out test pool.
    pub fn partition(mut self, n_test: usize) -> Result<(SamplePool, SamplePool)> {
        if n_test > self.samples.len() {
            return Err(Error::Split(format!(
                "{n_test} test samples requested from a pool of {}",
                self.samples.len()
            )));
        }
        let test = self.samples.split_off(self.samples.len() - n_test);
        Ok((self, SamplePool { samples: test }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: Volume,
    pub mask: Volume,
}

/// Unlabeled entries carry no mask.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub id: String,
    pub image: Volume,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiDataset {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
    pub split: SplitSpec,
    held_out_masks: Vec<Volume>,
}

impl SemiDataset {
    /// Ground truth of the unlabeled samples, for offline evaluation only.
    pub fn unlabeled_oracle_masks(&self) -> &[Volume] {
        &self.held_out_masks
    }

    /// Same split with the unlabeled part dropped.
    pub fn labeled_only(&self) -> SemiDataset {
        SemiDataset {
            labeled: self.labeled.clone(),
            unlabeled: Vec::new(),
            split: SplitSpec {
                n_unlabeled: 0,
                ..self.split
            },
            held_out_masks: Vec::new(),
        }
    }
}

/// Deterministic shuffle of the pool, then the first `n_labeled` samples
/// become labeled and the rest unlabeled.
pub fn split(pool: &SamplePool, n_labeled: usize, seed: u64) -> Result<SemiDataset> {
    if n_labeled == 0 {
        return Err(Error::Split("at least one labeled sample is required".into()));
    }
    if n_labeled > pool.len() {
        return Err(Error::Split(format!(
            "{n_labeled} labeled samples requested from a pool of {}",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut sample_rng(seed, 0));
    let (lab, unlab) = order.split_at(n_labeled);
    let labeled = lab
        .iter()
        .map(|&i| {
            let s = &pool.samples[i];
            LabeledSample {
                id: s.id.clone(),
                image: s.image.clone(),
                mask: s.mask.clone(),
            }
        })
        .collect();
    let unlabeled = unlab
        .iter()
        .map(|&i| UnlabeledSample {
            id: pool.samples[i].id.clone(),
            image: pool.samples[i].image.clone(),
        })
        .collect();
    Ok(SemiDataset {
        labeled,
        unlabeled,
        split: SplitSpec {
            n_labeled,
            n_unlabeled: unlab.len(),
            seed,
        },
        held_out_masks: unlab.iter().map(|&i| pool.samples[i].mask.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub patch_shape: Vec<usize>,
    pub labeled: usize,
    pub unlabeled: usize,
    pub augment: bool,
    /// Crop distance targets from the full-volume map instead of recomputing
    /// them on the augmented patch.
    pub sdf_from_full_volume: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            patch_shape: vec![64, 64],
            labeled: 2,
            unlabeled: 2,
            augment: true,
            sdf_from_full_volume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub labeled_images: Vec<Volume>,
    pub labeled_masks: Vec<Volume>,
    pub labeled_sdfs: Vec<Volume>,
    pub unlabeled_images: Vec<Volume>,
    pub patch_shape: Vec<usize>,
}

impl PatchBatch {
    /// Labeled images followed by unlabeled images.
    pub fn inputs(&self) -> impl Iterator<Item = &Volume> {
        self.labeled_images.iter().chain(&self.unlabeled_images)
    }

    pub fn len(&self) -> usize {
        self.labeled_images.len() + self.unlabeled_images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A random crop position plus flip/rotation choice, applied identically to
/// every volume of one sample.
struct Transform {
    origin: Vec<usize>,
    flips: Vec<bool>,
    quarter_turns: usize,
}

impl Transform {
    fn draw<R: Rng>(rng: &mut R, shape: &[usize], patch: &[usize], augment: bool) -> Self {
        let origin = shape
            .iter()
            .zip(patch)
            .map(|(&n, &p)| rng.gen_range(0..=n - p))
            .collect();
        let (flips, quarter_turns) = if augment {
            let flips = (0..shape.len()).map(|_| rng.gen_bool(0.5)).collect();
            let turns = if patch[0] == patch[1] { rng.gen_range(0..4) } else { 0 };
            (flips, turns)
        } else {
            (vec![false; shape.len()], 0)
        };
        Self {
            origin,
            flips,
            quarter_turns,
        }
    }

    fn apply(&self, v: &Volume, patch: &[usize]) -> Result<Volume> {
        let mut out = v.crop(&self.origin, patch)?;
        for (axis, &f) in self.flips.iter().enumerate() {
            if f {
                out = out.flip(axis)?;
            }
        }
        if self.quarter_turns > 0 {
            out = out.rot90(self.quarter_turns)?;
        }
        Ok(out)
    }
}

fn check_patch(shape: &[usize], patch: &[usize]) -> Result<()> {
    if shape.len() != patch.len() || shape.iter().zip(patch).any(|(&n, &p)| p == 0 || p > n) {
        return Err(Error::Shape(format!("patch {patch:?} does not fit volume {shape:?}")));
    }
    Ok(())
}

/// Draws one batch: labeled samples with mask and distance target, plus
/// unlabeled images. Sampling is with replacement.
pub fn sample_batch<R: Rng>(dataset: &SemiDataset, cfg: &BatchConfig, rng: &mut R) -> Result<PatchBatch> {
    let patch = &cfg.patch_shape;
    if dataset.labeled.is_empty() && cfg.labeled > 0 {
        return Err(Error::Split("no labeled samples to draw from".into()));
    }
    let mut batch = PatchBatch {
        labeled_images: Vec::with_capacity(cfg.labeled),
        labeled_masks: Vec::with_capacity(cfg.labeled),
        labeled_sdfs: Vec::with_capacity(cfg.labeled),
        unlabeled_images: Vec::with_capacity(cfg.unlabeled),
        patch_shape: patch.clone(),
    };
    for _ in 0..cfg.labeled {
        let s = &dataset.labeled[rng.gen_range(0..dataset.labeled.len())];
        check_patch(s.image.shape(), patch)?;
        let t = Transform::draw(rng, s.image.shape(), patch, cfg.augment);
        let mask = t.apply(&s.mask, patch)?;
        let sdf = if cfg.sdf_from_full_volume {
            t.apply(&mask_to_sdf_or_constant(&s.mask)?, patch)?
        } else {
            mask_to_sdf_or_constant(&mask)?
        };
        batch.labeled_images.push(t.apply(&s.image, patch)?);
        batch.labeled_masks.push(mask);
        batch.labeled_sdfs.push(sdf);
    }
    if !dataset.unlabeled.is_empty() {
        for _ in 0..cfg.unlabeled {
            let s = &dataset.unlabeled[rng.gen_range(0..dataset.unlabeled.len())];
            check_patch(s.image.shape(), patch)?;
            let t = Transform::draw(rng, s.image.shape(), patch, cfg.augment);
            batch.unlabeled_images.push(t.apply(&s.image, patch)?);
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mask_to_sdf;

    fn pool() -> SamplePool {
        generate_synthetic(11, 20, &[16, 16], 2).unwrap()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let p = pool();
        let ds = split(&p, 4, 1).unwrap();
        assert_eq!(ds.labeled.len(), 4);
        assert_eq!(ds.unlabeled.len(), 16);
        assert_eq!(ds.unlabeled_oracle_masks().len(), 16);
        for l in &ds.labeled {
            assert!(ds.unlabeled.iter().all(|u| u.id != l.id));
        }
        assert_eq!(split(&p, 4, 1).unwrap(), ds);
        assert_ne!(split(&p, 4, 2).unwrap().labeled[0].id, ds.labeled[0].id);
        assert!(matches!(split(&p, 0, 1), Err(Error::Split(_))));
        assert!(matches!(split(&p, 21, 1), Err(Error::Split(_))));
    }

    #[test]
    fn labeled_unlabeled_ratios() {
        let big = generate_synthetic(0, 100, &[8, 8], 2).unwrap();
        let (train, test) = big.partition(20).unwrap();
        assert_eq!(test.len(), 20);
        let a = split(&train, 16, 0).unwrap();
        assert_eq!((a.labeled.len(), a.unlabeled.len()), (16, 64));
        let b = split(&train, 8, 0).unwrap();
        assert_eq!((b.labeled.len(), b.unlabeled.len()), (8, 72));
    }

    #[test]
    fn full_volume_patch_without_augmentation_is_identity() {
        let ds = split(&pool(), 1, 0).unwrap();
        let cfg = BatchConfig {
            patch_shape: vec![16, 16],
            labeled: 1,
            unlabeled: 1,
            augment: false,
            sdf_from_full_volume: false,
        };
        let b = sample_batch(&ds, &cfg, &mut sample_rng(0, 0)).unwrap();
        assert_eq!(b.labeled_images[0], ds.labeled[0].image);
        assert_eq!(b.labeled_masks[0], ds.labeled[0].mask);
        assert_eq!(b.labeled_sdfs[0], mask_to_sdf(&ds.labeled[0].mask).unwrap());
    }

    #[test]
    fn default_batch_composition_and_alignment() {
        let ds = split(&pool(), 4, 0).unwrap();
        let cfg = BatchConfig {
            patch_shape: vec![8, 8],
            ..BatchConfig::default()
        };
        let mut rng = sample_rng(5, 1);
        for _ in 0..10 {
            let b = sample_batch(&ds, &cfg, &mut rng).unwrap();
            assert_eq!(b.labeled_images.len(), 2);
            assert_eq!(b.unlabeled_images.len(), 2);
            for (m, s) in b.labeled_masks.iter().zip(&b.labeled_sdfs) {
                assert_eq!(s, &mask_to_sdf_or_constant(m).unwrap());
            }
        }
    }

    #[test]
    fn augmented_patch_is_a_transformed_crop_of_its_source() {
        // With an all-encompassing patch, the labeled mask must stay a flip or
        // rotation of one of the labeled masks.
        let ds = split(&pool(), 2, 0).unwrap();
        let cfg = BatchConfig {
            patch_shape: vec![16, 16],
            labeled: 1,
            unlabeled: 0,
            ..BatchConfig::default()
        };
        let mut rng = sample_rng(2, 2);
        for _ in 0..8 {
            let b = sample_batch(&ds, &cfg, &mut rng).unwrap();
            let fg = b.labeled_masks[0].data().iter().sum::<f64>();
            assert!(ds.labeled.iter().any(|l| l.mask.data().iter().sum::<f64>() == fg));
        }
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let ds = split(&pool(), 2, 0).unwrap();
        let cfg = BatchConfig {
            patch_shape: vec![32, 16],
            ..BatchConfig::default()
        };
        assert!(matches!(
            sample_batch(&ds, &cfg, &mut sample_rng(0, 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn batches_are_reproducible() {
        let ds = split(&pool(), 4, 0).unwrap();
        let cfg = BatchConfig {
            patch_shape: vec![8, 8],
            ..BatchConfig::default()
        };
        let mut r1 = sample_rng(9, 3);
        let mut r2 = sample_rng(9, 3);
        for _ in 0..5 {
            assert_eq!(
                sample_batch(&ds, &cfg, &mut r1).unwrap(),
                sample_batch(&ds, &cfg, &mut r2).unwrap()
            );
        }
    }
}
