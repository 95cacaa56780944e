//! Sliding-window inference over whole volumes.

use crate::error::{Error, Result};
use crate::model::{ActiveHead, DualHeadNetwork};
use crate::volume::{pad3, Volume, VolumeKind};

/// Anything that maps an image patch to per-voxel foreground probabilities.
pub trait PatchPredictor {
    fn predict_foreground(&self, patch: &Volume) -> Result<Vec<f64>>;
}

impl PatchPredictor for DualHeadNetwork {
    fn predict_foreground(&self, patch: &Volume) -> Result<Vec<f64>> {
        if self.active_head() == ActiveHead::Reg {
            return Err(Error::Config(
                "segmentation head is inactive on this network".into(),
            ));
        }
        let out = self.forward(patch)?;
        Ok(out.foreground().expect("segmentation head active").to_vec())
    }
}

/// Window origins along one axis: multiples of `stride`, plus a final window
/// flush with the end so every voxel is covered.
pub fn window_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("at least one window") != last {
        starts.push(last);
    }
    starts
}

fn check_geometry(shape: &[usize], patch: &[usize], stride: &[usize]) -> Result<()> {
    if patch.len() != shape.len() || stride.len() != shape.len() {
        return Err(Error::Shape(format!(
            "patch {patch:?} / stride {stride:?} rank differs from volume {shape:?}"
        )));
    }
    for ((&n, &p), &s) in shape.iter().zip(patch).zip(stride) {
        if p == 0 || p > n || s == 0 || s > p {
            return Err(Error::Shape(format!(
                "need 0 < stride <= patch <= volume per axis, got stride {stride:?}, patch {patch:?}, volume {shape:?}"
            )));
        }
    }
    Ok(())
}

fn windows(shape: &[usize], patch: &[usize], stride: &[usize]) -> Vec<Vec<usize>> {
    let per_axis: Vec<Vec<usize>> = shape
        .iter()
        .zip(patch)
        .zip(stride)
        .map(|((&n, &p), &s)| window_starts(n, p, s))
        .collect();
    let mut out = vec![Vec::new()];
    for starts in &per_axis {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                starts.iter().map(move |&s| {
                    let mut v = prefix.clone();
                    v.push(s);
                    v
                })
            })
            .collect();
    }
    out
}

fn accumulate(acc: &mut [f64], ext: [usize; 3], origin: &[usize], patch: &[usize], values: &[f64]) {
    let o = pad3(origin, 0);
    let p = pad3(patch, 1);
    let mut idx = 0;
    for i in 0..p[0] {
        for j in 0..p[1] {
            let base = ((o[0] + i) * ext[1] + o[1] + j) * ext[2] + o[2];
            for slot in &mut acc[base..base + p[2]] {
                *slot += values[idx];
                idx += 1;
            }
        }
    }
}

/// Number of windows covering each voxel.
pub fn coverage_counts(shape: &[usize], patch: &[usize], stride: &[usize]) -> Result<Vec<usize>> {
    check_geometry(shape, patch, stride)?;
    let ext = pad3(shape, 1);
    let mut acc = vec![0.0; ext.iter().product()];
    let ones = vec![1.0; patch.iter().product()];
    for origin in windows(shape, patch, stride) {
        accumulate(&mut acc, ext, &origin, patch, &ones);
    }
    Ok(acc.into_iter().map(|c| c as usize).collect())
}

/// Foreground probability of the whole volume, averaging overlapping window
/// predictions by coverage count.
pub fn infer_sliding_window<P: PatchPredictor + ?Sized>(
    model: &P,
    volume: &Volume,
    patch_shape: &[usize],
    stride: &[usize],
) -> Result<Volume> {
    let shape = volume.shape();
    check_geometry(shape, patch_shape, stride)?;
    let ext = volume.extent3();
    let mut sum = vec![0.0; volume.len()];
    let mut count = vec![0.0; volume.len()];
    let ones = vec![1.0; patch_shape.iter().product()];
    for origin in windows(shape, patch_shape, stride) {
        let patch = volume.crop(&origin, patch_shape)?;
        let pred = model.predict_foreground(&patch)?;
        if pred.len() != patch.len() {
            return Err(Error::Shape(format!(
                "predictor returned {} values for a {}-voxel patch",
                pred.len(),
                patch.len()
            )));
        }
        accumulate(&mut sum, ext, &origin, patch_shape, &pred);
        accumulate(&mut count, ext, &origin, patch_shape, &ones);
    }
    let data = sum.iter().zip(&count).map(|(s, c)| s / c).collect();
    Volume::with_spacing(shape, volume.spacing(), VolumeKind::Probability, data)
}
