//! Conversions between binary masks and signed distance maps, and surface
//! extraction for boundary metrics.
//!
//! Distances are exact Euclidean distances in spacing units, computed with the
//! separable lower-envelope transform of Felzenszwalb and Huttenlocher: one
//! pass of 1D squared-distance envelopes per axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

/// Default sharpness of the distance-to-mask sigmoid.
pub const DEFAULT_SHARPNESS: f64 = 1500.0;

/// Largest exponent handed to `exp`; keeps the sigmoid finite at any sharpness.
const MAX_EXPONENT: f64 = 700.0;

/// Voxel coordinates of a mask's boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacePointSet {
    /// Index triples; trailing components are 0 for volumes with fewer axes.
    pub points: Vec<[usize; 3]>,
    pub spacing: [f64; 3],
    pub extent: [usize; 3],
}

impl SurfacePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Boolean grid with `true` at every surface point.
    pub fn to_grid(&self) -> Vec<bool> {
        let [_, w, d] = self.extent;
        let mut grid = vec![false; self.extent.iter().product()];
        for p in &self.points {
            grid[(p[0] * w + p[1]) * d + p[2]] = true;
        }
        grid
    }
}

/// Foreground voxels that have at least one background face-neighbour.
/// Voxels outside the grid do not count as background.
pub(crate) fn boundary_grid(mask: &[bool], ext: [usize; 3]) -> Vec<bool> {
    let [h, w, d] = ext;
    let mut out = vec![false; mask.len()];
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let idx = (i * w + j) * d + k;
                if !mask[idx] {
                    continue;
                }
                let bg = |ii: usize, jj: usize, kk: usize| !mask[(ii * w + jj) * d + kk];
                out[idx] = (i > 0 && bg(i - 1, j, k))
                    || (i + 1 < h && bg(i + 1, j, k))
                    || (j > 0 && bg(i, j - 1, k))
                    || (j + 1 < w && bg(i, j + 1, k))
                    || (k > 0 && bg(i, j, k - 1))
                    || (k + 1 < d && bg(i, j, k + 1));
            }
        }
    }
    out
}

/// Squared Euclidean distance from every voxel to the nearest `true` voxel of
/// `features`, in spacing units. Voxels get `f64::INFINITY` when no feature
/// exists.
pub fn squared_distance_transform(features: &[bool], ext: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut dist: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [ext[1] * ext[2], ext[2], 1];
    let longest = *ext.iter().max().unwrap_or(&1);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut scratch = Envelope::with_capacity(longest);

    for axis in 0..3 {
        let n = ext[axis];
        if n == 1 {
            continue;
        }
        let stride = strides[axis];
        // Enumerate the starting index of every line along `axis`.
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..ext[others[0]] {
            for b in 0..ext[others[1]] {
                let start = a * strides[others[0]] + b * strides[others[1]];
                for (q, slot) in line[..n].iter_mut().enumerate() {
                    *slot = dist[start + q * stride];
                }
                scratch.transform(&line[..n], spacing[axis], &mut out[..n]);
                for (q, &v) in out[..n].iter().enumerate() {
                    dist[start + q * stride] = v;
                }
            }
        }
    }
    dist
}

struct Envelope {
    vertices: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            vertices: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    /// out[q] = min_p ((q - p) * s)^2 + f[p]
    fn transform(&mut self, f: &[f64], s: f64, out: &mut [f64]) {
        self.vertices.clear();
        self.bounds.clear();
        let s2 = s * s;
        let intersect = |p: usize, q: usize| -> f64 {
            let (pf, qf) = (p as f64, q as f64);
            ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf))
        };
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            if self.vertices.is_empty() {
                self.vertices.push(q);
                self.bounds.push(f64::NEG_INFINITY);
                continue;
            }
            loop {
                let v = *self.vertices.last().unwrap();
                let x = intersect(v, q);
                if x <= *self.bounds.last().unwrap() {
                    self.vertices.pop();
                    self.bounds.pop();
                    if self.vertices.is_empty() {
                        self.vertices.push(q);
                        self.bounds.push(f64::NEG_INFINITY);
                        break;
                    }
                } else {
                    self.vertices.push(q);
                    self.bounds.push(x);
                    break;
                }
            }
        }
        if self.vertices.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, slot) in out.iter_mut().enumerate() {
            while k + 1 < self.vertices.len() && self.bounds[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.vertices[k];
            let delta = (q as f64 - p as f64) * s;
            *slot = delta * delta + f[p];
        }
    }
}

fn binary_voxels(mask: &Volume) -> Result<Vec<bool>> {
    mask.data()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(Error::Domain(format!("mask value {v} is not 0 or 1")))
            }
        })
        .collect()
}

/// Signed distance to the boundary in spacing units, before normalisation:
/// negative inside, zero on boundary voxels, positive outside.
pub fn signed_distance_raw(mask: &Volume) -> Result<Vec<f64>> {
    let fg = binary_voxels(mask)?;
    let count = fg.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::DegenerateMask(0));
    }
    if count == fg.len() {
        return Err(Error::DegenerateMask(1));
    }
    let ext = mask.extent3();
    let boundary = boundary_grid(&fg, ext);
    let sq = squared_distance_transform(&boundary, ext, mask.spacing3());
    Ok(sq
        .iter()
        .zip(&fg)
        .map(|(&d2, &inside)| {
            let d = d2.sqrt();
            if inside {
                -d
            } else {
                d
            }
        })
        .collect())
}

/// Signed distance map scaled into [-1, 1] by the largest absolute distance.
pub fn mask_to_sdf(mask: &Volume) -> Result<Volume> {
    let raw = signed_distance_raw(mask)?;
    let max_abs = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let data = raw.into_iter().map(|v| v / max_abs).collect();
    Volume::with_spacing(mask.shape(), mask.spacing(), VolumeKind::Sdf, data)
}

/// Like [`mask_to_sdf`], but degenerate masks map to the constant volume +1
/// (empty) or -1 (full).
pub fn mask_to_sdf_or_constant(mask: &Volume) -> Result<Volume> {
    match mask_to_sdf(mask) {
        Err(Error::DegenerateMask(v)) => {
            let fill = if v == 0 { 1.0 } else { -1.0 };
            let mut out = Volume::filled(mask.shape(), VolumeKind::Sdf, fill)?;
            out.set_spacing(mask.spacing())?;
            Ok(out)
        }
        other => other,
    }
}

/// Smooth inverse of the distance map: `1 / (1 + exp(k z))`, close to 1
/// inside the object (z < 0) and close to 0 outside.
pub fn sdf_to_mask_value(z: f64, k: f64) -> f64 {
    1.0 / (1.0 + (k * z).clamp(-MAX_EXPONENT, MAX_EXPONENT).exp())
}

/// Derivative of [`sdf_to_mask_value`] with respect to `z`.
pub fn sdf_to_mask_derivative(z: f64, k: f64) -> f64 {
    let m = sdf_to_mask_value(z, k);
    -k * m * (1.0 - m)
}

pub fn sdf_to_mask(sdf: &Volume, k: f64) -> Result<Volume> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Domain(format!("sharpness must be positive, got {k}")));
    }
    let data = sdf.data().iter().map(|&z| sdf_to_mask_value(z, k)).collect();
    Volume::with_spacing(sdf.shape(), sdf.spacing(), VolumeKind::Probability, data)
}

/// All foreground voxels with a background face-neighbour. Empty for all-0 and
/// all-1 masks.
pub fn extract_surface(mask: &Volume) -> Result<SurfacePointSet> {
    let fg = binary_voxels(mask)?;
    let ext = mask.extent3();
    let boundary = boundary_grid(&fg, ext);
    let [_, w, d] = ext;
    let points = boundary
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(idx, _)| [idx / (w * d), (idx / d) % w, idx % d])
        .collect();
    Ok(SurfacePointSet {
        points,
        spacing: mask.spacing3(),
        extent: ext,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(shape: &[usize], bits: &[u8]) -> Volume {
        Volume::new(
            shape,
            VolumeKind::BinaryMask,
            bits.iter().map(|&b| b as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn one_dimensional_segment() {
        let m = mask(&[5], &[0, 1, 1, 1, 0]);
        assert_eq!(signed_distance_raw(&m).unwrap(), vec![1.0, 0.0, -1.0, 0.0, 1.0]);
        assert_eq!(mask_to_sdf(&m).unwrap().data(), &[1.0, 0.0, -1.0, 0.0, 1.0]);
        let s = extract_surface(&m).unwrap();
        assert_eq!(s.points, vec![[1, 0, 0], [3, 0, 0]]);
    }

    #[test]
    fn single_center_voxel() {
        let m = mask(&[3, 3], &[0, 0, 0, 0, 1, 0, 0, 0, 0]);
        let raw = signed_distance_raw(&m).unwrap();
        assert_eq!(raw[4], 0.0);
        for corner in [0, 2, 6, 8] {
            assert!((raw[corner] - 2f64.sqrt()).abs() < 1e-15);
        }
        assert_eq!(raw[1], 1.0);
    }

    #[test]
    fn ring_mask_is_zero_on_foreground() {
        #[rustfmt::skip]
        let m = mask(&[5, 5], &[
            0, 0, 0, 0, 0,
            0, 1, 1, 1, 0,
            0, 1, 0, 1, 0,
            0, 1, 1, 1, 0,
            0, 0, 0, 0, 0,
        ]);
        let raw = signed_distance_raw(&m).unwrap();
        for (v, b) in raw.iter().zip(m.data()) {
            if *b == 1.0 {
                assert_eq!(*v, 0.0);
            } else {
                assert!(*v > 0.0);
            }
        }
    }

    #[test]
    fn square_perimeter() {
        let mut bits = vec![0u8; 25];
        for i in 1..4 {
            for j in 1..4 {
                bits[i * 5 + j] = 1;
            }
        }
        let s = extract_surface(&mask(&[5, 5], &bits)).unwrap();
        assert_eq!(s.len(), 8);
        assert!(!s.points.contains(&[2, 2, 0]));
    }

    #[test]
    fn degenerate_masks() {
        let full = mask(&[2, 2], &[1, 1, 1, 1]);
        let empty = mask(&[2, 2], &[0, 0, 0, 0]);
        assert!(matches!(mask_to_sdf(&full), Err(Error::DegenerateMask(1))));
        assert!(matches!(mask_to_sdf(&empty), Err(Error::DegenerateMask(0))));
        assert!(extract_surface(&full).unwrap().is_empty());
        assert!(extract_surface(&empty).unwrap().is_empty());
        assert_eq!(mask_to_sdf_or_constant(&full).unwrap().data(), &[-1.0; 4]);
        assert_eq!(mask_to_sdf_or_constant(&empty).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let m = Volume::new(&[2], VolumeKind::BinaryMask, vec![0.0, 0.3]).unwrap();
        assert!(matches!(mask_to_sdf(&m), Err(Error::Domain(_))));
    }

    #[test]
    fn spacing_scales_distances() {
        let m = Volume::with_spacing(
            &[5],
            &[2.5],
            VolumeKind::BinaryMask,
            vec![0.0, 1.0, 1.0, 1.0, 0.0],
        )
        .unwrap();
        assert_eq!(signed_distance_raw(&m).unwrap(), vec![2.5, 0.0, -2.5, 0.0, 2.5]);
    }

    #[test]
    fn inverse_transform_values() {
        assert_eq!(sdf_to_mask_value(0.0, 1500.0), 0.5);
        assert!(sdf_to_mask_value(-1.0, 1500.0) >= 1.0 - 1e-6);
        assert!(sdf_to_mask_value(1.0, 1500.0) <= 1e-6);
        assert!(sdf_to_mask_value(1e9, 1e9).is_finite());
        let sdf = Volume::new(&[2], VolumeKind::Sdf, vec![0.0, 0.0]).unwrap();
        assert!(sdf_to_mask(&sdf, 0.0).is_err());
    }

    #[test]
    fn inverse_derivative_matches_difference() {
        let (z, k, h) = (0.013, 40.0, 1e-6);
        let fd = (sdf_to_mask_value(z + h, k) - sdf_to_mask_value(z - h, k)) / (2.0 * h);
        assert!((fd - sdf_to_mask_derivative(z, k)).abs() < 1e-6);
    }
}
