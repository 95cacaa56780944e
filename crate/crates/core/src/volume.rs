//! Dense scalar grids with spacing metadata.
//!
//! A [`Volume`] is stored row-major with the last axis fastest. Two-dimensional
//! volumes are handled internally as three-dimensional ones with a trailing
//! axis of length one, which lets every grid algorithm in the crate be written
//! once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the values of a volume mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeKind {
    Image,
    BinaryMask,
    Sdf,
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    kind: VolumeKind,
    data: Vec<f64>,
}

impl Volume {
    /// Builds a volume with unit spacing.
    pub fn new(shape: &[usize], kind: VolumeKind, data: Vec<f64>) -> Result<Self> {
        Self::with_spacing(shape, &vec![1.0; shape.len()], kind, data)
    }

    pub fn with_spacing(
        shape: &[usize],
        spacing: &[f64],
        kind: VolumeKind,
        data: Vec<f64>,
    ) -> Result<Self> {
        if !(1..=3).contains(&shape.len()) {
            return Err(Error::Shape(format!(
                "volumes have 1 to 3 axes, got {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-length axis in {shape:?}")));
        }
        if spacing.len() != shape.len() {
            return Err(Error::Shape(format!(
                "spacing has {} entries for a {}-axis volume",
                spacing.len(),
                shape.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Shape(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "{} values supplied for shape {shape:?} ({len} voxels)",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            spacing: spacing.to_vec(),
            kind,
            data,
        })
    }

    pub fn filled(shape: &[usize], kind: VolumeKind, value: f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, kind, vec![value; len])
    }

    /// A binary mask from boolean voxels.
    pub fn from_mask(shape: &[usize], mask: &[bool]) -> Result<Self> {
        Self::new(
            shape,
            VolumeKind::BinaryMask,
            mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Shape padded with trailing ones to three axes.
    pub fn extent3(&self) -> [usize; 3] {
        pad3(&self.shape, 1)
    }

    pub fn spacing3(&self) -> [f64; 3] {
        let mut out = [1.0; 3];
        out[..self.spacing.len()].copy_from_slice(&self.spacing);
        out
    }

    /// Relabels the volume without touching its values.
    pub fn with_kind(mut self, kind: VolumeKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn set_spacing(&mut self, spacing: &[f64]) -> Result<()> {
        if spacing.len() != self.shape.len() || spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Shape(format!("bad spacing {spacing:?}")));
        }
        self.spacing = spacing.to_vec();
        Ok(())
    }

    /// Foreground voxels of a mask (any value >= 0.5).
    pub fn to_bools(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v >= 0.5).collect()
    }

    /// Binary mask obtained by thresholding at `level` (value >= level is foreground).
    pub fn threshold(&self, level: f64) -> Volume {
        Volume {
            shape: self.shape.clone(),
            spacing: self.spacing.clone(),
            kind: VolumeKind::BinaryMask,
            data: self
                .data
                .iter()
                .map(|&v| if v >= level { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &Volume) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Checks the value-range invariant of the volume's kind.
    pub fn validate(&self) -> Result<()> {
        let bad = match self.kind {
            VolumeKind::BinaryMask => self.data.iter().position(|&v| v != 0.0 && v != 1.0),
            VolumeKind::Probability => self.data.iter().position(|&v| !(0.0..=1.0).contains(&v)),
            VolumeKind::Sdf => self.data.iter().position(|&v| !(-1.0..=1.0).contains(&v)),
            VolumeKind::Image => self.data.iter().position(|v| !v.is_finite()),
        };
        match bad {
            Some(i) => Err(Error::Domain(format!(
                "{:?} volume has value {} at index {i}",
                self.kind, self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Copies the axis-aligned box starting at `origin` with extent `size`.
    pub fn crop(&self, origin: &[usize], size: &[usize]) -> Result<Volume> {
        if origin.len() != self.ndim() || size.len() != self.ndim() {
            return Err(Error::Shape("crop rank differs from volume rank".into()));
        }
        if origin
            .iter()
            .zip(size)
            .zip(&self.shape)
            .any(|((&o, &s), &n)| s == 0 || o + s > n)
        {
            return Err(Error::Shape(format!(
                "crop {origin:?}+{size:?} exceeds {:?}",
                self.shape
            )));
        }
        let [_, w, d] = self.extent3();
        let o = pad3(origin, 0);
        let s = pad3(size, 1);
        let mut data = Vec::with_capacity(s[0] * s[1] * s[2]);
        for i in 0..s[0] {
            for j in 0..s[1] {
                let start = ((o[0] + i) * w + o[1] + j) * d + o[2];
                data.extend_from_slice(&self.data[start..start + s[2]]);
            }
        }
        Volume::with_spacing(size, &self.spacing, self.kind, data)
    }

    /// Reverses the order of voxels along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Volume> {
        if axis >= self.ndim() {
            return Err(Error::Shape(format!("no axis {axis}")));
        }
        let ext = self.extent3();
        let mut out = self.data.clone();
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                for k in 0..ext[2] {
                    let mut src = [i, j, k];
                    src[axis] = ext[axis] - 1 - src[axis];
                    out[(i * ext[1] + j) * ext[2] + k] =
                        self.data[(src[0] * ext[1] + src[1]) * ext[2] + src[2]];
                }
            }
        }
        Ok(Volume {
            data: out,
            ..self.clone()
        })
    }

    /// Rotates by 90 degrees `quarter_turns` times in the plane of the first
    /// two axes. Both in-plane axes must have equal length.
    pub fn rot90(&self, quarter_turns: usize) -> Result<Volume> {
        if self.ndim() < 2 || self.shape[0] != self.shape[1] {
            return Err(Error::Shape(format!(
                "in-plane rotation needs a square plane, got {:?}",
                self.shape
            )));
        }
        let [n, _, d] = self.extent3();
        let mut cur = self.data.clone();
        for _ in 0..quarter_turns % 4 {
            let mut next = vec![0.0; cur.len()];
            for i in 0..n {
                for j in 0..n {
                    // (i, j) <- (j, n-1-i)
                    let dst = (i * n + j) * d;
                    let src = (j * n + (n - 1 - i)) * d;
                    next[dst..dst + d].copy_from_slice(&cur[src..src + d]);
                }
            }
            cur = next;
        }
        Ok(Volume {
            data: cur,
            ..self.clone()
        })
    }
}

pub(crate) fn pad3<T: Copy>(v: &[T], fill: T) -> [T; 3] {
    let mut out = [fill; 3];
    out[..v.len()].copy_from_slice(v);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Volume {
        let n = shape.iter().product::<usize>();
        Volume::new(shape, VolumeKind::Image, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Volume::new(&[2, 0], VolumeKind::Image, vec![]).is_err());
        assert!(Volume::new(&[2, 2], VolumeKind::Image, vec![0.0; 3]).is_err());
        assert!(Volume::with_spacing(&[2], &[0.0], VolumeKind::Image, vec![0.0; 2]).is_err());
    }

    #[test]
    fn crop_full_volume_is_identity() {
        let v = ramp(&[4, 6]);
        assert_eq!(v.crop(&[0, 0], &[4, 6]).unwrap(), v);
        assert!(v.crop(&[1, 0], &[4, 6]).is_err());
    }

    #[test]
    fn crop_picks_expected_values() {
        let v = ramp(&[3, 4, 2]);
        let c = v.crop(&[1, 2, 1], &[2, 1, 1]).unwrap();
        assert_eq!(c.data(), &[13.0, 21.0]);
    }

    #[test]
    fn flip_is_an_involution() {
        let v = ramp(&[3, 4, 5]);
        for axis in 0..3 {
            let f = v.flip(axis).unwrap();
            assert_ne!(f, v);
            assert_eq!(f.flip(axis).unwrap(), v);
        }
    }

    #[test]
    fn four_quarter_turns_restore() {
        let v = ramp(&[4, 4, 2]);
        let r = v.rot90(1).unwrap();
        assert_ne!(r, v);
        assert_eq!(r.rot90(3).unwrap(), v);
        assert!(ramp(&[3, 4]).rot90(1).is_err());
    }

    #[test]
    fn validate_checks_kind_ranges() {
        let m = Volume::new(&[2], VolumeKind::BinaryMask, vec![0.0, 0.5]).unwrap();
        assert!(m.validate().is_err());
        let p = Volume::new(&[2], VolumeKind::Probability, vec![0.0, 1.0]).unwrap();
        assert!(p.validate().is_ok());
    }
}
