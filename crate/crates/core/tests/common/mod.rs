//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use cemt_core::volume::{Volume, VolumeKind};
use rand::Rng;

pub fn coords(shape: &[usize]) -> Vec<[usize; 3]> {
    let e = [
        shape[0],
        shape.get(1).copied().unwrap_or(1),
        shape.get(2).copied().unwrap_or(1),
    ];
    let mut out = Vec::new();
    for i in 0..e[0] {
        for j in 0..e[1] {
            for k in 0..e[2] {
                out.push([i, j, k]);
            }
        }
    }
    out
}

fn spacing3(spacing: &[f64]) -> [f64; 3] {
    [
        spacing[0],
        spacing.get(1).copied().unwrap_or(1.0),
        spacing.get(2).copied().unwrap_or(1.0),
    ]
}

/// Foreground voxels that touch an in-bounds background voxel across a face.
pub fn boundary(mask: &Volume) -> Vec<[usize; 3]> {
    let pts = coords(mask.shape());
    let fg: std::collections::HashSet<[usize; 3]> = pts
        .iter()
        .zip(mask.data())
        .filter(|(_, &v)| v >= 0.5)
        .map(|(p, _)| *p)
        .collect();
    let all: std::collections::HashSet<[usize; 3]> = pts.iter().copied().collect();
    let mut out = Vec::new();
    for p in &pts {
        if !fg.contains(p) {
            continue;
        }
        let mut touches = false;
        for axis in 0..3 {
            for delta in [-1isize, 1] {
                let q = p[axis] as isize + delta;
                if q < 0 {
                    continue;
                }
                let mut n = *p;
                n[axis] = q as usize;
                if all.contains(&n) && !fg.contains(&n) {
                    touches = true;
                }
            }
        }
        if touches {
            out.push(*p);
        }
    }
    out
}

pub fn dist(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| ((a[i] as f64 - b[i] as f64) * s[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Signed distance to the nearest boundary voxel by exhaustive search.
pub fn signed_distance(mask: &Volume) -> Vec<f64> {
    let b = boundary(mask);
    let s = spacing3(mask.spacing());
    coords(mask.shape())
        .iter()
        .zip(mask.data())
        .map(|(&p, &v)| {
            let d = b.iter().map(|&q| dist(p, q, s)).fold(f64::INFINITY, f64::min);
            if v >= 0.5 {
                -d
            } else {
                d
            }
        })
        .collect()
}

/// Closest-point distances from each surface point of `a` to the surface of
/// `b`, and back, by exhaustive search.
pub fn surface_distances(a: &Volume, b: &Volume, spacing: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s = spacing3(spacing);
    let sa = boundary(a);
    let sb = boundary(b);
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|&p| to.iter().map(|&q| dist(p, q, s)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    (directed(&sa, &sb), directed(&sb, &sa))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Linear-interpolated percentile at fractional rank `q/100 * (n-1)`.
pub fn percentile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (s.len() as f64 - 1.0);
    let i = pos as usize;
    if i + 1 >= s.len() {
        return s[s.len() - 1];
    }
    s[i] * (1.0 - (pos - i as f64)) + s[i + 1] * (pos - i as f64)
}

/// Random shape with 1 to 3 axes, each side in `2..=max_side`.
pub fn random_shape<R: Rng>(rng: &mut R, max_side: usize) -> Vec<usize> {
    let dims = rng.gen_range(1..=3);
    (0..dims).map(|_| rng.gen_range(2..=max_side)).collect()
}

/// Random mask containing both labels.
pub fn random_mask<R: Rng>(rng: &mut R, shape: &[usize]) -> Volume {
    let n: usize = shape.iter().product();
    let p = rng.gen_range(0.05..0.95);
    loop {
        let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() < p) as u8 as f64).collect();
        let ones = data.iter().filter(|&&v| v == 1.0).count();
        if ones > 0 && ones < n {
            return Volume::new(shape, VolumeKind::BinaryMask, data).unwrap();
        }
    }
}

/// Union of random balls inside a grid, guaranteed to contain both labels.
pub fn random_blob<R: Rng>(rng: &mut R, shape: &[usize]) -> Volume {
    let pts = coords(shape);
    loop {
        let balls: Vec<([f64; 3], f64)> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let c = [0, 1, 2].map(|a| rng.gen_range(0.0..*shape.get(a).unwrap_or(&1) as f64));
                (c, rng.gen_range(1.5..6.0))
            })
            .collect();
        let data: Vec<f64> = pts
            .iter()
            .map(|p| {
                let inside = balls.iter().any(|(c, r)| {
                    (0..3).map(|i| (p[i] as f64 - c[i]).powi(2)).sum::<f64>() <= r * r
                });
                inside as u8 as f64
            })
            .collect();
        let ones = data.iter().filter(|&&v| v == 1.0).count();
        if ones > 0 && ones < data.len() {
            return Volume::new(shape, VolumeKind::BinaryMask, data).unwrap();
        }
    }
}
