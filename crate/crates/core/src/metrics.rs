//! Overlap and surface-distance metrics for binary segmentations.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{extract_surface, squared_distance_transform, SurfacePointSet};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub asd: f64,
    pub hd95: f64,
    /// Set when either surface is empty and the distance metrics carry the
    /// penalty value instead of a measured distance.
    pub degenerate: bool,
}

fn counts(a: &Volume, b: &Volume) -> Result<(usize, usize, usize)> {
    a.same_shape(b)?;
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    Ok((inter, na, nb))
}

/// `2|A∩B| / (|A| + |B|)`, 1 when both masks are empty.
pub fn dice(a: &Volume, b: &Volume) -> Result<f64> {
    let (inter, na, nb) = counts(a, b)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A∩B| / |A∪B|`, 1 when both masks are empty.
pub fn jaccard(a: &Volume, b: &Volume) -> Result<f64> {
    let (inter, na, nb) = counts(a, b)?;
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Length of the volume diagonal in spacing units; the distance penalty for
/// degenerate cases.
pub fn diagonal_length(v: &Volume) -> f64 {
    v.shape()
        .iter()
        .zip(v.spacing())
        .map(|(&n, &s)| (n as f64 * s).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Distances from every point of `from` to the nearest point of `to`.
fn directed_distances(from: &SurfacePointSet, to: &SurfacePointSet) -> Vec<f64> {
    let [_, w, d] = from.extent;
    let field = squared_distance_transform(&to.to_grid(), to.extent, to.spacing);
    from.points
        .iter()
        .map(|p| field[(p[0] * w + p[1]) * d + p[2]].sqrt())
        .collect()
}

/// Pooled surface distances in both directions, or `None` when either
/// surface is empty.
fn pooled_distances(a: &Volume, b: &Volume, spacing: &[f64]) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    a.same_shape(b)?;
    if spacing.len() != a.ndim() || spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Shape(format!("bad spacing {spacing:?} for {:?}", a.shape())));
    }
    let mut a = a.threshold(0.5);
    let mut b = b.threshold(0.5);
    a.set_spacing(spacing)?;
    b.set_spacing(spacing)?;
    let sa = extract_surface(&a)?;
    let sb = extract_surface(&b)?;
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    Ok(Some((directed_distances(&sa, &sb), directed_distances(&sb, &sa))))
}

fn degenerate_value(a: &Volume, b: &Volume, spacing: &[f64]) -> f64 {
    let same = a.data().iter().zip(b.data()).all(|(&x, &y)| (x >= 0.5) == (y >= 0.5));
    if same {
        return 0.0;
    }
    let mut v = a.clone();
    v.set_spacing(spacing).ok();
    diagonal_length(&v)
}

/// Average symmetric surface distance. Degenerate cases return the volume
/// diagonal (0 when the masks are identical).
pub fn asd(a: &Volume, b: &Volume, spacing: &[f64]) -> Result<f64> {
    Ok(asd_flagged(a, b, spacing)?.0)
}

fn asd_flagged(a: &Volume, b: &Volume, spacing: &[f64]) -> Result<(f64, bool)> {
    match pooled_distances(a, b, spacing)? {
        Some((ab, ba)) => {
            let total: f64 = ab.iter().chain(&ba).sum();
            Ok((total / (ab.len() + ba.len()) as f64, false))
        }
        None => Ok((degenerate_value(a, b, spacing), true)),
    }
}

/// 95th percentile of the pooled directed surface distances.
pub fn hd95(a: &Volume, b: &Volume, spacing: &[f64]) -> Result<f64> {
    Ok(hd95_flagged(a, b, spacing)?.0)
}

fn hd95_flagged(a: &Volume, b: &Volume, spacing: &[f64]) -> Result<(f64, bool)> {
    match pooled_distances(a, b, spacing)? {
        Some((mut ab, ba)) => {
            ab.extend(ba);
            Ok((percentile(&mut ab, 95.0), false))
        }
        None => Ok((degenerate_value(a, b, spacing), true)),
    }
}

/// Linear interpolation between closest ranks at rank `q/100 * (n - 1)`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

pub fn evaluate_case(pred: &Volume, gt: &Volume, spacing: &[f64]) -> Result<CaseMetrics> {
    let (asd, degenerate) = asd_flagged(pred, gt, spacing)?;
    let (hd95, _) = hd95_flagged(pred, gt, spacing)?;
    Ok(CaseMetrics {
        dice: dice(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        asd,
        hd95,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub degenerate_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub dice: Summary,
    pub jaccard: Summary,
    pub asd: Summary,
    pub hd95: Summary,
}

/// Two-pass mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(cases: &[CaseMetrics]) -> MetricsSummary {
    let degenerate_count = cases.iter().filter(|c| c.degenerate).count();
    let summarize = |f: fn(&CaseMetrics) -> f64| {
        let vals: Vec<f64> = cases.iter().map(f).collect();
        let (mean, std) = mean_std(&vals);
        Summary {
            mean,
            std,
            n: cases.len(),
            degenerate_count,
        }
    };
    MetricsSummary {
        dice: summarize(|c| c.dice),
        jaccard: summarize(|c| c.jaccard),
        asd: summarize(|c| c.asd),
        hd95: summarize(|c| c.hd95),
    }
}

#[derive(Serialize)]
struct CaseRow<'a> {
    case: &'a str,
    dice: f64,
    jaccard: f64,
    asd: f64,
    hd95: f64,
    degenerate: bool,
}

/// One CSV row per case.
pub fn write_cases_csv<W: Write>(out: W, ids: &[String], cases: &[CaseMetrics]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for (id, c) in ids.iter().zip(cases) {
        wtr.serialize(CaseRow {
            case: id,
            dice: c.dice,
            jaccard: c.jaccard,
            asd: c.asd,
            hd95: c.hd95,
            degenerate: c.degenerate,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeKind;

    fn mask(shape: &[usize], bits: &[u8]) -> Volume {
        Volume::new(shape, VolumeKind::BinaryMask, bits.iter().map(|&b| b as f64).collect()).unwrap()
    }

    #[test]
    fn overlap_examples() {
        let a = mask(&[4], &[1, 1, 0, 0]);
        let b = mask(&[4], &[0, 1, 0, 0]);
        assert!((dice(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = mask(&[4], &[0, 0, 1, 1]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &c).unwrap(), 0.0);
        let e = mask(&[4], &[0; 4]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert!(dice(&a, &mask(&[2, 2], &[0; 4])).is_err());
    }

    fn segments(offset: usize) -> (Volume, Volume) {
        // Two horizontal 1-voxel-thick segments `offset` rows apart.
        let (h, w) = (10, 8);
        let mut a = vec![0u8; h * w];
        let mut b = vec![0u8; h * w];
        for j in 1..7 {
            a[2 * w + j] = 1;
            b[(2 + offset) * w + j] = 1;
        }
        (mask(&[h, w], &a), mask(&[h, w], &b))
    }

    #[test]
    fn parallel_segments() {
        let (a, b) = segments(3);
        assert_eq!(asd(&a, &b, &[1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(hd95(&a, &b, &[1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(asd(&b, &a, &[1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(asd(&a, &a, &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(hd95(&a, &a, &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(asd(&a, &b, &[2.0, 1.0]).unwrap(), 6.0);
    }

    #[test]
    fn degenerate_prediction_gets_penalty() {
        let (gt, _) = segments(3);
        let empty = mask(&[10, 8], &[0; 80]);
        let m = evaluate_case(&empty, &gt, &[1.0, 1.0]).unwrap();
        assert!(m.degenerate);
        let diag = (100.0f64 + 64.0).sqrt();
        assert_eq!(m.asd, diag);
        assert_eq!(m.hd95, diag);
        assert_eq!(m.dice, 0.0);
        let both = evaluate_case(&empty, &empty, &[1.0, 1.0]).unwrap();
        assert!(both.degenerate);
        assert_eq!(both.asd, 0.0);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&mut v, 50.0), 3.0);
        assert!((percentile(&mut v, 95.0) - 4.8).abs() < 1e-12);
        assert_eq!(percentile(&mut v, 100.0), 5.0);
    }

    #[test]
    fn aggregation() {
        let case = |d: f64| CaseMetrics {
            dice: d,
            jaccard: d / (2.0 - d),
            asd: 1.0,
            hd95: 2.0,
            degenerate: false,
        };
        let one = aggregate(&[case(0.8)]);
        assert_eq!(one.dice.mean, 0.8);
        assert_eq!(one.dice.std, 0.0);
        let two = aggregate(&[case(0.8), case(0.8)]);
        assert_eq!(two.dice.std, 0.0);
        let mixed = aggregate(&[case(0.8), case(0.9)]);
        assert!((mixed.dice.mean - 0.85).abs() < 1e-15);
        assert_eq!(mixed.dice.n, 2);
    }
}
