//! Teacher weight averaging: classic exponential moving average and the
//! competitive variant that blends two students according to their
//! supervised Dice losses.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamVector, SegmentKind};

/// Denominator below which the bidirectional weights fall back to (0.5, 0.5).
const BIDIRECTIONAL_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Unidirectional,
    Bidirectional,
    Classic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompetitiveWeights {
    pub r1: f64,
    pub r2: f64,
    pub strategy: Strategy,
}

impl CompetitiveWeights {
    /// All weight on the first student.
    pub fn classic() -> Self {
        Self {
            r1: 1.0,
            r2: 0.0,
            strategy: Strategy::Classic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadPolicy {
    /// Blend the entire vector with (r1, r2).
    FullVector,
    /// Blend the backbone with (r1, r2); the segmentation head follows
    /// student 1 and the regression head follows student 2.
    PerHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub alpha: f64,
    pub head_policy: HeadPolicy,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            head_policy: HeadPolicy::PerHead,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain(format!("EMA decay must lie in [0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_loss(l: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&l) {
        return Err(Error::Domain(format!("Dice loss {l} outside [0, 1]")));
    }
    Ok(())
}

/// Winner-take-all: the student with the strictly lower Dice loss gets all
/// the weight; ties go to student 2.
pub fn weights_unidirectional(l1: f64, l2: f64) -> Result<CompetitiveWeights> {
    check_loss(l1)?;
    check_loss(l2)?;
    let r1 = if l1 < l2 { 1.0 } else { 0.0 };
    Ok(CompetitiveWeights {
        r1,
        r2: 1.0 - r1,
        strategy: Strategy::Unidirectional,
    })
}

/// Weights proportional to each student's Dice score `1 - l`.
pub fn weights_bidirectional(l1: f64, l2: f64) -> Result<CompetitiveWeights> {
    check_loss(l1)?;
    check_loss(l2)?;
    let (s1, s2) = (1.0 - l1, 1.0 - l2);
    let denom = s1 + s2;
    // The larger weight is >= 0.5, so its complement is exact and the pair
    // sums to exactly 1.
    let (r1, r2) = if denom < BIDIRECTIONAL_GUARD || l1 == l2 {
        (0.5, 0.5)
    } else if l1 <= l2 {
        let r1 = s1 / denom;
        (r1, 1.0 - r1)
    } else {
        let r2 = s2 / denom;
        (1.0 - r2, r2)
    };
    Ok(CompetitiveWeights {
        r1,
        r2,
        strategy: Strategy::Bidirectional,
    })
}

fn same_layout(a: &ParamVector, b: &ParamVector) -> Result<()> {
    a.layout.ensure_matches(&b.layout)
}

#[inline]
fn ema(alpha: f64, teacher: f64, student: f64) -> f64 {
    if alpha == 0.0 {
        student
    } else {
        teacher + (1.0 - alpha) * (student - teacher)
    }
}

/// `alpha * teacher + (1 - alpha) * student`, element-wise.
pub fn ema_update_classic(teacher: &ParamVector, student: &ParamVector, alpha: f64) -> Result<ParamVector> {
    let mut out = teacher.clone();
    ema_update_classic_in_place(&mut out, student, alpha)?;
    Ok(out)
}

pub fn ema_update_classic_in_place(teacher: &mut ParamVector, student: &ParamVector, alpha: f64) -> Result<()> {
    check_alpha(alpha)?;
    same_layout(teacher, student)?;
    for (t, &s) in teacher.values.iter_mut().zip(&student.values) {
        *t = ema(alpha, *t, s);
    }
    Ok(())
}

/// `alpha * teacher + (1 - alpha) * (r1 * s1 + r2 * s2)` under the configured
/// head policy.
pub fn ema_update_competitive(
    teacher: &ParamVector,
    s1: &ParamVector,
    s2: &ParamVector,
    w: &CompetitiveWeights,
    cfg: &EmaConfig,
) -> Result<ParamVector> {
    let mut out = teacher.clone();
    ema_update_competitive_in_place(&mut out, s1, s2, w, cfg)?;
    Ok(out)
}

pub fn ema_update_competitive_in_place(
    teacher: &mut ParamVector,
    s1: &ParamVector,
    s2: &ParamVector,
    w: &CompetitiveWeights,
    cfg: &EmaConfig,
) -> Result<()> {
    check_alpha(cfg.alpha)?;
    same_layout(teacher, s1)?;
    same_layout(teacher, s2)?;
    if !(w.r1 >= 0.0 && w.r2 >= 0.0 && ((w.r1 + w.r2) - 1.0).abs() <= 4.0 * f64::EPSILON) {
        return Err(Error::Domain(format!(
            "competitive weights ({}, {}) are not on the simplex",
            w.r1, w.r2
        )));
    }
    let alpha = cfg.alpha;
    let blend = |range: std::ops::Range<usize>, t: &mut [f64]| {
        let a = &s1.values[range.clone()];
        let b = &s2.values[range];
        // A zero weight drops its student entirely so that (1, 0) reproduces
        // the classic update bit for bit.
        if w.r2 == 0.0 {
            for (t, &x) in t.iter_mut().zip(a) {
                *t = ema(alpha, *t, x);
            }
        } else if w.r1 == 0.0 {
            for (t, &y) in t.iter_mut().zip(b) {
                *t = ema(alpha, *t, y);
            }
        } else {
            for ((t, &x), &y) in t.iter_mut().zip(a).zip(b) {
                *t = ema(alpha, *t, x + w.r2 * (y - x));
            }
        }
    };
    match cfg.head_policy {
        HeadPolicy::FullVector => {
            let n = teacher.values.len();
            blend(0..n, &mut teacher.values);
        }
        HeadPolicy::PerHead => {
            let bb = teacher.layout.segment(SegmentKind::Backbone).range();
            blend(bb.clone(), &mut teacher.values[bb]);
            let seg = teacher.layout.segment(SegmentKind::SegHead).range();
            for (t, &x) in teacher.values[seg.clone()].iter_mut().zip(&s1.values[seg]) {
                *t = ema(alpha, *t, x);
            }
            let reg = teacher.layout.segment(SegmentKind::RegHead).range();
            for (t, &y) in teacher.values[reg.clone()].iter_mut().zip(&s2.values[reg]) {
                *t = ema(alpha, *t, y);
            }
        }
    }
    Ok(())
}

/// One row of the competitive-weight trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub r1: f64,
    pub r2: f64,
    pub strategy: Strategy,
}

/// Writes weight records as CSV with a header row.
pub fn write_weight_trace<W: Write>(out: W, records: &[WeightRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
