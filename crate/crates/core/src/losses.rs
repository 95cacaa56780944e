//! Training objectives and their gradients.
//!
//! Every loss comes in two forms: a plain evaluation and a `*_grad` variant
//! returning the gradient with respect to the prediction. Predictions are flat
//! slices; per-class probabilities are laid out class-major
//! (`[background..., foreground...]`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sdf_to_mask_derivative, sdf_to_mask_value};

/// Smoothing term of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

/// A loss with its named parts. `value` is the weighted combination described
/// on the function that produced it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: LossComponents,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub dice: Option<f64>,
    pub ce: Option<f64>,
    pub mse: Option<f64>,
    pub consistency: Option<f64>,
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} targets")));
    }
    if a == 0 {
        return Err(Error::Shape("empty input".into()));
    }
    Ok(())
}

/// Soft Dice loss `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
pub fn dice_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len(pred.len(), target.len())?;
    let (inter, sp, st) = dice_sums(pred, target);
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + st + DICE_SMOOTH))
}

fn dice_sums(pred: &[f64], target: &[f64]) -> (f64, f64, f64) {
    pred.iter()
        .zip(target)
        .fold((0.0, 0.0, 0.0), |(i, p, t), (&a, &b)| (i + a * b, p + a, t + b))
}

pub fn dice_loss_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(pred.len(), target.len())?;
    let (inter, sp, st) = dice_sums(pred, target);
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sp + st + DICE_SMOOTH;
    let grad = target
        .iter()
        .map(|&t| -(2.0 * t * den - num) / (den * den))
        .collect();
    Ok((1.0 - num / den, grad))
}

fn class_count(probs: usize, target: usize) -> Result<usize> {
    if target == 0 || !probs.is_multiple_of(target) || probs / target < 2 {
        return Err(Error::Shape(format!(
            "{probs} class probabilities do not cover {target} voxels with at least two classes"
        )));
    }
    Ok(probs / target)
}

/// Mean over voxels of `-ln p(true class)`, floored at [`PROB_FLOOR`].
/// `probs` is class-major; class 1 is foreground.
pub fn cross_entropy_loss(probs: &[f64], target: &[f64]) -> Result<f64> {
    Ok(cross_entropy_loss_grad(probs, target)?.0)
}

pub fn cross_entropy_loss_grad(probs: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = target.len();
    class_count(probs.len(), n)?;
    let mut grad = vec![0.0; probs.len()];
    let mut total = 0.0;
    for (v, &t) in target.iter().enumerate() {
        let class = if t >= 0.5 { 1 } else { 0 };
        let p = probs[class * n + v];
        if p > PROB_FLOOR {
            total -= p.ln();
            grad[class * n + v] = -1.0 / (p * n as f64);
        } else {
            total -= PROB_FLOOR.ln();
        }
    }
    Ok((total / n as f64, grad))
}

/// `0.5 * dice + 0.5 * cross-entropy`; Dice is taken on the foreground channel.
pub fn supervised_seg_loss(probs: &[f64], target: &[f64]) -> Result<LossValue> {
    Ok(supervised_seg_loss_grad(probs, target)?.0)
}

pub fn supervised_seg_loss_grad(probs: &[f64], target: &[f64]) -> Result<(LossValue, Vec<f64>)> {
    let n = target.len();
    let classes = class_count(probs.len(), n)?;
    let (ce, mut grad) = cross_entropy_loss_grad(probs, target)?;
    let fg = &probs[n..2 * n];
    let (dice, dice_grad) = dice_loss_grad(fg, target)?;
    for g in grad.iter_mut() {
        *g *= 0.5;
    }
    for (g, dg) in grad[n..2 * n].iter_mut().zip(&dice_grad) {
        *g += 0.5 * dg;
    }
    debug_assert_eq!(grad.len(), classes * n);
    Ok((
        LossValue {
            value: 0.5 * dice + 0.5 * ce,
            components: LossComponents {
                dice: Some(dice),
                ce: Some(ce),
                ..Default::default()
            },
        },
        grad,
    ))
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len(pred.len(), target.len())?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn mse_loss_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = mse_loss(pred, target)?;
    let n = pred.len() as f64;
    let grad = pred.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect();
    Ok((value, grad))
}

/// `MSE(pred, target_sdf) + dice(sdf_to_mask(pred, k), target_mask)`.
pub fn supervised_sdf_loss(
    pred_sdf: &[f64],
    target_sdf: &[f64],
    target_mask: &[f64],
    k: f64,
) -> Result<LossValue> {
    Ok(supervised_sdf_loss_grad(pred_sdf, target_sdf, target_mask, k)?.0)
}

pub fn supervised_sdf_loss_grad(
    pred_sdf: &[f64],
    target_sdf: &[f64],
    target_mask: &[f64],
    k: f64,
) -> Result<(LossValue, Vec<f64>)> {
    same_len(pred_sdf.len(), target_mask.len())?;
    if !(k > 0.0) {
        return Err(Error::Domain(format!("sharpness must be positive, got {k}")));
    }
    let (mse, mut grad) = mse_loss_grad(pred_sdf, target_sdf)?;
    let soft: Vec<f64> = pred_sdf.iter().map(|&z| sdf_to_mask_value(z, k)).collect();
    let (dice, dice_grad) = dice_loss_grad(&soft, target_mask)?;
    for ((g, dg), &z) in grad.iter_mut().zip(&dice_grad).zip(pred_sdf) {
        *g += dg * sdf_to_mask_derivative(z, k);
    }
    Ok((
        LossValue {
            value: mse + dice,
            components: LossComponents {
                dice: Some(dice),
                mse: Some(mse),
                ..Default::default()
            },
        },
        grad,
    ))
}

/// Mean squared disagreement with the teacher. The teacher output is a
/// constant: gradients flow to `student` only.
pub fn consistency_loss(student: &[f64], teacher: &[f64]) -> Result<f64> {
    mse_loss(student, teacher)
}

pub fn consistency_loss_grad(student: &[f64], teacher: &[f64]) -> Result<(f64, Vec<f64>)> {
    mse_loss_grad(student, teacher)
}

/// Gaussian ramp `w_max * exp(-5 (1 - min(step, max_step) / max_step)^2)`.
pub fn rampup_weight(step: usize, max_step: usize, w_max: f64) -> f64 {
    if max_step == 0 {
        return w_max;
    }
    let t = step.min(max_step) as f64 / max_step as f64;
    w_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}
