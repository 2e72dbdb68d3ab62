//! Composite training loss (BCE + Dice + KL, unit weights) and the
//! IoU / Dice evaluation metrics.

use crate::error::{CpError, Result};
use crate::tensor::{Tape, Tid};

pub const DICE_EPS: f64 = 1.0;
pub const PRED_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub kl: f64,
    pub total: f64,
}

/// Builds the total loss node bce + dice + kl on the tape and returns it
/// with its value breakdown. `kl` is an optional scalar node (absent when
/// the contour branch is disabled or at inference).
pub fn total_loss(
    tape: &mut Tape,
    pred: Tid,
    target: &[f64],
    kl: Option<Tid>,
) -> Result<(Tid, LossBreakdown)> {
    let bce = tape.bce_loss(pred, target)?;
    let dice = tape.dice_loss(pred, target, DICE_EPS)?;
    let partial = tape.add(bce, dice)?;
    let (total, kl_v) = match kl {
        Some(kl) => (tape.add(partial, kl)?, tape.scalar(kl)),
        None => (partial, 0.0),
    };
    let breakdown = LossBreakdown {
        bce: tape.scalar(bce),
        dice: tape.scalar(dice),
        kl: kl_v,
        total: tape.scalar(total),
    };
    for (name, v) in [
        ("bce", breakdown.bce),
        ("dice", breakdown.dice),
        ("kl", breakdown.kl),
        ("total", breakdown.total),
    ] {
        if !v.is_finite() {
            return Err(CpError::Numeric(format!(
                "non-finite {name} loss (bce={} dice={} kl={} total={})",
                breakdown.bce, breakdown.dice, breakdown.kl, breakdown.total
            )));
        }
    }
    Ok((total, breakdown))
}

pub fn threshold_mask(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p > PRED_THRESHOLD).collect()
}

/// IoU and Dice over binary masks; both 1.0 when prediction and target
/// are empty.
pub fn iou_dice_metrics(pred: &[bool], target: &[bool]) -> (f64, f64) {
    debug_assert_eq!(pred.len(), target.len());
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut t_count = 0usize;
    for (&p, &t) in pred.iter().zip(target) {
        if p {
            p_count += 1;
        }
        if t {
            t_count += 1;
        }
        if p && t {
            inter += 1;
        }
    }
    let union = p_count + t_count - inter;
    if union == 0 {
        return (1.0, 1.0);
    }
    let iou = inter as f64 / union as f64;
    let dice = 2.0 * inter as f64 / (p_count + t_count) as f64;
    (iou, dice)
}

pub fn mask_to_bool(mask: &[f64]) -> Vec<bool> {
    mask.iter().map(|&v| v != 0.0).collect()
}
