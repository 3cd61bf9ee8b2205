use crate::error::{Error, Result};

/// Predictions are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the log.
pub const PROB_CLAMP: f64 = 1e-7;

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy.
pub fn bce(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    let n = pred.len() as f64;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / n)
}

/// dBCE/dpred; zero where the clamp is active.
pub fn bce_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                0.0
            } else {
                (-t / p + (1.0 - t) / (1.0 - p)) / n
            }
        })
        .collect()
}

/// `(2·Σpt + smooth) / (Σp + Σt + smooth)`.
pub fn soft_dice(pred: &[f64], target: &[f64], smooth: f64) -> Result<f64> {
    check(pred, target)?;
    let (num, den) = dice_terms(pred, target, smooth);
    Ok(num / den)
}

fn dice_terms(pred: &[f64], target: &[f64], smooth: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        sp += p;
        st += t;
    }
    (2.0 * inter + smooth, sp + st + smooth)
}

/// d(soft Dice)/dpred.
pub fn soft_dice_grad(pred: &[f64], target: &[f64], smooth: f64) -> Vec<f64> {
    let (num, den) = dice_terms(pred, target, smooth);
    let den2 = den * den;
    target.iter().map(|&t| (2.0 * t * den - num) / den2).collect()
}

/// BCE + (1 − soft Dice): both terms vanish for a perfect prediction.
pub fn head_loss(pred: &[f64], target: &[f64], smooth: f64) -> Result<f64> {
    Ok(bce(pred, target)? + 1.0 - soft_dice(pred, target, smooth)?)
}

/// [`head_loss`] and its gradient with respect to `pred`.
pub fn head_loss_grad(pred: &[f64], target: &[f64], smooth: f64) -> Result<(f64, Vec<f64>)> {
    let loss = head_loss(pred, target, smooth)?;
    let mut g = bce_grad(pred, target);
    for (gi, d) in g.iter_mut().zip(soft_dice_grad(pred, target, smooth)) {
        *gi -= d;
    }
    Ok((loss, g))
}
