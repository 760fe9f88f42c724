//! Training losses of the head, with analytic gradients for checking.
//!
//! Focal loss, per element with score `p` and one-hot target `t`:
//!
//! ```text
//! t = 1:  -alpha       * (1 - p)^gamma * ln(p)
//! t = 0:  -(1 - alpha) * p^gamma       * ln(1 - p)
//! ```
//!
//! averaged over all `sites x classes` elements. The L1 regression loss is the
//! mean absolute difference over every component of every positive.

use super::RegressionOutput;
use crate::error::{Error, Result};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// Keeps `ln` finite at saturated scores.
const PROB_EPS: f64 = 1e-12;

fn focal_term(p: f64, t: f32, gamma: f64, alpha: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if t > 0.5 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Mean focal loss over scores already in (0, 1).
pub fn focal_loss(scores: &[f32], targets: &[f32], gamma: f64, alpha: f64) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = scores
        .iter()
        .zip(targets)
        .map(|(&p, &t)| focal_term(p as f64, t, gamma, alpha))
        .sum();
    Ok(sum / scores.len() as f64)
}

/// Focal loss of `sigmoid(logits)` and its gradient with respect to the logits.
///
/// With `p = sigmoid(z)`:
/// `t = 1: dL/dz = alpha (1-p)^gamma (gamma p ln p - (1 - p))`,
/// `t = 0: dL/dz = (1-alpha) p^gamma (p - gamma (1-p) ln(1-p))`, each divided by
/// the element count.
pub fn focal_loss_with_logits(logits: &[f64], targets: &[f32], gamma: f64, alpha: f64) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        let p = 1.0 / (1.0 + (-z).exp());
        loss += focal_term(p, t, gamma, alpha);
        let g = if t > 0.5 {
            alpha * (1.0 - p).powf(gamma) * (gamma * p * p.ln() - (1.0 - p))
        } else {
            (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * (1.0 - p).ln())
        };
        grad.push(g / n);
    }
    Ok((loss / n, grad))
}

/// Mean absolute error over every regression component.
pub fn l1_regression_loss(pred: &[RegressionOutput], targets: &[RegressionOutput]) -> Result<f64> {
    if pred.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            targets.len()
        )));
    }
    let mut p = Vec::new();
    let mut t = Vec::new();
    for (a, b) in pred.iter().zip(targets) {
        let (va, vb) = (a.to_vec(), b.to_vec());
        if va.len() != vb.len() {
            return Err(Error::ShapeMismatch("prediction and target differ in velocity channels".into()));
        }
        p.extend(va.into_iter().map(f64::from));
        t.extend(vb);
    }
    Ok(l1_loss_with_grad(&p, &t)?.0)
}

/// Mean absolute error and its (sub)gradient with respect to `pred`.
pub fn l1_loss_with_grad(pred: &[f64], targets: &[f32]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} values vs {} targets",
            pred.len(),
            targets.len()
        )));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(targets) {
        let d = p - t as f64;
        loss += d.abs();
        grad.push(if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        });
    }
    Ok((loss / n, grad))
}
