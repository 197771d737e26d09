//! Segmentation, attribute and self-training objectives with gradients.
//!
//! Each `*_grad` function returns the loss value together with its gradient
//! with respect to the logits it consumes.

use serde::{Deserialize, Serialize};

use crate::attr_text::{AttributeLabels, NUM_ATTRIBUTES};
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::{log_softmax, sigmoid, Tensor};

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_st: f64,
    /// Gate threshold for mask-guided attribute features.
    pub alpha: f64,
    /// Confidence threshold for self-training pseudo-labels.
    pub delta: f64,
    /// Coarse-mask threshold.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 1.0,
            lambda_a: 0.9,
            lambda_st: 1.0,
            alpha: 0.5,
            delta: 0.7,
            tau: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_a", self.lambda_a),
            ("lambda_st", self.lambda_st),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("delta", self.delta),
            ("tau", self.tau),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_a: f64,
    pub l_st: f64,
    pub l_total: f64,
    pub pseudo_label_coverage: f64,
}

fn check_pair(p: &Tensor, y: &Tensor) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::shape(
            "loss inputs",
            format!("{:?}", p.shape()),
            format!("{:?}", y.shape()),
        ));
    }
    Ok(())
}

/// Pixel-mean binary cross-entropy on logits.
pub fn bce_grad(p: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    check_pair(p, y)?;
    let n = p.len() as f64;
    let mut loss = 0.0;
    let grad = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&z, &t)| {
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            (sigmoid(z) - t) / n
        })
        .collect();
    Ok((loss / n, Tensor::from_vec(p.shape(), grad)?))
}

/// `1 − (2Σσ(P)Y + ε) / (Σσ(P) + ΣY + ε)`.
pub fn dice_loss_grad(p: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    check_pair(p, y)?;
    let s: Vec<f64> = p.data().iter().map(|&z| sigmoid(z)).collect();
    let inter: f64 = s.iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let sp: f64 = s.iter().sum();
    let sy: f64 = y.data().iter().sum();
    let num = 2.0 * inter + DICE_EPS;
    let den = sp + sy + DICE_EPS;
    let grad = s
        .iter()
        .zip(y.data())
        .map(|(&sk, &yk)| -(2.0 * yk * den - num) / (den * den) * sk * (1.0 - sk))
        .collect();
    Ok((1.0 - num / den, Tensor::from_vec(p.shape(), grad)?))
}

pub fn dice_loss(p: &Tensor, y: &Tensor) -> Result<f64> {
    dice_loss_grad(p, y).map(|(l, _)| l)
}

/// `0.5·BCE + 0.5·Dice`.
pub fn seg_loss_grad(p: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    let (b, mut gb) = bce_grad(p, y)?;
    let (d, gd) = dice_loss_grad(p, y)?;
    gb.scale(0.5);
    gb.scaled_add_assign(0.5, &gd);
    Ok((0.5 * b + 0.5 * d, gb))
}

pub fn seg_loss(p: &Tensor, y: &Tensor) -> Result<f64> {
    seg_loss_grad(p, y).map(|(l, _)| l)
}

/// Segmentation loss against the coarse mask.
pub fn coarse_loss_grad(p: &Tensor, coarse: &Mask) -> Result<(f64, Tensor)> {
    seg_loss_grad(p, &coarse.to_tensor())
}

pub fn coarse_loss(p: &Tensor, coarse: &Mask) -> Result<f64> {
    coarse_loss_grad(p, coarse).map(|(l, _)| l)
}

fn check_logits(logits: &[Vec<f64>], labels: &AttributeLabels) -> Result<()> {
    if logits.len() != NUM_ATTRIBUTES {
        return Err(Error::shape(
            "attribute heads",
            NUM_ATTRIBUTES,
            logits.len(),
        ));
    }
    for (m, (l, &c)) in logits.iter().zip(&labels.categories).enumerate() {
        if c >= l.len() {
            return Err(Error::InvalidLabels(format!(
                "attribute {} label {c} outside 0..{}",
                m + 1,
                l.len()
            )));
        }
    }
    Ok(())
}

/// Sum over the enabled heads of softmax cross-entropy.
pub fn attribute_loss_grad(
    logits: &[Vec<f64>],
    labels: &AttributeLabels,
    enabled: [bool; NUM_ATTRIBUTES],
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_logits(logits, labels)?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for ((l, &c), &on) in logits.iter().zip(&labels.categories).zip(&enabled) {
        if !on {
            grads.push(vec![0.0; l.len()]);
            continue;
        }
        let ls = log_softmax(l);
        loss -= ls[c];
        grads.push(
            ls.iter()
                .enumerate()
                .map(|(j, v)| v.exp() - if j == c { 1.0 } else { 0.0 })
                .collect(),
        );
    }
    Ok((loss, grads))
}

pub fn attribute_loss(logits: &[Vec<f64>], labels: &AttributeLabels) -> Result<f64> {
    attribute_loss_grad(logits, labels, [true; NUM_ATTRIBUTES]).map(|(l, _)| l)
}

/// `1[σ(P) > δ]`; a constant with respect to `P`.
pub fn pseudo_labels(p: &Tensor, delta: f64) -> Result<Mask> {
    Mask::threshold(&p.map(sigmoid), delta)
}

/// Segmentation loss against the model's own confident pixels. The
/// pseudo-labels are detached, so the gradient flows only through `P`.
pub fn self_training_loss_grad(p: &Tensor, delta: f64) -> Result<(f64, Tensor, f64)> {
    let labels = pseudo_labels(p, delta)?;
    let coverage = labels.count() as f64 / p.len() as f64;
    let (l, g) = seg_loss_grad(p, &labels.to_tensor())?;
    Ok((l, g, coverage))
}

pub fn self_training_loss(p: &Tensor, delta: f64) -> Result<f64> {
    self_training_loss_grad(p, delta).map(|(l, _, _)| l)
}

pub fn total_loss(l_c: f64, l_a: f64, l_st: f64, w: &LossWeights) -> f64 {
    w.lambda_c * l_c + w.lambda_a * l_a + w.lambda_st * l_st
}
