//! Binary cross entropy and its self-calibrating variants.
//!
//! All losses are per-image means over pixels, in nats. Predictions are
//! clamped to `[PROB_EPS, 1 - PROB_EPS]` before any logarithm.

use std::fmt;

use crate::error::{ensure_domain, Result};
use crate::grid::{Grid, LabelMap, ProbabilityMap};
use crate::perturb::{perturb_label, smooth_label, PerturbationSpec};

pub const PROB_EPS: f64 = 1e-7;

/// Mean per-pixel loss in nats.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct LossValue(pub f64);

impl LossValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for LossValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

#[inline]
pub fn clamp_prob(f: f64) -> f64 {
    f.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Pixel-level `-t ln f - (1 - t) ln(1 - f)`.
#[inline]
pub fn bce_pixel(f: f64, t: f64) -> f64 {
    let f = clamp_prob(f);
    -t * f.ln() - (1.0 - t) * (1.0 - f).ln()
}

pub fn bce(pred: &ProbabilityMap, target: &LabelMap) -> Result<LossValue> {
    pred.ensure_same_dims(target, "bce prediction vs target")?;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(&f, &t)| bce_pixel(f, t))
        .sum();
    Ok(LossValue(sum / pred.len() as f64))
}

/// BCE against the binary uniform distribution (every target 0.5).
pub fn bce_uniform(pred: &ProbabilityMap) -> LossValue {
    let sum: f64 = pred.values().iter().map(|&f| bce_pixel(f, 0.5)).sum();
    LossValue(sum / pred.len() as f64)
}

/// Self-calibrating BCE for one drawn `z`: ground truth when `z` is false,
/// the perturbed label `p(y, beta)` otherwise.
pub fn sc_bce_sampled(
    pred: &ProbabilityMap,
    y: &LabelMap,
    z: bool,
    spec: &PerturbationSpec,
) -> Result<LossValue> {
    if z {
        bce(pred, &perturb_label(y, spec.beta())?)
    } else {
        pred.ensure_same_dims(y, "sc-bce prediction vs label")?;
        bce(pred, y)
    }
}

/// The same loss rewritten as a mix of ground-truth BCE and uniform-target
/// BCE: `(1 - beta z) BCE(y) + beta z BCE(U)`.
pub fn sc_bce_factored(pred: &ProbabilityMap, y: &LabelMap, z: bool, beta: f64) -> Result<LossValue> {
    ensure_domain((0.0..=2.0).contains(&beta), || {
        format!("perturbation strength must lie in [0, 2], got {beta}")
    })?;
    let weight = if z { beta } else { 0.0 };
    let truth = bce(pred, y)?.0;
    let uniform = bce_uniform(pred).0;
    Ok(LossValue((1.0 - weight) * truth + weight * uniform))
}

/// Mean binary Shannon entropy of the prediction.
pub fn entropy(pred: &ProbabilityMap) -> LossValue {
    let sum: f64 = pred
        .values()
        .iter()
        .map(|&f| {
            let f = clamp_prob(f);
            -f * f.ln() - (1.0 - f) * (1.0 - f).ln()
        })
        .sum();
    LossValue(sum / pred.len() as f64)
}

/// BCE against the label-smoothed target `(1 - sigma) y + sigma / 2`.
pub fn smoothed_bce(pred: &ProbabilityMap, y: &LabelMap, sigma: f64) -> Result<LossValue> {
    bce(pred, &smooth_label(y, sigma)?)
}

/// Constant-0.5 map with the dimensions of `like`.
pub fn uniform_target(like: &Grid) -> Grid {
    Grid::filled(like.height(), like.width(), 0.5)
}
