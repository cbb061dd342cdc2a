//! Per-sample adaptive label perturbation.
//!
//! Each training image carries its own perturbation probability `alpha_i`
//! (MEI and MC modes) or smoothing strength `beta_i` (ALS mode). Both
//! ground-truth and perturbed-label BCE are accumulated for every image
//! during an epoch; at the epoch boundary the parameters move along the
//! normalised derivative of the expected loss, pulled back by either an
//! accuracy regulariser (MEI) or a calibration regulariser (MC, ALS).

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure_domain, Error, Result};
use crate::loss::LossValue;
use crate::perturb::max_alpha_for;

/// Upper bound for per-sample smoothing strengths in ALS mode.
pub const MAX_ALS_BETA: f64 = 1.0 - 1e-3;

pub const DEFAULT_ETA: f64 = 0.002;
pub const DEFAULT_LAMBDA: f64 = 2000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdaptiveMode {
    /// Entropy maximisation under an accuracy regulariser.
    Mei,
    /// Calibration regulariser on the expected label confidence.
    Mc,
    /// Adaptive label smoothing: alpha = 1, per-sample beta.
    Als,
}

impl AdaptiveMode {
    pub fn token(self) -> &'static str {
        match self {
            AdaptiveMode::Mei => "mei",
            AdaptiveMode::Mc => "mc",
            AdaptiveMode::Als => "als",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            AdaptiveMode::Mei => 0,
            AdaptiveMode::Mc => 1,
            AdaptiveMode::Als => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AdaptiveMode::Mei),
            1 => Some(AdaptiveMode::Mc),
            2 => Some(AdaptiveMode::Als),
            _ => None,
        }
    }
}

impl fmt::Display for AdaptiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for AdaptiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mei" => Ok(AdaptiveMode::Mei),
            "mc" => Ok(AdaptiveMode::Mc),
            "als" => Ok(AdaptiveMode::Als),
            other => Err(Error::Config(format!("unknown adaptive mode '{other}'"))),
        }
    }
}

/// Running per-sample sums of the two BCE terms for the current epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossAccumulator {
    pub sum_truth: f64,
    pub sum_perturbed: f64,
    pub visits: u32,
}

impl LossAccumulator {
    pub fn means(&self) -> Option<(f64, f64)> {
        (self.visits > 0).then(|| {
            let n = self.visits as f64;
            (self.sum_truth / n, self.sum_perturbed / n)
        })
    }
}

/// Adaptive parameters for every training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibState {
    pub mode: AdaptiveMode,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub eta: f64,
    pub lambda: f64,
    ideal_accuracy: Option<f64>,
    pub accumulators: Vec<LossAccumulator>,
}

impl CalibState {
    /// Fresh state: `alpha_i = 0` with shared `beta` for MEI/MC; `alpha_i = 1`
    /// and `beta_i = beta` (the starting strength) for ALS.
    pub fn new(mode: AdaptiveMode, samples: usize, beta: f64, eta: f64, lambda: f64) -> Result<Self> {
        ensure_domain(eta > 0.0 && eta.is_finite(), || format!("eta must be > 0, got {eta}"))?;
        ensure_domain(lambda >= 0.0 && lambda.is_finite(), || {
            format!("lambda must be >= 0, got {lambda}")
        })?;
        let (alpha0, beta_range) = match mode {
            AdaptiveMode::Mei | AdaptiveMode::Mc => (0.0, 0.0..=2.0),
            AdaptiveMode::Als => (1.0, 0.0..=MAX_ALS_BETA),
        };
        ensure_domain(beta_range.contains(&beta), || {
            format!("beta {beta} outside {beta_range:?} for {mode}")
        })?;
        Ok(Self {
            mode,
            alphas: vec![alpha0; samples],
            betas: vec![beta; samples],
            eta,
            lambda,
            ideal_accuracy: None,
            accumulators: vec![LossAccumulator::default(); samples],
        })
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn ideal_accuracy(&self) -> Option<f64> {
        self.ideal_accuracy
    }

    /// Anchors both regularisers. May be called only once.
    pub fn set_ideal_accuracy(&mut self, acc: f64) -> Result<()> {
        if self.ideal_accuracy.is_some() {
            return Err(Error::State("ideal accuracy is already set".into()));
        }
        ensure_domain(acc > 0.0 && acc <= 1.0, || {
            format!("ideal accuracy must lie in (0, 1], got {acc}")
        })?;
        self.ideal_accuracy = Some(acc);
        Ok(())
    }

    pub(crate) fn restore_ideal_accuracy(&mut self, acc: Option<f64>) {
        self.ideal_accuracy = acc;
    }

    /// Adds one visit of sample `i` to its epoch accumulator.
    pub fn record(&mut self, i: usize, loss_truth: LossValue, loss_perturbed: LossValue) -> Result<()> {
        let acc = self
            .accumulators
            .get_mut(i)
            .ok_or_else(|| Error::State(format!("sample index {i} out of range")))?;
        acc.sum_truth += loss_truth.0;
        acc.sum_perturbed += loss_perturbed.0;
        acc.visits += 1;
        Ok(())
    }

    /// Upper clamp for `alpha_i` under the shared strength.
    pub fn alpha_limit(&self) -> f64 {
        max_alpha_for(self.betas.first().copied().unwrap_or(0.0))
    }

    fn epoch_means(&self) -> Result<Vec<(f64, f64)>> {
        self.accumulators
            .iter()
            .enumerate()
            .map(|(i, a)| {
                a.means()
                    .ok_or_else(|| Error::State(format!("no losses accumulated for sample {i}")))
            })
            .collect()
    }

    fn reset_accumulators(&mut self) {
        self.accumulators.fill(LossAccumulator::default());
    }
}

/// Normalised derivative of the expected loss with respect to `alpha_i`:
/// `2 (L(p) - L(y)) / beta`.
pub fn grad_alpha(loss_y: LossValue, loss_p: LossValue, beta: f64) -> Result<f64> {
    ensure_domain(beta > 0.0, || format!("beta must be > 0, got {beta}"))?;
    Ok(2.0 * (loss_p.0 - loss_y.0) / beta)
}

/// Relative validation-accuracy drop, clamped at zero from above.
pub fn reg_accuracy(acc_val: f64, acc_ideal: f64) -> Result<f64> {
    ensure_domain(acc_ideal > 0.0, || format!("ideal accuracy must be > 0, got {acc_ideal}"))?;
    Ok(((acc_val - acc_ideal) / acc_ideal).min(0.0))
}

/// Shortfall of the expected label confidence below the ideal accuracy.
pub fn reg_calibration(alpha_i: f64, beta: f64, acc_ideal: f64) -> Result<f64> {
    let product = alpha_i * beta;
    ensure_domain((0.0..1.0).contains(&product), || {
        format!("alpha * beta must lie in [0, 1), got {product}")
    })?;
    Ok(((1.0 - product / 2.0) - acc_ideal).min(0.0))
}

/// Derivative of the expected loss with respect to `beta_i` at `alpha = 1`,
/// holding the perturbed target fixed.
pub fn grad_beta(loss_y: LossValue, loss_p: LossValue) -> f64 {
    loss_p.0 - loss_y.0
}

/// One epoch-boundary step of the MEI or MC rule.
///
/// `acc_val` is the current validation accuracy; only MEI reads it.
pub fn update_alphas(state: &mut CalibState, acc_val: f64) -> Result<()> {
    if state.mode == AdaptiveMode::Als {
        return Err(Error::State("update_alphas called in ALS mode".into()));
    }
    let ideal = state
        .ideal_accuracy
        .ok_or_else(|| Error::State("ideal accuracy not set".into()))?;
    let means = state.epoch_means()?;
    let limit = state.alpha_limit();
    // Reg_A depends only on validation accuracy and is shared by every sample.
    let shared_reg = match state.mode {
        AdaptiveMode::Mei => Some(reg_accuracy(acc_val, ideal)?),
        _ => None,
    };
    for (i, &(loss_y, loss_p)) in means.iter().enumerate() {
        let beta = state.betas[i];
        let grad = grad_alpha(LossValue(loss_y), LossValue(loss_p), beta)?;
        let reg = match shared_reg {
            Some(r) => r,
            None => reg_calibration(state.alphas[i], beta, ideal)?,
        };
        let next = state.alphas[i] + state.eta * (grad + state.lambda * reg);
        state.alphas[i] = next.clamp(0.0, limit);
    }
    state.reset_accumulators();
    Ok(())
}

/// One epoch-boundary step of the ALS rule.
pub fn update_betas(state: &mut CalibState, acc_ideal: f64) -> Result<()> {
    if state.mode != AdaptiveMode::Als {
        return Err(Error::State("update_betas requires ALS mode".into()));
    }
    let means = state.epoch_means()?;
    for (i, &(loss_y, loss_p)) in means.iter().enumerate() {
        let beta = state.betas[i];
        let grad = grad_beta(LossValue(loss_y), LossValue(loss_p));
        let reg = ((1.0 - beta / 2.0) - acc_ideal).min(0.0);
        let next = beta + state.eta * (grad + state.lambda * reg);
        state.betas[i] = next.clamp(0.0, MAX_ALS_BETA);
    }
    state.reset_accumulators();
    Ok(())
}
