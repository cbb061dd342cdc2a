//! Parametric label perturbation `p(y, beta) = (1 - beta) * y + beta / 2`
//! and the static techniques built on it.
//!
//! | technique | default beta | perturbed target           |
//! |-----------|--------------|----------------------------|
//! | `hi`      | 2.0          | `1 - y`                    |
//! | `si`      | 1.5          | `-0.5 y + 0.75`            |
//! | `m`       | 1.0          | `0.5`                      |
//! | `dm`      | 1.0          | `0.5 + e`, `e ~ TN[-.5,.5](0,1)` per image |
//! | `ls`      | caller-set   | `(1 - beta) y + beta / 2`, used with alpha = 1 |

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure_domain, Error, Result};
use crate::grid::{Grid, LabelMap};
use crate::rng::RandomSource;

/// Margin kept below the open bound `alpha < 1 / beta`.
pub const ALPHA_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Technique {
    HardInversion,
    SoftInversion,
    Moderation,
    DynamicModeration,
    LabelSmoothing,
}

impl Technique {
    pub const ALL: [Technique; 5] = [
        Technique::HardInversion,
        Technique::SoftInversion,
        Technique::Moderation,
        Technique::DynamicModeration,
        Technique::LabelSmoothing,
    ];

    /// Default strength, matching each technique's label transform.
    pub fn default_beta(self) -> Option<f64> {
        match self {
            Technique::HardInversion => Some(2.0),
            Technique::SoftInversion => Some(1.5),
            Technique::Moderation | Technique::DynamicModeration => Some(1.0),
            Technique::LabelSmoothing => None,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Technique::HardInversion => "hi",
            Technique::SoftInversion => "si",
            Technique::Moderation => "m",
            Technique::DynamicModeration => "dm",
            Technique::LabelSmoothing => "ls",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Technique::ALL
            .into_iter()
            .find(|t| t.token() == lower)
            .ok_or_else(|| Error::Config(format!("unknown technique '{s}' (expected hi|si|m|dm|ls)")))
    }
}

/// Technique plus strength; `noise` is set only for dynamic moderation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    technique: Technique,
    beta: f64,
    noise: bool,
}

impl PerturbationSpec {
    pub fn new(technique: Technique, beta: f64) -> Result<Self> {
        ensure_domain((0.0..=2.0).contains(&beta), || {
            format!("perturbation strength must lie in [0, 2], got {beta}")
        })?;
        match technique {
            Technique::HardInversion => ensure_domain(beta == 2.0, || {
                format!("hard inversion requires beta = 2, got {beta}")
            })?,
            Technique::LabelSmoothing => ensure_domain(beta < 1.0, || {
                format!("label smoothing requires beta in [0, 1), got {beta}")
            })?,
            _ => ensure_domain(beta > 0.0, || {
                format!("{technique} requires beta > 0, got {beta}")
            })?,
        }
        Ok(Self {
            technique,
            beta,
            noise: technique == Technique::DynamicModeration,
        })
    }

    /// Spec with the technique's default strength.
    pub fn with_default_beta(technique: Technique) -> Result<Self> {
        let beta = technique.default_beta().ok_or_else(|| {
            Error::Config(format!("technique {technique} needs an explicit beta"))
        })?;
        Self::new(technique, beta)
    }

    pub fn technique(&self) -> Technique {
        self.technique
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn noise(&self) -> bool {
        self.noise
    }

    /// Largest legal perturbation probability for this strength.
    pub fn max_alpha(&self) -> f64 {
        max_alpha_for(self.beta)
    }
}

/// Upper end of `[0, 1/beta - margin]`, capped at 1.
pub fn max_alpha_for(beta: f64) -> f64 {
    if beta <= 0.0 {
        1.0
    } else {
        (1.0 / beta - ALPHA_MARGIN).min(1.0)
    }
}

fn ensure_hard(y: &LabelMap) -> Result<()> {
    ensure_domain(y.is_hard(), || "label map must be hard (values in {0, 1})".into())
}

/// Scalar form of `p(y, beta)`.
#[inline]
pub fn perturb_value(y: f64, beta: f64) -> f64 {
    (1.0 - beta) * y + beta / 2.0
}

pub fn perturb_label(y: &LabelMap, beta: f64) -> Result<LabelMap> {
    ensure_domain((0.0..=2.0).contains(&beta), || {
        format!("perturbation strength must lie in [0, 2], got {beta}")
    })?;
    ensure_hard(y)?;
    Ok(y.map(|v| perturb_value(v, beta)))
}

/// Dynamic moderation: one truncated-normal offset per image added to the
/// moderated label.
pub fn perturb_dynamic(y: &LabelMap, source: &mut RandomSource) -> Result<LabelMap> {
    perturb_dynamic_with_beta(y, 1.0, source)
}

fn perturb_dynamic_with_beta(y: &LabelMap, beta: f64, source: &mut RandomSource) -> Result<LabelMap> {
    ensure_hard(y)?;
    let e = source.truncated_normal(-0.5, 0.5, 0.0, 1.0)?;
    Ok(y.map(|v| (perturb_value(v, beta) + e).clamp(0.0, 1.0)))
}

/// Deterministic part of the perturbed target for `spec` (dynamic moderation
/// without its zero-mean noise).
pub fn perturbed_target(y: &LabelMap, spec: &PerturbationSpec) -> Result<LabelMap> {
    perturb_label(y, spec.beta)
}

/// Draws `z ~ Bernoulli(alpha_i)` once for the whole image and returns the
/// supervision to train on together with `z`.
pub fn sample_supervision(
    y: &LabelMap,
    alpha_i: f64,
    spec: &PerturbationSpec,
    source: &mut RandomSource,
) -> Result<(LabelMap, bool)> {
    let limit = spec.max_alpha();
    ensure_domain((0.0..=limit).contains(&alpha_i), || {
        format!(
            "alpha {alpha_i} outside [0, {limit}] for {} with beta {}",
            spec.technique, spec.beta
        )
    })?;
    ensure_hard(y)?;
    let z = source.bernoulli(alpha_i)?;
    if !z {
        return Ok((y.clone(), false));
    }
    let label = if spec.noise {
        perturb_dynamic_with_beta(y, spec.beta, source)?
    } else {
        perturb_label(y, spec.beta)?
    };
    Ok((label, true))
}

/// Confidence of the expected perturbed label, `1 - alpha * beta / 2`.
pub fn expected_confidence(alpha: f64, beta: f64) -> Result<f64> {
    let product = alpha * beta;
    ensure_domain((0.0..1.0).contains(&product), || {
        format!("alpha * beta must lie in [0, 1), got {product}")
    })?;
    Ok(1.0 - product / 2.0)
}

/// Smoothed label `(1 - sigma) y + sigma / 2`.
pub fn smooth_label(y: &Grid, sigma: f64) -> Result<Grid> {
    ensure_domain((0.0..1.0).contains(&sigma), || {
        format!("smoothing strength must lie in [0, 1), got {sigma}")
    })?;
    Ok(y.map(|v| (1.0 - sigma) * v + sigma / 2.0))
}
