//! Two-phase training: a plain-BCE baseline that fixes the ideal accuracy,
//! then a continuation under stochastic label perturbation, optionally with
//! per-sample adaptive α (MEI, MC) or β (ALS).

use std::fmt;
use std::str::FromStr;

use crate::aslp::{update_alphas, update_betas, AdaptiveMode, CalibState, DEFAULT_ETA, DEFAULT_LAMBDA};
use crate::error::{ensure_domain, Error, Result};
use crate::grid::{Grid, LabelMap, ProbabilityMap};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::KeyValues;
use crate::loss::{bce, bce_pixel};
use crate::metrics::{
    accuracy, bin_equal_width, joint_histogram, reliability_export, summarize, winning_class, JointHistogram,
    MetricSummary, ReliabilityRow,
};
use crate::model::{
    adam_step, backward, forward, probs_at_temperature, sigmoid, AdamState, SegmenterParams, DEFAULT_HIDDEN,
};
use crate::par::par_map;
use crate::perturb::{perturbed_target, sample_supervision, PerturbationSpec, Technique};
use crate::rng::{RandomSource, SHUFFLE_STREAM};
use crate::synth::{select, SampleRecord, Split};

pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_BINS: usize = 10;
pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);
pub const TEMPERATURE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Baseline,
    /// Static perturbation probability shared by every sample.
    Slp,
    Adaptive(AdaptiveMode),
}

impl TrainMode {
    pub fn token(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Slp => "slp",
            TrainMode::Adaptive(m) => m.token(),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(TrainMode::Baseline),
            "slp" => Ok(TrainMode::Slp),
            other => other
                .parse()
                .map(TrainMode::Adaptive)
                .map_err(|_| Error::Config(format!("unknown mode '{s}' (expected baseline|slp|mei|mc|als)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub spec: PerturbationSpec,
    /// Static α, used by `slp` only.
    pub alpha: f64,
    pub eta: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub bins: usize,
    pub hidden: usize,
}

impl TrainConfig {
    /// Defaults for `mode`: hard inversion for slp/mei/mc, label smoothing at
    /// β = 0.03 for als.
    pub fn new(mode: TrainMode) -> Self {
        let spec = match mode {
            TrainMode::Adaptive(AdaptiveMode::Als) => PerturbationSpec::new(Technique::LabelSmoothing, 0.03),
            _ => PerturbationSpec::with_default_beta(Technique::HardInversion),
        }
        .expect("default perturbation spec is valid");
        Self {
            mode,
            spec,
            alpha: 0.0,
            eta: DEFAULT_ETA,
            lambda: DEFAULT_LAMBDA,
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LR,
            seed: 0,
            bins: DEFAULT_BINS,
            hidden: DEFAULT_HIDDEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if self.bins == 0 {
            return bad("bins must be at least 1".into());
        }
        match self.mode {
            TrainMode::Slp => {
                let limit = self.spec.max_alpha();
                if !(0.0..=limit).contains(&self.alpha) {
                    return bad(format!(
                        "static alpha {} outside [0, {limit}] for beta {}",
                        self.alpha,
                        self.spec.beta()
                    ));
                }
            }
            TrainMode::Adaptive(mode) => {
                if !(self.eta > 0.0 && self.eta.is_finite()) {
                    return bad(format!("eta must be > 0, got {}", self.eta));
                }
                if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
                    return bad(format!("lambda must be >= 0, got {}", self.lambda));
                }
                let is_ls = self.spec.technique() == Technique::LabelSmoothing;
                if (mode == AdaptiveMode::Als) != is_ls {
                    return bad(format!("mode {mode} cannot use technique {}", self.spec.technique()));
                }
            }
            TrainMode::Baseline => {}
        }
        Ok(())
    }

    /// The configuration as `key=value` pairs, stored in checkpoints.
    pub fn echo(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("mode", self.mode);
        kv.insert("technique", self.spec.technique().token());
        kv.insert("beta", self.spec.beta());
        kv.insert("alpha", self.alpha);
        kv.insert("eta", self.eta);
        kv.insert("lambda", self.lambda);
        kv.insert("epochs", self.epochs);
        kv.insert("lr", self.lr);
        kv.insert("seed", self.seed);
        kv.insert("bins", self.bins);
        kv.insert("hidden", self.hidden);
        kv
    }
}

/// Distribution summary of per-sample α or β: min, quartiles, max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles(pub [f64; 5]);

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
        Some(Self([at(0.0), at(0.25), at(0.5), at(0.75), at(1.0)]))
    }
}

impl fmt::Display for Quartiles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d, e] = self.0;
        write!(f, "[{a:.4} {b:.4} {c:.4} {d:.4} {e:.4}]")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// Epoch index within the current phase, from 0.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub alphas: Option<Quartiles>,
    pub betas: Option<Quartiles>,
}

/// Receives one report per finished epoch.
pub type Progress<'a> = &'a mut dyn FnMut(&EpochReport);

fn train_split(records: &[SampleRecord]) -> Result<Vec<&SampleRecord>> {
    let mut train = select(records, Split::Train);
    if train.is_empty() {
        return Err(Error::Config("dataset has no training samples".into()));
    }
    train.sort_by_key(|r| r.sample_id);
    Ok(train)
}

fn common_dims(records: &[&SampleRecord]) -> Result<(usize, usize)> {
    let dims = records[0].image.dims();
    if let Some(r) = records.iter().find(|r| r.image.dims() != dims) {
        return Err(Error::Shape(format!(
            "sample {} is {:?}, expected {:?}",
            r.sample_id,
            r.image.dims(),
            dims
        )));
    }
    Ok(dims)
}

fn ensure_finite(loss: f64, epoch: usize, sample_id: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss became {loss} at epoch {epoch}, sample {sample_id}")))
    }
}

fn visiting_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    RandomSource::for_sample(seed, SHUFFLE_STREAM, epoch).shuffle(&mut order);
    order
}

/// Probability maps for `records`, narrowed to `f32` precision so that maps
/// written to disk evaluate identically.
pub fn predict(params: &SegmenterParams, records: &[&SampleRecord], temperature: Option<f64>) -> Vec<ProbabilityMap> {
    par_map(records, |r| {
        let out = forward(params, &r.image);
        let probs = match temperature {
            Some(t) => probs_at_temperature(&out.logits, t),
            None => out.probs,
        };
        probs.map(|v| v as f32 as f64)
    })
}

fn split_accuracy(params: &SegmenterParams, records: &[&SampleRecord]) -> Result<f64> {
    let preds = predict(params, records, None);
    let gts: Vec<LabelMap> = records.iter().map(|r| r.label.clone()).collect();
    accuracy(&preds, &gts)
}

fn validation_accuracy(params: &SegmenterParams, records: &[SampleRecord]) -> Result<f64> {
    let val = select(records, Split::Val);
    if val.is_empty() {
        return Err(Error::Config("dataset has no validation samples".into()));
    }
    split_accuracy(params, &val)
}

/// Trains from scratch on plain BCE and records validation accuracy as the
/// ideal accuracy.
pub fn train_baseline(config: &TrainConfig, records: &[SampleRecord], progress: Progress) -> Result<Checkpoint> {
    config.validate()?;
    if config.mode != TrainMode::Baseline {
        return Err(Error::Config(format!("train_baseline called with mode {}", config.mode)));
    }
    let train = train_split(records)?;
    let dims = common_dims(&train)?;
    let mut params = SegmenterParams::init(config.hidden, config.seed);
    let mut adam = AdamState::new(config.hidden, config.lr);
    let mut val_accuracy = 0.0;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for i in visiting_order(config.seed, epoch as u64, train.len()) {
            let r = train[i];
            let out = forward(&params, &r.image);
            let loss = bce(&out.probs, &r.label)?.0;
            ensure_finite(loss, epoch, r.sample_id)?;
            total += loss;
            let grads = backward(&params, &out.cache, &r.label)?;
            adam_step(&mut params, &grads, &mut adam)?;
        }
        val_accuracy = validation_accuracy(&params, records)?;
        progress(&EpochReport {
            epoch,
            train_loss: total / train.len() as f64,
            val_accuracy,
            alphas: None,
            betas: None,
        });
    }
    if !params.is_finite() {
        return Err(Error::Numeric("baseline parameters are not finite".into()));
    }
    Ok(Checkpoint {
        params,
        adam,
        calib: None,
        ideal_accuracy: Some(val_accuracy),
        epochs: config.epochs as u64,
        image_dims: dims,
        config: config.echo(),
    })
}

/// Continues a baseline under stochastic label perturbation.
///
/// Each epoch visits every training image once in a shuffled order. Per
/// image, `z ~ Bernoulli(α_i)` selects ground truth or the perturbed label;
/// both BCE terms are accumulated for the epoch-end α/β update.
pub fn train_adaptive(
    config: &TrainConfig,
    records: &[SampleRecord],
    baseline: &Checkpoint,
    progress: Progress,
) -> Result<Checkpoint> {
    config.validate()?;
    if config.mode == TrainMode::Baseline {
        return Err(Error::Config("train_adaptive needs mode slp, mei, mc or als".into()));
    }
    let ideal = baseline
        .ideal_accuracy
        .ok_or_else(|| Error::State("baseline checkpoint carries no ideal accuracy".into()))?;
    let train = train_split(records)?;
    let dims = common_dims(&train)?;
    if dims != baseline.image_dims {
        return Err(Error::Shape(format!(
            "checkpoint was trained on {:?} images, data is {:?}",
            baseline.image_dims, dims
        )));
    }
    let mut params = baseline.params.clone();
    let mut adam = baseline.adam.clone();
    adam.lr = config.lr;
    let mut calib = match config.mode {
        TrainMode::Adaptive(mode) => {
            let mut c = CalibState::new(mode, train.len(), config.spec.beta(), config.eta, config.lambda)?;
            c.set_ideal_accuracy(ideal)?;
            Some(c)
        }
        _ => None,
    };
    let first_epoch = baseline.epochs;
    for epoch in 0..config.epochs {
        let global_epoch = first_epoch + epoch as u64;
        let mut total = 0.0;
        for i in visiting_order(config.seed, global_epoch, train.len()) {
            let r = train[i];
            let (alpha, spec) = match &calib {
                None => (config.alpha, config.spec),
                Some(c) if c.mode == AdaptiveMode::Als => {
                    (c.alphas[i], PerturbationSpec::new(Technique::LabelSmoothing, c.betas[i])?)
                }
                Some(c) => (c.alphas[i], config.spec),
            };
            let mut src = RandomSource::for_sample(config.seed, r.sample_id, global_epoch);
            let (target, _) = sample_supervision(&r.label, alpha, &spec, &mut src)?;
            let out = forward(&params, &r.image);
            let loss = bce(&out.probs, &target)?.0;
            ensure_finite(loss, epoch, r.sample_id)?;
            total += loss;
            if let Some(c) = calib.as_mut() {
                let loss_y = bce(&out.probs, &r.label)?;
                let loss_p = bce(&out.probs, &perturbed_target(&r.label, &spec)?)?;
                c.record(i, loss_y, loss_p)?;
            }
            let grads = backward(&params, &out.cache, &target)?;
            adam_step(&mut params, &grads, &mut adam)?;
        }
        let val_accuracy = validation_accuracy(&params, records)?;
        if let Some(c) = calib.as_mut() {
            match c.mode {
                AdaptiveMode::Als => update_betas(c, ideal)?,
                _ => update_alphas(c, val_accuracy)?,
            }
        }
        progress(&EpochReport {
            epoch,
            train_loss: total / train.len() as f64,
            val_accuracy,
            alphas: calib.as_ref().and_then(|c| Quartiles::of(&c.alphas)),
            betas: calib
                .as_ref()
                .filter(|c| c.mode == AdaptiveMode::Als)
                .and_then(|c| Quartiles::of(&c.betas)),
        });
    }
    if !params.is_finite() {
        return Err(Error::Numeric("parameters are not finite".into()));
    }
    Ok(Checkpoint {
        params,
        adam,
        calib,
        ideal_accuracy: Some(ideal),
        epochs: first_epoch + config.epochs as u64,
        image_dims: dims,
        config: config.echo(),
    })
}

/// Dispatches on `config.mode`; non-baseline modes need `baseline`.
pub fn train(
    config: &TrainConfig,
    records: &[SampleRecord],
    baseline: Option<&Checkpoint>,
    progress: Progress,
) -> Result<Checkpoint> {
    match (config.mode, baseline) {
        (TrainMode::Baseline, _) => train_baseline(config, records, progress),
        (_, Some(b)) => train_adaptive(config, records, b, progress),
        (mode, None) => Err(Error::Protocol(format!("mode {mode} requires a baseline checkpoint"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub summary: MetricSummary,
    /// Equal-width reliability rows at the requested bin count.
    pub reliability: Vec<ReliabilityRow>,
    pub joint: JointHistogram,
    pub predictions: Vec<ProbabilityMap>,
}

/// Scores probability maps against ground truth.
pub fn evaluate_maps(preds: Vec<ProbabilityMap>, gts: &[LabelMap], bins: usize) -> Result<Evaluation> {
    let summary = summarize(&preds, gts, bins)?;
    let per_image: Vec<_> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| winning_class(p, g))
        .collect::<Result<_>>()?;
    let pooled: Vec<_> = per_image.iter().flatten().copied().collect();
    let reliability = reliability_export(&bin_equal_width(&pooled, bins)?);
    let joint = joint_histogram(&per_image, bins, bins)?;
    Ok(Evaluation { summary, reliability, joint, predictions: preds })
}

pub fn evaluate(
    checkpoint: &Checkpoint,
    records: &[&SampleRecord],
    bins: usize,
    temperature: Option<f64>,
) -> Result<Evaluation> {
    ensure_domain(!records.is_empty(), || "cannot evaluate an empty split".into())?;
    if let Some(t) = temperature {
        ensure_domain(t > 0.0 && t.is_finite(), || format!("temperature must be > 0, got {t}"))?;
    }
    if let Some(r) = records.iter().find(|r| r.image.dims() != checkpoint.image_dims) {
        return Err(Error::Shape(format!(
            "sample {} is {:?}, checkpoint expects {:?}",
            r.sample_id,
            r.image.dims(),
            checkpoint.image_dims
        )));
    }
    let preds = predict(&checkpoint.params, records, temperature);
    let gts: Vec<LabelMap> = records.iter().map(|r| r.label.clone()).collect();
    evaluate_maps(preds, &gts, bins)
}

/// Mean BCE of `sigmoid(logit / t)` against `labels`.
pub fn temperature_loss(logits: &[f64], labels: &[f64], t: f64) -> f64 {
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| bce_pixel(sigmoid(z / t), y))
        .sum();
    sum / logits.len() as f64
}

/// Golden-section search for the temperature on `log t`.
pub fn fit_temperature_logits(logits: &[f64], labels: &[f64]) -> Result<f64> {
    ensure_domain(!logits.is_empty() && logits.len() == labels.len(), || {
        format!("need matching non-empty logits and labels, got {} and {}", logits.len(), labels.len())
    })?;
    let f = |u: f64| temperature_loss(logits, labels, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TEMPERATURE_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Ok(((a + b) / 2.0).exp())
}

/// Fits a temperature on the validation split of `records`.
pub fn fit_temperature(checkpoint: &Checkpoint, records: &[SampleRecord]) -> Result<f64> {
    let val = select(records, Split::Val);
    if val.is_empty() {
        return Err(Error::Config("dataset has no validation samples".into()));
    }
    let logits: Vec<Grid> = par_map(&val, |r| forward(&checkpoint.params, &r.image).logits);
    let flat: Vec<f64> = logits.iter().flat_map(|g| g.values().iter().copied()).collect();
    let labels: Vec<f64> = val.iter().flat_map(|r| r.label.values().iter().copied()).collect();
    fit_temperature_logits(&flat, &labels)
}
