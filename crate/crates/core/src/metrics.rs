//! Calibration and dense-classification metrics for binary predictions.
//!
//! Every prediction pixel becomes a [`ConfidenceRecord`]: the winning-class
//! probability `|f - 0.5| + 0.5` and whether the thresholded label `f > 0.5`
//! matches ground truth. Records are grouped into bins and reduced to
//! calibration errors:
//!
//! * `ece`  : `sum_i |B_i|/N * |C_i - A_i|`
//! * `oe`   : same sum restricted to bins with `C_i > A_i`
//! * sweep  : equal-mass bins, bin count grown while bin accuracy stays monotone
//! * debias : `sum_i |B_i|/N * [(C_i - A_i)^2 - A_i (1 - A_i) / (|B_i| - 1)]`
//!
//! Dataset metrics pool pixels from all images.

use crate::error::{ensure_domain, Error, Result};
use crate::grid::{Grid, LabelMap, ProbabilityMap};
use crate::loss::entropy;

/// Number of evenly spaced binarisation thresholds for max-F and max-E.
pub const THRESHOLDS: usize = 256;
/// `xi^2` weight of precision in the F-measure.
pub const F_BETA_SQ: f64 = 0.3;
pub const DEFAULT_SWEEP_MAX_BINS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceRecord {
    pub confidence: f64,
    pub correct: bool,
}

impl ConfidenceRecord {
    /// Record for a single foreground probability `f` against hard label `y`.
    #[inline]
    pub fn from_prediction(f: f64, y: f64) -> Self {
        let predicted = f > 0.5;
        Self {
            confidence: (f - 0.5).abs() + 0.5,
            correct: predicted == (y > 0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStats {
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
    /// Interval bounds, present for equal-width bins only.
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl BinStats {
    fn from_sums(count: usize, conf_sum: f64, correct: usize, bounds: Option<(f64, f64)>) -> Self {
        let (mean_confidence, mean_accuracy) = if count == 0 {
            (0.0, 0.0)
        } else {
            (conf_sum / count as f64, correct as f64 / count as f64)
        };
        Self {
            count,
            mean_confidence,
            mean_accuracy,
            lo: bounds.map(|b| b.0),
            hi: bounds.map(|b| b.1),
        }
    }

    pub fn gap(&self) -> f64 {
        self.mean_confidence - self.mean_accuracy
    }
}

pub fn winning_class(pred: &ProbabilityMap, gt: &LabelMap) -> Result<Vec<ConfidenceRecord>> {
    pred.ensure_same_dims(gt, "prediction vs ground truth")?;
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&f, &y)| ConfidenceRecord::from_prediction(f, y))
        .collect())
}

/// Hard label map `1(f > 0.5)`.
pub fn predict_label(pred: &ProbabilityMap) -> LabelMap {
    pred.map(|f| if f > 0.5 { 1.0 } else { 0.0 })
}

#[inline]
fn bin_lower(i: usize, bins: usize) -> f64 {
    i as f64 / bins as f64
}

/// Index of the `[i/B, (i+1)/B)` interval holding `x`; the top bin is closed.
pub fn equal_width_index(x: f64, bins: usize) -> usize {
    let mut idx = ((x * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    // Correct floating-point drift so membership agrees with the bounds.
    if idx > 0 && x < bin_lower(idx, bins) {
        idx -= 1;
    }
    if idx + 1 < bins && x >= bin_lower(idx + 1, bins) {
        idx += 1;
    }
    idx
}

pub fn bin_equal_width(records: &[ConfidenceRecord], bins: usize) -> Result<Vec<BinStats>> {
    ensure_domain(bins >= 1, || "bin count must be >= 1".into())?;
    let mut counts = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    let mut correct = vec![0usize; bins];
    for r in records {
        let i = equal_width_index(r.confidence, bins);
        counts[i] += 1;
        conf[i] += r.confidence;
        correct[i] += r.correct as usize;
    }
    Ok((0..bins)
        .map(|i| {
            let hi = if i + 1 == bins { 1.0 } else { bin_lower(i + 1, bins) };
            BinStats::from_sums(counts[i], conf[i], correct[i], Some((bin_lower(i, bins), hi)))
        })
        .collect())
}

/// Records sorted by confidence, ties kept in original order.
pub fn sort_by_confidence(records: &[ConfidenceRecord]) -> Vec<ConfidenceRecord> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));
    sorted
}

fn bin_sorted(sorted: &[ConfidenceRecord], bins: usize) -> Vec<BinStats> {
    let n = sorted.len();
    (0..bins)
        .map(|i| {
            let chunk = &sorted[i * n / bins..(i + 1) * n / bins];
            let conf: f64 = chunk.iter().map(|r| r.confidence).sum();
            let correct = chunk.iter().filter(|r| r.correct).count();
            BinStats::from_sums(chunk.len(), conf, correct, None)
        })
        .collect()
}

/// Equal-mass bins: bin `i` takes sorted positions `[floor(iN/B), floor((i+1)N/B))`.
pub fn bin_equal_mass(records: &[ConfidenceRecord], bins: usize) -> Result<Vec<BinStats>> {
    ensure_domain(bins >= 1, || "bin count must be >= 1".into())?;
    ensure_domain(bins <= records.len(), || {
        format!("{bins} equal-mass bins need at least as many records, got {}", records.len())
    })?;
    Ok(bin_sorted(&sort_by_confidence(records), bins))
}

pub fn ece(bins: &[BinStats], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.mean_confidence - b.mean_accuracy).abs())
        .fold(0.0, |acc, x| acc + x)
}

/// Over-confidence error: only bins whose confidence exceeds accuracy count.
pub fn oe(bins: &[BinStats], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    bins.iter()
        .filter(|b| b.count > 0 && b.mean_confidence > b.mean_accuracy)
        .map(|b| b.count as f64 / n as f64 * (b.mean_confidence - b.mean_accuracy))
        // Not `sum()`: an empty f64 sum is -0.0.
        .fold(0.0, |acc, x| acc + x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub value: f64,
    pub over_confidence: f64,
    pub chosen_bins: usize,
    pub bins: Vec<BinStats>,
}

fn accuracy_monotone(bins: &[BinStats]) -> bool {
    bins.windows(2).all(|w| w[0].mean_accuracy <= w[1].mean_accuracy)
}

/// Monotonic sweep: equal-mass bin counts `1, 2, ...` are tried until bin
/// accuracy stops being non-decreasing; the last monotone count is used.
pub fn ece_sweep(records: &[ConfidenceRecord], max_bins: usize, p: f64) -> Result<SweepResult> {
    ensure_domain(!records.is_empty(), || "sweep ECE needs at least one record".into())?;
    ensure_domain(max_bins >= 1, || "sweep needs max_bins >= 1".into())?;
    ensure_domain(p > 0.0, || format!("sweep exponent must be > 0, got {p}"))?;
    let sorted = sort_by_confidence(records);
    let n = sorted.len();
    let limit = max_bins.min(n);
    let mut chosen = bin_sorted(&sorted, 1);
    for b in 2..=limit {
        let candidate = bin_sorted(&sorted, b);
        if !accuracy_monotone(&candidate) {
            break;
        }
        chosen = candidate;
    }
    let weighted: f64 = chosen
        .iter()
        .map(|b| b.count as f64 / n as f64 * (b.mean_confidence - b.mean_accuracy).abs().powf(p))
        .fold(0.0, |acc, x| acc + x);
    Ok(SweepResult {
        value: weighted.powf(1.0 / p),
        over_confidence: oe(&chosen, n),
        chosen_bins: chosen.len(),
        bins: chosen,
    })
}

/// Debiased ECE over equal-width bins. Bins holding fewer than two records
/// are skipped and their mass is left out of the normalisation. The result
/// may be negative.
pub fn ece_debias(bins: &[BinStats]) -> f64 {
    let usable: Vec<&BinStats> = bins.iter().filter(|b| b.count >= 2).collect();
    let mass: usize = usable.iter().map(|b| b.count).sum();
    if mass == 0 {
        return 0.0;
    }
    usable
        .iter()
        .map(|b| {
            let gap = b.mean_confidence - b.mean_accuracy;
            let variance = b.mean_accuracy * (1.0 - b.mean_accuracy) / (b.count - 1) as f64;
            b.count as f64 / mass as f64 * (gap * gap - variance)
        })
        .sum()
}

fn ensure_pairs(preds: &[Grid], gts: &[Grid]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        p.ensure_same_dims(g, &format!("image {i}"))?;
    }
    Ok(())
}

/// Fraction of pixels, pooled over all images, where `1(f > 0.5)` equals the label.
pub fn accuracy(preds: &[ProbabilityMap], gts: &[LabelMap]) -> Result<f64> {
    ensure_pairs(preds, gts)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        for (&f, &y) in p.values().iter().zip(g.values()) {
            correct += ((f > 0.5) == (y > 0.5)) as usize;
        }
        total += p.len();
    }
    ensure_domain(total > 0, || "accuracy over an empty dataset".into())?;
    Ok(correct as f64 / total as f64)
}

/// Threshold `k` of the evenly spaced grid on `[0, 1]`.
#[inline]
pub fn threshold(k: usize) -> f64 {
    k as f64 / (THRESHOLDS - 1) as f64
}

pub fn f_measure(precision: f64, recall: f64) -> Option<f64> {
    let denom = F_BETA_SQ * precision + recall;
    (denom > 0.0).then(|| (1.0 + F_BETA_SQ) * precision * recall / denom)
}

/// Maximum F-measure over the threshold grid, with pixels pooled across
/// images. A pixel is predicted foreground when `f >= t`.
pub fn f_measure_max(preds: &[ProbabilityMap], gts: &[LabelMap]) -> Result<f64> {
    ensure_pairs(preds, gts)?;
    let positives: usize = gts
        .iter()
        .map(|g| g.values().iter().filter(|&&y| y > 0.5).count())
        .sum();
    if positives == 0 {
        return Err(Error::Domain(
            "F-measure undefined: ground truth has no foreground pixels".into(),
        ));
    }
    // Foreground and background predictions per threshold via histograms
    // over the threshold grid.
    let mut fg_hist = vec![0usize; THRESHOLDS];
    let mut bg_hist = vec![0usize; THRESHOLDS];
    for (p, g) in preds.iter().zip(gts) {
        for (&f, &y) in p.values().iter().zip(g.values()) {
            // Highest k with threshold(k) <= f.
            let k = highest_threshold_at_or_below(f);
            if let Some(k) = k {
                if y > 0.5 {
                    fg_hist[k] += 1;
                } else {
                    bg_hist[k] += 1;
                }
            }
        }
    }
    let mut best: Option<f64> = None;
    let (mut tp, mut fp) = (0usize, 0usize);
    for k in (0..THRESHOLDS).rev() {
        tp += fg_hist[k];
        fp += bg_hist[k];
        if tp + fp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        if let Some(f) = f_measure(precision, recall) {
            best = Some(best.map_or(f, |b: f64| b.max(f)));
        }
    }
    best.ok_or_else(|| Error::Domain("F-measure undefined at every threshold".into()))
}

fn highest_threshold_at_or_below(f: f64) -> Option<usize> {
    if f < 0.0 {
        return None;
    }
    let mut k = ((f * (THRESHOLDS - 1) as f64).floor() as usize).min(THRESHOLDS - 1);
    while k > 0 && threshold(k) > f {
        k -= 1;
    }
    while k + 1 < THRESHOLDS && threshold(k + 1) <= f {
        k += 1;
    }
    (threshold(k) <= f).then_some(k)
}

/// Enhanced-alignment score of a binary foreground map against ground truth.
/// Pixels whose alignment denominator is zero get `xi = 0`.
pub fn enhanced_alignment(binary: &[f64], gt: &[f64]) -> f64 {
    let n = binary.len() as f64;
    let mean_fm = binary.iter().sum::<f64>() / n;
    let mean_gt = gt.iter().sum::<f64>() / n;
    let total: f64 = binary
        .iter()
        .zip(gt)
        .map(|(&fm, &g)| {
            let a = g - mean_gt;
            let b = fm - mean_fm;
            let denom = a * a + b * b;
            let xi = if denom > 0.0 { 2.0 * a * b / denom } else { 0.0 };
            (1.0 + xi) * (1.0 + xi) / 4.0
        })
        .sum();
    total / n
}

fn e_measure_curve(pred: &ProbabilityMap, gt: &LabelMap) -> Vec<f64> {
    let mut binary = vec![0.0; pred.len()];
    (0..THRESHOLDS)
        .map(|k| {
            let t = threshold(k);
            for (b, &f) in binary.iter_mut().zip(pred.values()) {
                *b = if f >= t { 1.0 } else { 0.0 };
            }
            enhanced_alignment(&binary, gt.values())
        })
        .collect()
}

/// Maximum E-measure of one image over the threshold grid.
pub fn e_measure_max(pred: &ProbabilityMap, gt: &LabelMap) -> Result<f64> {
    pred.ensure_same_dims(gt, "prediction vs ground truth")?;
    Ok(e_measure_curve(pred, gt).into_iter().fold(f64::MIN, f64::max))
}

/// Dataset max E-measure: the per-threshold score is averaged over images
/// before taking the maximum over thresholds.
pub fn e_measure_max_dataset(preds: &[ProbabilityMap], gts: &[LabelMap]) -> Result<f64> {
    ensure_pairs(preds, gts)?;
    ensure_domain(!preds.is_empty(), || "E-measure over an empty dataset".into())?;
    let mut curve = vec![0.0; THRESHOLDS];
    for (p, g) in preds.iter().zip(gts) {
        for (acc, v) in curve.iter_mut().zip(e_measure_curve(p, g)) {
            *acc += v;
        }
    }
    Ok(curve
        .into_iter()
        .map(|v| v / preds.len() as f64)
        .fold(f64::MIN, f64::max))
}

/// One row of a reliability diagram export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityRow {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_confidence: Option<f64>,
    pub mean_accuracy: Option<f64>,
    /// Signed `C - A`.
    pub gap: Option<f64>,
}

pub fn reliability_export(bins: &[BinStats]) -> Vec<ReliabilityRow> {
    bins.iter()
        .map(|b| {
            let filled = b.count > 0;
            ReliabilityRow {
                lo: b.lo,
                hi: b.hi,
                count: b.count,
                mean_confidence: filled.then_some(b.mean_confidence),
                mean_accuracy: filled.then_some(b.mean_accuracy),
                gap: filled.then_some(b.gap()),
            }
        })
        .collect()
}

/// Count grid over (bin confidence in `[0.5, 1]`) x (bin accuracy in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    pub conf_bins: usize,
    pub acc_bins: usize,
    /// Row-major over `(conf_bin, acc_bin)`.
    pub counts: Vec<u64>,
}

impl JointHistogram {
    pub fn get(&self, conf_bin: usize, acc_bin: usize) -> u64 {
        self.counts[conf_bin * self.acc_bins + acc_bin]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// For every image, bins its records by confidence (equal width over
/// `[0.5, 1]`), then adds each non-empty bin's `(C, A)` pair, weighted by
/// the bin's pixel count, to the joint grid.
pub fn joint_histogram(
    per_image: &[Vec<ConfidenceRecord>],
    conf_bins: usize,
    acc_bins: usize,
) -> Result<JointHistogram> {
    ensure_domain(conf_bins >= 1 && acc_bins >= 1, || "histogram bins must be >= 1".into())?;
    let mut counts = vec![0u64; conf_bins * acc_bins];
    let conf_index = |c: f64| equal_width_index(((c - 0.5) * 2.0).clamp(0.0, 1.0), conf_bins);
    for records in per_image {
        let mut n = vec![0usize; conf_bins];
        let mut conf = vec![0.0; conf_bins];
        let mut correct = vec![0usize; conf_bins];
        for r in records {
            let i = conf_index(r.confidence);
            n[i] += 1;
            conf[i] += r.confidence;
            correct[i] += r.correct as usize;
        }
        for i in 0..conf_bins {
            if n[i] == 0 {
                continue;
            }
            let c = conf[i] / n[i] as f64;
            let a = correct[i] as f64 / n[i] as f64;
            let ci = conf_index(c);
            let ai = equal_width_index(a, acc_bins);
            counts[ci * acc_bins + ai] += n[i] as u64;
        }
    }
    Ok(JointHistogram {
        conf_bins,
        acc_bins,
        counts,
    })
}

/// Every metric reported for one dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub pixels: usize,
    pub accuracy: f64,
    pub ece_ew: f64,
    pub oe_ew: f64,
    pub ece_em: f64,
    pub oe_em: f64,
    pub ece_sweep: f64,
    pub oe_sweep: f64,
    pub sweep_bins: usize,
    pub ece_debias: f64,
    /// `None` when ground truth has no foreground (e.g. out-of-distribution sets).
    pub f_max: Option<f64>,
    pub e_max: f64,
    pub mean_entropy: f64,
}

impl MetricSummary {
    /// `(name, value)` pairs in export order; absent values are skipped.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("pixels", self.pixels as f64),
            ("accuracy", self.accuracy),
            ("ece_ew", self.ece_ew),
            ("oe_ew", self.oe_ew),
            ("ece_em", self.ece_em),
            ("oe_em", self.oe_em),
            ("ece_sweep", self.ece_sweep),
            ("oe_sweep", self.oe_sweep),
            ("sweep_bins", self.sweep_bins as f64),
            ("ece_debias", self.ece_debias),
        ];
        if let Some(f) = self.f_max {
            out.push(("f_max", f));
        }
        out.push(("e_max", self.e_max));
        out.push(("mean_entropy", self.mean_entropy));
        out
    }
}

/// Pools all pixels of a split and computes every metric with `bins` bins.
/// Equal-mass binning uses `min(bins, pixels)` bins.
pub fn summarize(preds: &[ProbabilityMap], gts: &[LabelMap], bins: usize) -> Result<MetricSummary> {
    ensure_pairs(preds, gts)?;
    ensure_domain(!preds.is_empty(), || "cannot summarise an empty split".into())?;
    let mut records = Vec::with_capacity(preds.iter().map(Grid::len).sum());
    for (p, g) in preds.iter().zip(gts) {
        records.extend(winning_class(p, g)?);
    }
    let n = records.len();
    let ew = bin_equal_width(&records, bins)?;
    let em = bin_equal_mass(&records, bins.min(n))?;
    let sweep = ece_sweep(&records, DEFAULT_SWEEP_MAX_BINS, 1.0)?;
    let f_max = match f_measure_max(preds, gts) {
        Ok(f) => Some(f),
        Err(Error::Domain(_)) => None,
        Err(e) => return Err(e),
    };
    let entropy_sum: f64 = preds.iter().map(|p| entropy(p).0 * p.len() as f64).sum();
    Ok(MetricSummary {
        pixels: n,
        accuracy: accuracy(preds, gts)?,
        ece_ew: ece(&ew, n),
        oe_ew: oe(&ew, n),
        ece_em: ece(&em, n),
        oe_em: oe(&em, n),
        ece_sweep: sweep.value,
        oe_sweep: sweep.over_confidence,
        sweep_bins: sweep.chosen_bins,
        ece_debias: ece_debias(&ew),
        f_max,
        e_max: e_measure_max_dataset(preds, gts)?,
        mean_entropy: entropy_sum / n as f64,
    })
}
