//! CSV exports. Reals are printed with 9 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{JointHistogram, MetricSummary, ReliabilityRow};

/// Formats `x` like C's `%.9g`.
pub fn sig9(x: f64) -> String {
    const DIGITS: i32 = 9;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..DIGITS).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (DIGITS - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(sig9).unwrap_or_default()
}

pub fn reliability_csv(rows: &[ReliabilityRow]) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,mean_conf,mean_acc,gap\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            opt(r.lo),
            opt(r.hi),
            r.count,
            opt(r.mean_confidence),
            opt(r.mean_accuracy),
            opt(r.gap)
        );
    }
    out
}

pub fn joint_csv(h: &JointHistogram) -> String {
    let mut out = String::from("conf_bin,acc_bin,count\n");
    for c in 0..h.conf_bins {
        for a in 0..h.acc_bins {
            let _ = writeln!(out, "{c},{a},{}", h.get(c, a));
        }
    }
    out
}

pub fn summary_csv(summary: &MetricSummary) -> String {
    let mut out = String::from("metric,value\n");
    for (name, value) in summary.entries() {
        let _ = writeln!(out, "{name},{}", sig9(value));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
