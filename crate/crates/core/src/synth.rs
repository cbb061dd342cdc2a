//! Synthetic blob-segmentation data and an out-of-distribution texture set.
//!
//! In-distribution images hold one or more filled ellipses. Pixel intensities
//! are drawn independently from overlapping normals, so intensity alone never
//! separates the classes; `overlap` (ρ) pulls both means toward 0.5. The
//! out-of-distribution set is sinusoid textures with no foreground at all.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap};
use crate::io::config::KeyValues;
use crate::io::mapfile::{read_map_as, write_map, MapDtype};
use crate::par::par_map;
use crate::rng::{RandomSource, StreamKey};

pub const FOREGROUND_MEAN: f64 = 0.7;
pub const BACKGROUND_MEAN: f64 = 0.3;
pub const INTENSITY_SIGMA: f64 = 0.15;
pub const MANIFEST_NAME: &str = "manifest.tsv";

// Epoch slot used for data-generation streams; training epochs never get here.
const GENERATION_EPOCH: u64 = u64::MAX - 16;
const OOD_GRATINGS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Ood];

    pub fn token(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.token().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown split '{s}' (expected train|val|test|ood)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub image: Grid,
    pub label: LabelMap,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Ellipse semi-axis range as a fraction of the shorter image side.
    pub min_radius: f64,
    pub max_radius: f64,
    /// ρ in `[0, 1]`: 0 keeps the means at 0.7/0.3, 1 collapses both to 0.5.
    pub overlap: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            n_train: 400,
            n_val: 100,
            n_test: 200,
            n_ood: 100,
            min_blobs: 1,
            max_blobs: 3,
            min_radius: 0.1,
            max_radius: 0.3,
            overlap: 0.4,
            seed: 0,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "height", "width", "n_train", "n_val", "n_test", "n_ood", "min_blobs", "max_blobs", "min_radius", "max_radius", "overlap",
    "seed",
];

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height < 4 || self.width < 4 {
            return bad(format!("image size {}x{} too small (min 4x4)", self.height, self.width));
        }
        for (name, n) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test), ("n_ood", self.n_ood)] {
            if n == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return bad(format!("blob range {}..={} is invalid", self.min_blobs, self.max_blobs));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius && self.max_radius <= 1.0) {
            return bad(format!("radius range {}..={} is invalid", self.min_radius, self.max_radius));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap {} outside [0, 1]", self.overlap));
        }
        Ok(())
    }

    /// Reads overrides from a `key = value` file on top of the defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.ensure_known(CONFIG_KEYS)?;
        let mut c = Self::default();
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = kv.get(stringify!($field))? {
                    c.$field = v;
                }
            )*};
        }
        take!(height, width, n_train, n_val, n_test, n_ood, min_blobs, max_blobs, min_radius, max_radius, overlap, seed);
        c.validate()?;
        Ok(c)
    }

    pub fn foreground_mean(&self) -> f64 {
        (1.0 - self.overlap) * FOREGROUND_MEAN + self.overlap * 0.5
    }

    pub fn background_mean(&self) -> f64 {
        (1.0 - self.overlap) * BACKGROUND_MEAN + self.overlap * 0.5
    }

    fn id_ranges(&self) -> [(Split, u64, usize); 4] {
        let t = self.n_train as u64;
        let v = t + self.n_val as u64;
        let te = v + self.n_test as u64;
        [
            (Split::Train, 0, self.n_train),
            (Split::Val, t, self.n_val),
            (Split::Test, v, self.n_test),
            (Split::Ood, te, self.n_ood),
        ]
    }
}

// Stored intensities are exactly representable in f32 so that map files
// round-trip without loss.
fn store(v: f64) -> f64 {
    v.clamp(0.0, 1.0) as f32 as f64
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(config: &GeneratorConfig, src: &mut RandomSource) -> Self {
        let (h, w) = (config.height as f64, config.width as f64);
        let span = h.min(w);
        let angle = src.uniform() * PI;
        Self {
            cy: h * (0.2 + 0.6 * src.uniform()),
            cx: w * (0.2 + 0.6 * src.uniform()),
            ry: span * (config.min_radius + (config.max_radius - config.min_radius) * src.uniform()),
            rx: span * (config.min_radius + (config.max_radius - config.min_radius) * src.uniform()),
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        let dy = r as f64 + 0.5 - self.cy;
        let dx = c as f64 + 0.5 - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn blob_sample(config: &GeneratorConfig, sample_id: u64, split: Split) -> SampleRecord {
    let mut src = RandomSource::new(config.seed, StreamKey::new(sample_id, GENERATION_EPOCH));
    let blobs = config.min_blobs + src.below(config.max_blobs - config.min_blobs + 1);
    let ellipses: Vec<Ellipse> = (0..blobs).map(|_| Ellipse::random(config, &mut src)).collect();
    let label = Grid::from_fn(config.height, config.width, |r, c| {
        ellipses.iter().any(|e| e.contains(r, c)) as u8 as f64
    });
    let (fg, bg) = (config.foreground_mean(), config.background_mean());
    let image = Grid::from_fn(config.height, config.width, |r, c| {
        let mean = if label.get(r, c) == 1.0 { fg } else { bg };
        store(src.normal(mean, INTENSITY_SIGMA))
    });
    SampleRecord { sample_id, image, label, split }
}

fn texture_sample(config: &GeneratorConfig, sample_id: u64) -> SampleRecord {
    let mut src = RandomSource::new(config.seed, StreamKey::new(sample_id, GENERATION_EPOCH));
    let gratings: Vec<[f64; 4]> = (0..OOD_GRATINGS)
        .map(|_| {
            let amplitude = 0.5 + 0.5 * src.uniform();
            // Cycles per pixel, kept below Nyquist.
            let freq = 0.03 + 0.22 * src.uniform();
            let theta = src.uniform() * PI;
            let phase = src.uniform() * 2.0 * PI;
            [amplitude, 2.0 * PI * freq, theta, phase]
        })
        .collect();
    let raw = Grid::from_fn(config.height, config.width, |r, c| {
        let wave: f64 = gratings
            .iter()
            .map(|&[a, k, th, ph]| a * (k * (c as f64 * th.cos() + r as f64 * th.sin()) + ph).sin())
            .sum();
        wave + src.normal(0.0, INTENSITY_SIGMA)
    });
    let (lo, hi) = raw
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    SampleRecord {
        sample_id,
        image: raw.map(|v| store((v - lo) / span)),
        label: Grid::zeros(config.height, config.width),
        split: Split::Ood,
    }
}

/// Train, validation and test records, ordered by `sample_id`.
pub fn generate_in_distribution(config: &GeneratorConfig) -> Result<Vec<SampleRecord>> {
    config.validate()?;
    let jobs: Vec<(u64, Split)> = config
        .id_ranges()
        .into_iter()
        .filter(|(split, _, _)| *split != Split::Ood)
        .flat_map(|(split, start, n)| (start..start + n as u64).map(move |id| (id, split)))
        .collect();
    Ok(par_map(&jobs, |&(id, split)| blob_sample(config, id, split)))
}

pub fn generate_ood(config: &GeneratorConfig) -> Result<Vec<SampleRecord>> {
    config.validate()?;
    let (_, start, n) = config.id_ranges()[3];
    let ids: Vec<u64> = (start..start + n as u64).collect();
    Ok(par_map(&ids, |&id| texture_sample(config, id)))
}

/// All four splits.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<SampleRecord>> {
    let mut records = generate_in_distribution(config)?;
    records.extend(generate_ood(config)?);
    Ok(records)
}

pub fn select(records: &[SampleRecord], split: Split) -> Vec<&SampleRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

pub fn split_counts(records: &[SampleRecord]) -> [(Split, usize); 4] {
    Split::ALL.map(|s| (s, records.iter().filter(|r| r.split == s).count()))
}

/// Pooled pixel accuracy of the best single intensity threshold
/// (`x > t` predicts foreground).
pub fn best_threshold_accuracy(records: &[&SampleRecord]) -> f64 {
    let mut pixels: Vec<(f64, bool)> = records
        .iter()
        .flat_map(|r| r.image.values().iter().zip(r.label.values()).map(|(&x, &y)| (x, y == 1.0)))
        .collect();
    if pixels.is_empty() {
        return 0.0;
    }
    pixels.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pixels.len();
    // Threshold below everything: all predicted foreground.
    let mut correct = pixels.iter().filter(|p| p.1).count();
    let mut best = correct;
    let mut i = 0;
    while i < n {
        let x = pixels[i].0;
        while i < n && pixels[i].0 == x {
            correct = if pixels[i].1 { correct - 1 } else { correct + 1 };
            i += 1;
        }
        best = best.max(correct);
    }
    best as f64 / n as f64
}

fn map_name(kind: &str, id: u64) -> String {
    format!("{kind}/{id:06}.dbmp")
}

/// Writes maps plus a tab-separated manifest; returns the manifest path.
pub fn write_dataset(records: &[SampleRecord], dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::from("# sample_id\tsplit\timage\tlabel\n");
    for r in records {
        let (img, lbl) = (map_name("images", r.sample_id), map_name("labels", r.sample_id));
        write_map(&dir.join(&img), &r.image, MapDtype::Probability)?;
        write_map(&dir.join(&lbl), &r.label, MapDtype::HardLabel)?;
        manifest.push_str(&format!("{}\t{}\t{img}\t{lbl}\n", r.sample_id, r.split));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Accepts either the manifest file or the directory holding it.
pub fn read_dataset(manifest: &Path) -> Result<Vec<SampleRecord>> {
    let manifest = if manifest.is_dir() { manifest.join(MANIFEST_NAME) } else { manifest.to_path_buf() };
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut records: Vec<SampleRecord> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |detail: String| Error::format(&manifest, format!("line {}: {detail}", n + 1));
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, split, img, lbl] = fields[..] else {
            return Err(bad(format!("expected 4 tab-separated fields, found {}", fields.len())));
        };
        let sample_id: u64 = id.parse().map_err(|_| bad(format!("invalid sample id '{id}'")))?;
        let split: Split = split.parse().map_err(|_| bad(format!("unknown split '{split}'")))?;
        if !seen.insert(sample_id) {
            return Err(bad(format!("duplicate sample id {sample_id}")));
        }
        let image = read_map_as(&base.join(img), MapDtype::Probability)?;
        let label = read_map_as(&base.join(lbl), MapDtype::HardLabel)?;
        if image.dims() != label.dims() {
            return Err(bad(format!("image {:?} and label {:?} differ in size", image.dims(), label.dims())));
        }
        if split == Split::Ood && label.values().iter().any(|&v| v != 0.0) {
            return Err(bad("ood sample has foreground pixels".into()));
        }
        records.push(SampleRecord { sample_id, image, label, split });
    }
    Ok(records)
}
