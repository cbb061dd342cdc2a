//! Command-line front end. The binary only parses arguments and maps errors
//! to exit codes; everything else lives here so tests can drive it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::grid::{LabelMap, ProbabilityMap};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::KeyValues;
use crate::io::csv::{joint_csv, reliability_csv, sig9, summary_csv, write_text};
use crate::io::mapfile::{read_map_as, write_map, MapDtype};
use crate::metrics::MetricSummary;
use crate::perturb::{PerturbationSpec, Technique};
use crate::synth::{generate, read_dataset, select, split_counts, write_dataset, GeneratorConfig, SampleRecord, Split};
use crate::trainer::{
    evaluate, evaluate_maps, fit_temperature, train, train_adaptive, EpochReport, Evaluation, TrainConfig, TrainMode,
};

#[derive(Debug, Parser)]
#[command(name = "aslp", version, about = "Label-perturbation training and calibration metrics for binary segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a manifest.
    Generate(GenerateArgs),
    /// Train a baseline or continue one under label perturbation.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Evaluate prediction maps against ground-truth maps.
    EvalMaps(EvalMapsArgs),
    /// Train one static-perturbation continuation per alpha and tabulate.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// `key = value` overrides of the generator defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct PerturbArgs {
    /// hi | si | m | dm | ls
    #[arg(long)]
    pub technique: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// baseline | slp | mei | mc | als
    #[arg(long)]
    pub mode: String,
    /// Dataset manifest (or its directory).
    #[arg(long)]
    pub data: PathBuf,
    /// Baseline checkpoint to continue from.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Static perturbation probability (slp only).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    pub perturb: PerturbArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train | val | test | ood
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long)]
    pub export_reliability: Option<PathBuf>,
    #[arg(long)]
    pub export_joint: Option<PathBuf>,
    /// Writes `pred/` and `gt/` map directories for `eval-maps`.
    #[arg(long)]
    pub export_maps: Option<PathBuf>,
    /// A positive number, or `fit` to fit one on the validation split.
    #[arg(long)]
    pub temperature: Option<String>,
    /// Machine-readable CSV on stdout.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct EvalMapsArgs {
    /// Directory of probability maps (dtype 0).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth maps (dtype 1) with matching file names.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long)]
    pub export_reliability: Option<PathBuf>,
    #[arg(long)]
    pub export_joint: Option<PathBuf>,
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated perturbation probabilities.
    #[arg(long, value_delimiter = ',', required = true)]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split the rows are evaluated on.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[command(flatten)]
    pub perturb: PerturbArgs,
}

/// Runs one parsed command, writing human or CSV output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::EvalMaps(a) => cmd_eval_maps(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let config = match &args.config {
        Some(path) => GeneratorConfig::from_key_values(&KeyValues::load(path)?)?,
        None => GeneratorConfig::default(),
    };
    let records = generate(&config)?;
    write_dataset(&records, &args.out)?;
    let mut text = String::new();
    for (split, n) in split_counts(&records) {
        text.push_str(&format!("{split}\t{n}\n"));
    }
    emit(out, &text)
}

fn technique_spec(args: &PerturbArgs, mode: TrainMode) -> Result<PerturbationSpec> {
    let default = TrainConfig::new(mode).spec;
    let technique = match &args.technique {
        Some(t) => t.parse::<Technique>()?,
        None => default.technique(),
    };
    let beta = match (args.beta, technique.default_beta()) {
        (Some(b), _) => b,
        (None, _) if technique == default.technique() => default.beta(),
        (None, Some(b)) => b,
        (None, None) => return Err(Error::Config(format!("technique {technique} needs --beta"))),
    };
    PerturbationSpec::new(technique, beta).map_err(|e| Error::Config(e.to_string()))
}

fn base_config(mode: TrainMode, args: &PerturbArgs) -> Result<TrainConfig> {
    let mut config = TrainConfig::new(mode);
    config.spec = technique_spec(args, mode)?;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    Ok(config)
}

fn report_line(r: &EpochReport, total: usize) -> String {
    let mut line = format!(
        "epoch {:>3}/{total}  loss {:.6}  val_acc {:.6}",
        r.epoch + 1,
        r.train_loss,
        r.val_accuracy
    );
    if let Some(q) = r.alphas {
        line.push_str(&format!("  alpha {q}"));
    }
    if let Some(q) = r.betas {
        line.push_str(&format!("  beta {q}"));
    }
    line.push('\n');
    line
}

fn load_anchor(path: Option<&Path>, mode: TrainMode) -> Result<Option<Checkpoint>> {
    match (mode, path) {
        (TrainMode::Baseline, _) => Ok(None),
        (_, Some(p)) => {
            let ck = Checkpoint::load(p)?;
            if ck.ideal_accuracy.is_none() {
                return Err(Error::Protocol(format!("{} carries no ideal accuracy", p.display())));
            }
            Ok(Some(ck))
        }
        (mode, None) => Err(Error::Protocol(format!("mode {mode} requires --from <baseline checkpoint>"))),
    }
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mode: TrainMode = args.mode.parse()?;
    let mut config = base_config(mode, &args.perturb)?;
    if let Some(a) = args.alpha {
        if mode != TrainMode::Slp {
            return Err(Error::Config("--alpha applies to --mode slp only".into()));
        }
        config.alpha = a;
    }
    if let Some(e) = args.eta {
        config.eta = e;
    }
    if let Some(l) = args.lambda {
        config.lambda = l;
    }
    config.validate()?;
    let anchor = load_anchor(args.from.as_deref(), mode)?;
    let records = read_dataset(&args.data)?;
    let mut lines = String::new();
    let total = config.epochs;
    let mut progress = |r: &EpochReport| lines.push_str(&report_line(r, total));
    let checkpoint = train(&config, &records, anchor.as_ref(), &mut progress)?;
    checkpoint.save(&args.out)?;
    if let Some(ideal) = checkpoint.ideal_accuracy {
        lines.push_str(&format!("ideal_accuracy {}\n", sig9(ideal)));
    }
    emit(out, &lines)
}

fn parse_split(token: &str) -> Result<Split> {
    token.parse()
}

fn summary_table(summary: &MetricSummary, header: &str) -> String {
    let mut text = format!("{header}\n");
    for (name, value) in summary.entries() {
        text.push_str(&format!("  {name:<14}{}\n", sig9(value)));
    }
    text
}

fn write_exports(eval: &Evaluation, reliability: Option<&Path>, joint: Option<&Path>) -> Result<()> {
    if let Some(p) = reliability {
        write_text(p, &reliability_csv(&eval.reliability))?;
    }
    if let Some(p) = joint {
        write_text(p, &joint_csv(&eval.joint))?;
    }
    Ok(())
}

fn export_maps(dir: &Path, records: &[&SampleRecord], eval: &Evaluation) -> Result<()> {
    let (pred_dir, gt_dir) = (dir.join("pred"), dir.join("gt"));
    for d in [&pred_dir, &gt_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (r, p) in records.iter().zip(&eval.predictions) {
        let name = format!("{:06}.dbmp", r.sample_id);
        write_map(&pred_dir.join(&name), p, MapDtype::Probability)?;
        write_map(&gt_dir.join(&name), &r.label, MapDtype::HardLabel)?;
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let split = parse_split(&args.split)?;
    if args.bins == 0 {
        return Err(Error::Config("--bins must be at least 1".into()));
    }
    let checkpoint = Checkpoint::load(&args.ckpt)?;
    let records = read_dataset(&args.data)?;
    let temperature = match args.temperature.as_deref() {
        None => None,
        Some("fit") => Some(fit_temperature(&checkpoint, &records)?),
        Some(t) => Some(
            t.parse::<f64>()
                .ok()
                .filter(|t| *t > 0.0 && t.is_finite())
                .ok_or_else(|| Error::Config(format!("invalid temperature '{t}'")))?,
        ),
    };
    let mut subset = select(&records, split);
    if subset.is_empty() {
        return Err(Error::Config(format!("split {split} is empty")));
    }
    subset.sort_by_key(|r| r.sample_id);
    let eval = evaluate(&checkpoint, &subset, args.bins, temperature)?;
    write_exports(&eval, args.export_reliability.as_deref(), args.export_joint.as_deref())?;
    if let Some(dir) = &args.export_maps {
        export_maps(dir, &subset, &eval)?;
    }
    if args.csv {
        let mut text = summary_csv(&eval.summary);
        if let Some(t) = temperature {
            text.push_str(&format!("temperature,{}\n", sig9(t)));
        }
        emit(out, &text)
    } else {
        let mut header = format!("split {split} ({} images, {} bins)", subset.len(), args.bins);
        if let Some(t) = temperature {
            header.push_str(&format!(", temperature {}", sig9(t)));
        }
        emit(out, &summary_table(&eval.summary, &header))
    }
}

fn map_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            files.insert(entry.file_name().to_string_lossy().into_owned(), path);
        }
    }
    Ok(files)
}

pub fn cmd_eval_maps(args: &EvalMapsArgs, out: &mut dyn Write) -> Result<()> {
    if args.bins == 0 {
        return Err(Error::Config("--bins must be at least 1".into()));
    }
    let preds = map_files(&args.pred)?;
    let gts = map_files(&args.gt)?;
    if let Some(name) = preds.keys().find(|k| !gts.contains_key(*k)) {
        return Err(Error::format(&preds[name], "no ground-truth map with this name"));
    }
    if let Some(name) = gts.keys().find(|k| !preds.contains_key(*k)) {
        return Err(Error::format(&gts[name], "no prediction map with this name"));
    }
    if preds.is_empty() {
        return Err(Error::format(&args.pred, "no prediction maps found"));
    }
    let mut pred_maps: Vec<ProbabilityMap> = Vec::with_capacity(preds.len());
    let mut gt_maps: Vec<LabelMap> = Vec::with_capacity(preds.len());
    for (name, path) in &preds {
        let p = read_map_as(path, MapDtype::Probability)?;
        let g = read_map_as(&gts[name], MapDtype::HardLabel)?;
        if p.dims() != g.dims() {
            return Err(Error::format(path, format!("size {:?} differs from ground truth {:?}", p.dims(), g.dims())));
        }
        pred_maps.push(p);
        gt_maps.push(g);
    }
    let eval = evaluate_maps(pred_maps, &gt_maps, args.bins)?;
    write_exports(&eval, args.export_reliability.as_deref(), args.export_joint.as_deref())?;
    if args.csv {
        emit(out, &summary_csv(&eval.summary))
    } else {
        let header = format!("{} maps ({} bins)", preds.len(), args.bins);
        emit(out, &summary_table(&eval.summary, &header))
    }
}

pub const SWEEP_HEADER: &str = "alpha,ece,oe,acc,fmax,status";

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let split = parse_split(&args.split)?;
    let base_cfg = base_config(TrainMode::Slp, &args.perturb)?;
    let anchor = load_anchor(Some(&args.from), TrainMode::Slp)?.expect("slp always loads an anchor");
    let records = read_dataset(&args.data)?;
    let mut subset = select(&records, split);
    subset.sort_by_key(|r| r.sample_id);
    let mut csv = format!("{SWEEP_HEADER}\n");
    for &alpha in &args.alphas {
        let config = TrainConfig { alpha, bins: args.bins, ..base_cfg.clone() };
        let outcome = config
            .validate()
            .and_then(|_| train_adaptive(&config, &records, &anchor, &mut |_| {}))
            .and_then(|ck| evaluate(&ck, &subset, args.bins, None));
        let row = match outcome {
            Ok(e) => {
                let s = &e.summary;
                let fmax = s.f_max.map(sig9).unwrap_or_default();
                format!("{},{},{},{},{fmax},ok\n", sig9(alpha), sig9(s.ece_ew), sig9(s.oe_ew), sig9(s.accuracy))
            }
            Err(err) => {
                let status = err.to_string().replace([',', '\n'], ";");
                format!("{},,,,,error: {status}\n", sig9(alpha))
            }
        };
        emit(out, &row)?;
        csv.push_str(&row);
    }
    write_text(&args.out, &csv)
}
