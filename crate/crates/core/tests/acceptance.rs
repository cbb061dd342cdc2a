//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured values, then asserts.
//!
//! The desk-scale training runs (baseline, MC, MEI) are shared between tests
//! through `OnceLock`, so the whole file trains each model once.

use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use aslp::aslp::{grad_alpha, AdaptiveMode};
use aslp::cli::{cmd_eval, cmd_generate, cmd_sweep, cmd_train, EvalArgs, GenerateArgs, PerturbArgs, SweepArgs, TrainArgs};
use aslp::io::checkpoint::Checkpoint;
use aslp::loss::{bce, bce_uniform, sc_bce_factored, sc_bce_sampled, smoothed_bce};
use aslp::metrics::{
    bin_equal_mass, bin_equal_width, ece, ece_debias, ece_sweep, oe, BinStats, ConfidenceRecord,
};
use aslp::model::{backward, forward, SegmenterParams, Tensor};
use aslp::perturb::{expected_confidence, perturb_label, PerturbationSpec, Technique};
use aslp::rng::RandomSource;
use aslp::synth::{generate, select, write_dataset, GeneratorConfig, SampleRecord, Split};
use aslp::trainer::{evaluate, train_adaptive, train_baseline, TrainConfig, TrainMode};
use aslp::{Grid, LabelMap};

fn report(criterion: u32, pass: bool, detail: String) -> bool {
    println!("criterion {criterion}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn random_grid(src: &mut RandomSource, lo: f64, hi: f64) -> Grid {
    Grid::from_fn(8, 8, |_, _| lo + (hi - lo) * src.uniform())
}

fn random_label(src: &mut RandomSource) -> LabelMap {
    Grid::from_fn(8, 8, |_, _| (src.uniform() < 0.5) as u8 as f64)
}

// ---------------------------------------------------------------------------
// 1-5: analytic and oracle suites

#[test]
fn criterion_01_analytic_identities() {
    let start = Instant::now();
    let mut src = RandomSource::for_sample(101, 0, 0);
    let (mut worst_factored, mut worst_smooth, mut worst_uniform) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let pred = random_grid(&mut src, 0.001, 0.999);
        let y = random_label(&mut src);
        let beta = 0.01 + 1.99 * src.uniform();
        let z = src.uniform() < 0.5;
        let spec = PerturbationSpec::new(Technique::SoftInversion, beta).unwrap();
        let sampled = sc_bce_sampled(&pred, &y, z, &spec).unwrap().0;
        let factored = sc_bce_factored(&pred, &y, z, beta).unwrap().0;
        worst_factored = worst_factored.max((sampled - factored).abs());

        let alpha = src.uniform() * (1.0 / beta).min(1.0) * 0.999;
        let ly = bce(&pred, &y).unwrap().0;
        let lp = bce(&pred, &perturb_label(&y, beta).unwrap()).unwrap().0;
        let mixed = (1.0 - alpha) * ly + alpha * lp;
        let smoothed = smoothed_bce(&pred, &y, alpha * beta).unwrap().0;
        worst_smooth = worst_smooth.max((mixed - smoothed).abs());

        let inverted = bce(&pred, &perturb_label(&y, 2.0).unwrap()).unwrap().0;
        let uniform = bce_uniform(&pred).0;
        worst_uniform = worst_uniform.max((inverted + ly - 2.0 * uniform).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst_factored < 1e-9 && worst_smooth < 1e-9 && worst_uniform < 1e-9 && elapsed < 5.0;
    assert!(report(
        1,
        pass,
        format!(
            "max |sampled-factored| {worst_factored:.2e}, |mix-smoothed| {worst_smooth:.2e}, \
             |inverse split| {worst_uniform:.2e}, {elapsed:.2}s"
        )
    ));
}

#[test]
fn criterion_02_normalized_gradient_invariance() {
    let start = Instant::now();
    let mut src = RandomSource::for_sample(102, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let pred = random_grid(&mut src, 0.001, 0.999);
        let y = random_label(&mut src);
        let ly = bce(&pred, &y).unwrap();
        let expected = 2.0 * (bce_uniform(&pred).0 - ly.0);
        for beta in [0.5, 0.75, 1.0, 1.5, 2.0] {
            let lp = bce(&pred, &perturb_label(&y, beta).unwrap()).unwrap();
            let g = grad_alpha(ly, lp, beta).unwrap();
            worst = worst.max((g - expected).abs());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-9 && elapsed < 1.0;
    assert!(report(2, pass, format!("max deviation {worst:.2e}, {elapsed:.3}s")));
}

// Brute-force oracles: direct loops, no shared helpers with the library.

fn oracle_equal_width(records: &[ConfidenceRecord], b: usize) -> (f64, f64) {
    let n = records.len() as f64;
    let (mut e, mut o) = (0.0, 0.0);
    for i in 0..b {
        let lo = i as f64 / b as f64;
        let hi = (i + 1) as f64 / b as f64;
        let members: Vec<_> = records
            .iter()
            .filter(|r| r.confidence >= lo && (r.confidence < hi || (i == b - 1 && r.confidence <= 1.0)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let c = members.iter().map(|r| r.confidence).sum::<f64>() / m;
        let a = members.iter().filter(|r| r.correct).count() as f64 / m;
        e += m / n * (c - a).abs();
        if c > a {
            o += m / n * (c - a);
        }
    }
    (e, o)
}

fn oracle_equal_mass_bins(records: &[ConfidenceRecord], b: usize) -> Vec<(usize, f64, f64)> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|x, y| x.confidence.partial_cmp(&y.confidence).unwrap());
    let n = sorted.len();
    (0..b)
        .map(|i| {
            let chunk = &sorted[i * n / b..(i + 1) * n / b];
            let m = chunk.len();
            let c = chunk.iter().map(|r| r.confidence).sum::<f64>() / m as f64;
            let a = chunk.iter().filter(|r| r.correct).count() as f64 / m as f64;
            (m, c, a)
        })
        .collect()
}

fn oracle_mass_scores(bins: &[(usize, f64, f64)], n: usize) -> (f64, f64) {
    let mut e = 0.0;
    let mut o = 0.0;
    for &(m, c, a) in bins {
        e += m as f64 / n as f64 * (c - a).abs();
        if c > a {
            o += m as f64 / n as f64 * (c - a);
        }
    }
    (e, o)
}

fn oracle_sweep(records: &[ConfidenceRecord], n_max: usize) -> (usize, f64) {
    let n = records.len();
    let mut best = 1;
    for b in 1..=n_max.min(n) {
        let bins = oracle_equal_mass_bins(records, b);
        if bins.windows(2).any(|w| w[0].2 > w[1].2) {
            break;
        }
        best = b;
    }
    (best, oracle_mass_scores(&oracle_equal_mass_bins(records, best), n).0)
}

fn oracle_debias(records: &[ConfidenceRecord], b: usize) -> f64 {
    let mut parts = Vec::new();
    for i in 0..b {
        let lo = i as f64 / b as f64;
        let hi = (i + 1) as f64 / b as f64;
        let members: Vec<_> = records
            .iter()
            .filter(|r| r.confidence >= lo && (r.confidence < hi || (i == b - 1 && r.confidence <= 1.0)))
            .collect();
        let m = members.len();
        if m < 2 {
            continue;
        }
        let c = members.iter().map(|r| r.confidence).sum::<f64>() / m as f64;
        let a = members.iter().filter(|r| r.correct).count() as f64 / m as f64;
        parts.push((m, (c - a).powi(2) - a * (1.0 - a) / (m - 1) as f64));
    }
    let mass: usize = parts.iter().map(|p| p.0).sum();
    parts.iter().map(|&(m, v)| m as f64 / mass as f64 * v).sum()
}

fn rec(confidence: f64, correct: bool) -> ConfidenceRecord {
    ConfidenceRecord { confidence, correct }
}

#[test]
fn criterion_03_metric_oracles() {
    let start = Instant::now();
    let mut src = RandomSource::for_sample(103, 0, 0);
    let mut worst = 0.0f64;
    let mut sweep_bins_agree = true;
    for trial in 0..4 {
        let records: Vec<ConfidenceRecord> = (0..10_000)
            .map(|_| {
                // Mildly over-confident population so the sweep runs for a while.
                let c = 0.5 + 0.5 * src.uniform();
                let hit = src.uniform() < c - 0.05 * trial as f64;
                rec(c, hit)
            })
            .collect();
        let n = records.len();
        for b in [1, 10, 15, 100] {
            let ew = bin_equal_width(&records, b).unwrap();
            let (e, o) = oracle_equal_width(&records, b);
            worst = worst.max((ece(&ew, n) - e).abs()).max((oe(&ew, n) - o).abs());
            worst = worst.max((ece_debias(&ew) - oracle_debias(&records, b)).abs());
            let em = bin_equal_mass(&records, b).unwrap();
            let (e, o) = oracle_mass_scores(&oracle_equal_mass_bins(&records, b), n);
            worst = worst.max((ece(&em, n) - e).abs()).max((oe(&em, n) - o).abs());
        }
        let sweep = ece_sweep(&records, 100, 1.0).unwrap();
        let (b, v) = oracle_sweep(&records, 100);
        sweep_bins_agree &= sweep.chosen_bins == b;
        worst = worst.max((sweep.value - v).abs());
    }

    let four = [rec(0.95, true), rec(0.65, false), rec(0.85, true), rec(0.55, true)];
    let ew = bin_equal_width(&four, 10).unwrap();
    let hand_ece = ece(&ew, 4);
    // Only the 0.65 bin has C > A, so the over-confidence error is 0.65 / 4.
    let hand_oe = oe(&ew, 4);
    let sweep_four = [rec(0.6, false), rec(0.7, true), rec(0.8, true), rec(0.9, true)];
    let sweep = ece_sweep(&sweep_four, 100, 1.0).unwrap();
    let debias_pair = ece_debias(&[BinStats { count: 2, mean_confidence: 0.75, mean_accuracy: 0.5, lo: None, hi: None }]);

    let hand_ok = (hand_ece - 0.325).abs() < 1e-12
        && (hand_oe - 0.1625).abs() < 1e-12
        && sweep.chosen_bins == 4
        && (sweep.value - 0.3).abs() < 1e-12
        && (debias_pair + 0.1875).abs() < 1e-12;
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-12 && sweep_bins_agree && hand_ok && elapsed < 5.0;
    assert!(report(
        3,
        pass,
        format!(
            "max oracle deviation {worst:.2e}, sweep b* agree {sweep_bins_agree}; hand cases ECE {hand_ece} \
             OE {hand_oe} SWEEP b*={} value {}; {elapsed:.2}s",
            sweep.chosen_bins, sweep.value
        )
    ));
}

#[test]
fn criterion_04_gradient_check() {
    let start = Instant::now();
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for k in 0..3u64 {
        let mut src = RandomSource::for_sample(104, k, 0);
        let image = random_grid(&mut src, 0.0, 1.0);
        let target = random_label(&mut src);
        let params = SegmenterParams::init(8, 200 + k);
        let out = forward(&params, &image);
        let grads = backward(&params, &out.cache, &target).unwrap();
        for t in Tensor::ALL {
            for j in 0..t.len(8) {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.tensors_mut().tensor_mut(t)[j] += delta;
                    bce(&forward(&p, &image).probs, &target).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = grads.0.tensor(t)[j];
                let rel = (analytic - fd).abs() / analytic.abs().max(1e-8);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && checked == 3 * 673 && elapsed < 30.0;
    assert!(report(4, pass, format!("{checked} entries, worst relative error {worst:.2e}, {elapsed:.2}s")));
}

#[test]
fn criterion_05_expected_confidence_anchor() {
    let c = expected_confidence(0.05, 2.0).unwrap();
    assert!(report(5, c == 0.95, format!("expected_confidence(0.05, 2) = {c}")));
}

// ---------------------------------------------------------------------------
// 6-9: desk-scale reproductions on default synthetic data

struct Runs {
    data: Vec<SampleRecord>,
    baseline: Checkpoint,
    mc: Checkpoint,
    mei: Checkpoint,
    baseline_secs: f64,
    mc_secs: f64,
    mei_secs: f64,
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let data = generate(&GeneratorConfig::default()).unwrap();
        let t = Instant::now();
        let baseline = train_baseline(&TrainConfig::new(TrainMode::Baseline), &data, &mut |_| {}).unwrap();
        let baseline_secs = t.elapsed().as_secs_f64();
        let adapt = |mode| {
            let t = Instant::now();
            let ck = train_adaptive(&TrainConfig::new(TrainMode::Adaptive(mode)), &data, &baseline, &mut |_| {})
                .unwrap();
            (ck, t.elapsed().as_secs_f64())
        };
        let (mc, mc_secs) = adapt(AdaptiveMode::Mc);
        let (mei, mei_secs) = adapt(AdaptiveMode::Mei);
        Runs { data, baseline, mc, mei, baseline_secs, mc_secs, mei_secs }
    })
}

fn scores(ck: &Checkpoint, data: &[SampleRecord], split: Split) -> (f64, f64, f64) {
    let s = evaluate(ck, &select(data, split), 10, None).unwrap().summary;
    (s.accuracy, s.ece_ew, s.oe_ew)
}

#[test]
fn criterion_06_mc_reduces_ece() {
    let r = runs();
    let (acc_b, ece_b, oe_b) = scores(&r.baseline, &r.data, Split::Test);
    let (acc_m, ece_m, _) = scores(&r.mc, &r.data, Split::Test);
    let over_confident = oe_b > 0.01;
    let reduction = (ece_b - ece_m) / ece_b;
    let secs = r.baseline_secs + r.mc_secs;
    let pass = over_confident && reduction >= 0.30 && (acc_m - acc_b).abs() <= 0.005 && secs < 300.0;
    assert!(report(
        6,
        pass,
        format!(
            "baseline test acc {acc_b:.4} ECE_EW {ece_b:.4} OE_EW {oe_b:.4}; MC acc {acc_m:.4} ECE_EW {ece_m:.4} \
             (relative change {:+.1}%); {secs:.0}s",
            -100.0 * reduction
        )
    ));
}

#[test]
fn criterion_07_mei_under_confident() {
    let r = runs();
    let ideal = r.baseline.ideal_accuracy.unwrap();
    let (acc_e, ece_e, oe_e) = scores(&r.mei, &r.data, Split::Test);
    let (_, ece_m, _) = scores(&r.mc, &r.data, Split::Test);
    let secs = r.mei_secs;
    let pass = oe_e < 0.005 && (acc_e - ideal).abs() <= 0.01 && ece_e > ece_m && secs < 300.0;
    assert!(report(
        7,
        pass,
        format!(
            "MEI test OE_EW {oe_e:.4}, acc {acc_e:.4} vs ideal {ideal:.4}, ECE_EW {ece_e:.4} vs MC {ece_m:.4}; {secs:.0}s"
        )
    ));
}

#[test]
fn criterion_08_ood_direction() {
    let r = runs();
    let t = Instant::now();
    let (_, ece_b, _) = scores(&r.baseline, &r.data, Split::Ood);
    let (_, ece_m, _) = scores(&r.mc, &r.data, Split::Ood);
    let (_, ece_e, _) = scores(&r.mei, &r.data, Split::Ood);
    let secs = t.elapsed().as_secs_f64();
    let pass = ece_m < ece_b && ece_e < ece_b && ece_e <= ece_m && secs < 60.0;
    assert!(report(
        8,
        pass,
        format!("OoD ECE_EW baseline {ece_b:.4}, MC {ece_m:.4}, MEI {ece_e:.4}; {secs:.1}s")
    ));
}

fn temp_dir(tag: &str) -> tempfile::TempDir {
    tempfile::Builder::new().prefix(tag).tempdir().unwrap()
}

#[test]
fn criterion_09_static_sweep_shape() {
    let r = runs();
    let t = Instant::now();
    let dir = temp_dir("sweep");
    let manifest = write_dataset(&r.data, &dir.path().join("data")).unwrap();
    let anchor = dir.path().join("baseline.ckpt");
    r.baseline.save(&anchor).unwrap();
    let out_csv = dir.path().join("sweep.csv");
    let args = SweepArgs {
        alphas: vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2],
        from: anchor,
        data: manifest,
        out: out_csv.clone(),
        split: "test".into(),
        bins: 10,
        perturb: PerturbArgs { technique: Some("hi".into()), beta: None, epochs: None, lr: None, seed: None },
    };
    cmd_sweep(&args, &mut std::io::sink()).unwrap();
    let text = fs::read_to_string(&out_csv).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(4).map(|v| v.parse().unwrap()).collect())
        .collect();
    let ece: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let oe: Vec<f64> = rows.iter().map(|r| r[2]).collect();
    // One empty-bin granularity step at B = 10 on 200 test images.
    let step = 1.0 / (10.0 * 200.0);
    let oe_monotone = oe.windows(2).all(|w| w[1] <= w[0] + step);
    let argmin = ece
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let interior = argmin > 0 && argmin < ece.len() - 1;
    let secs = t.elapsed().as_secs_f64();
    let pass = rows.len() == 6 && oe_monotone && interior && secs < 900.0;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    assert!(report(
        9,
        pass,
        format!(
            "alpha 0 .01 .02 .05 .1 .2: ECE_EW [{}] OE_EW [{}]; OE non-increasing {oe_monotone}, \
             ECE interior minimum {interior}; {secs:.0}s",
            fmt(&ece),
            fmt(&oe)
        )
    ));
}

// ---------------------------------------------------------------------------
// 10: byte-identical outputs across repeated commands

fn tree_bytes(root: &std::path::Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_10_determinism() {
    let small = "n_train = 12\nn_val = 4\nn_test = 4\nn_ood = 3\nseed = 42\n";
    let run_once = || {
        let dir = temp_dir("determinism");
        let root = dir.path();
        fs::write(root.join("gen.cfg"), small).unwrap();
        let sink = &mut std::io::sink();
        cmd_generate(&GenerateArgs { config: Some(root.join("gen.cfg")), out: root.join("data") }, sink).unwrap();
        let perturb = PerturbArgs { technique: None, beta: None, epochs: Some(2), lr: None, seed: Some(9) };
        let train_args = |mode: &str, from: Option<PathBuf>, out: &str| TrainArgs {
            mode: mode.into(),
            data: root.join("data"),
            from,
            out: root.join(out),
            alpha: None,
            eta: None,
            lambda: None,
            perturb: perturb.clone(),
        };
        cmd_train(&train_args("baseline", None, "base.ckpt"), sink).unwrap();
        cmd_train(&train_args("mc", Some(root.join("base.ckpt")), "mc.ckpt"), sink).unwrap();
        cmd_train(&train_args("als", Some(root.join("base.ckpt")), "als.ckpt"), sink).unwrap();
        let mut csv = Vec::new();
        cmd_eval(
            &EvalArgs {
                ckpt: root.join("mc.ckpt"),
                data: root.join("data"),
                split: "test".into(),
                bins: 10,
                export_reliability: Some(root.join("rel.csv")),
                export_joint: Some(root.join("joint.csv")),
                export_maps: None,
                temperature: Some("fit".into()),
                csv: true,
            },
            &mut csv,
        )
        .unwrap();
        let mut files = tree_bytes(root);
        files.push(("stdout".into(), csv));
        files
    };
    let first = run_once();
    let second = run_once();
    let differing: Vec<_> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.display().to_string())
        .collect();
    let pass = first.len() == second.len() && differing.is_empty();
    assert!(report(
        10,
        pass,
        format!("{} files compared across two runs, differing: {differing:?}", first.len())
    ));
}
