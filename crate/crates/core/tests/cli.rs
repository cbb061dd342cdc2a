//! Drives the `aslp` binary end to end and checks the exit-code contract.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use aslp::io::mapfile::{write_map, MapDtype};
use aslp::Grid;

fn aslp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aslp"))
        .args(args)
        .env("ASLP_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "# tiny dataset\nn_train = 10\nn_val = 4\nn_test = 5\nn_ood = 3\nheight = 16\nwidth = 16\nseed = 3\n";

fn small_dataset(root: &Path) -> std::path::PathBuf {
    fs::write(root.join("gen.cfg"), SMALL).unwrap();
    let data = root.join("nested/data");
    let o = aslp(&["generate", "--config", p(&root.join("gen.cfg")), "--out", p(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    data
}

fn summary_map(csv: &str) -> std::collections::BTreeMap<String, f64> {
    csv.lines()
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .map(|(k, v)| (k.to_string(), v.parse().unwrap()))
        .collect()
}

#[test]
fn generate_reports_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let o = aslp(&["generate", "--config", p(&dir.path().join("gen.cfg")), "--out", p(&dir.path().join("again"))]);
    assert_eq!(stdout(&o), "train\t10\nval\t4\ntest\t5\nood\t3\n");
    for sub in ["manifest.tsv", "images/000003.dbmp", "labels/000020.dbmp"] {
        assert_eq!(fs::read(data.join(sub)).unwrap(), fs::read(dir.path().join("again").join(sub)).unwrap());
    }
}

#[test]
fn generate_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = aslp(&["generate", "--out", p(&dir.path().join("d"))]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "train\t400\nval\t100\ntest\t200\nood\t100\n");
}

#[test]
fn config_and_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "overlap = 3\n").unwrap();
    let o = aslp(&["generate", "--config", p(&dir.path().join("bad.cfg")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(aslp(&["train", "--mode", "baseline"]).status.code(), Some(2));
    assert_eq!(aslp(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = aslp(&["generate", "--config", p(&missing), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.cfg"));
}

#[test]
fn training_protocol_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = small_dataset(root);
    let base = root.join("base.ckpt");

    let o = aslp(&["train", "--mode", "mei", "--data", p(&data), "--out", p(&root.join("x.ckpt"))]);
    assert_eq!(o.status.code(), Some(4), "adaptive mode without --from");

    let o = aslp(&["train", "--mode", "baseline", "--data", p(&data), "--out", p(&base), "--epochs", "2", "--lr", "0.01"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    assert!(text.contains("ideal_accuracy"));

    let o = aslp(&[
        "train", "--mode", "slp", "--technique", "hi", "--alpha", "0.01", "--data", p(&data), "--from", p(&base),
        "--out", p(&root.join("slp.ckpt")), "--epochs", "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = aslp(&[
        "train", "--mode", "mc", "--eta", "0.002", "--lambda", "2000", "--data", p(&data), "--from", p(&base), "--out",
        p(&root.join("mc.ckpt")), "--epochs", "2",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("alpha ["));

    let o = aslp(&["train", "--mode", "slp", "--alpha", "0.7", "--data", p(&data), "--from", p(&base), "--out", p(&root.join("y"))]);
    assert_eq!(o.status.code(), Some(2), "alpha beyond 1/beta");

    // Evaluation: human table, CSV, exports, OoD split.
    let o = aslp(&["eval", "--ckpt", p(&base), "--data", p(&data), "--split", "ood"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("accuracy") && text.contains("ece_ew") && text.contains("oe_ew"));
    assert!(!text.contains("f_max"), "no foreground on the OoD split");

    let rel = root.join("out/rel.csv");
    let joint = root.join("out/joint.csv");
    let o = aslp(&[
        "eval", "--ckpt", p(&base), "--data", p(&data), "--bins", "100", "--csv", "--export-reliability", p(&rel),
        "--export-joint", p(&joint), "--export-maps", p(&root.join("maps")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let via_ckpt = summary_map(&stdout(&o));
    assert_eq!(fs::read_to_string(&rel).unwrap().lines().count(), 101);
    assert_eq!(fs::read_to_string(&joint).unwrap().lines().count(), 1 + 100 * 100);

    // The exported maps evaluate to the same numbers.
    let o = aslp(&[
        "eval-maps", "--pred", p(&root.join("maps/pred")), "--gt", p(&root.join("maps/gt")), "--bins", "100", "--csv",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let via_maps = summary_map(&stdout(&o));
    assert_eq!(via_ckpt.keys().collect::<Vec<_>>(), via_maps.keys().collect::<Vec<_>>());
    for (k, v) in &via_ckpt {
        assert!((v - via_maps[k]).abs() <= 1e-12, "{k}: {v} vs {}", via_maps[k]);
    }

    let o = aslp(&["eval", "--ckpt", p(&base), "--data", p(&data), "--temperature", "fit", "--csv"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("temperature,"));

    let o = aslp(&["eval", "--ckpt", p(&root.join("missing.ckpt")), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(3));

    // Sweep: one row per alpha.
    let sweep = root.join("sweep.csv");
    let o = aslp(&[
        "sweep", "--technique", "hi", "--alphas", "0,0.01,0.9", "--from", p(&base), "--data", p(&data), "--out",
        p(&sweep), "--epochs", "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<String> = fs::read_to_string(&sweep).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "alpha,ece,oe,acc,fmax,status");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].ends_with(",ok") && rows[2].ends_with(",ok"));
    assert!(rows[3].starts_with("0.9,,,,,error"), "{}", rows[3]);
}

fn single_pixel(dir: &Path, name: &str, pred: f64, gt: f64) {
    write_map(&dir.join("pred").join(name), &Grid::filled(1, 1, pred), MapDtype::Probability).unwrap();
    write_map(&dir.join("gt").join(name), &Grid::filled(1, 1, gt), MapDtype::HardLabel).unwrap();
}

#[test]
fn eval_maps_hand_built_cases() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir_all(root.join("pred")).unwrap();
    fs::create_dir_all(root.join("gt")).unwrap();
    // Winning-class records (0.95, 1), (0.65, 0), (0.85, 1), (0.55, 1).
    single_pixel(root, "a.dbmp", 0.95, 1.0);
    single_pixel(root, "b.dbmp", 0.35, 1.0);
    single_pixel(root, "c.dbmp", 0.15, 0.0);
    single_pixel(root, "d.dbmp", 0.45, 0.0);
    let o = aslp(&["eval-maps", "--pred", p(&root.join("pred")), "--gt", p(&root.join("gt")), "--csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = summary_map(&stdout(&o));
    // Maps store f32, so the confidences are only f32-exact.
    assert!((m["ece_ew"] - 0.325).abs() < 1e-7, "{}", m["ece_ew"]);
    assert!((m["accuracy"] - 0.75).abs() < 1e-12);

    fs::remove_file(root.join("gt/d.dbmp")).unwrap();
    let o = aslp(&["eval-maps", "--pred", p(&root.join("pred")), "--gt", p(&root.join("gt"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("d.dbmp"));
}

#[test]
fn eval_maps_perfect_and_flat_predictors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir_all(root.join("pred")).unwrap();
    fs::create_dir_all(root.join("gt")).unwrap();
    let gt = Grid::from_fn(8, 8, |r, c| ((r + c) % 3 == 0) as u8 as f64);
    let eps = 1e-6;
    write_map(&root.join("gt/x.dbmp"), &gt, MapDtype::HardLabel).unwrap();
    write_map(&root.join("pred/x.dbmp"), &gt.map(|y| if y == 1.0 { 1.0 - eps } else { eps }), MapDtype::Probability)
        .unwrap();
    let o = aslp(&["eval-maps", "--pred", p(&root.join("pred")), "--gt", p(&root.join("gt")), "--csv"]);
    let m = summary_map(&stdout(&o));
    assert_eq!(m["accuracy"], 1.0);
    assert!(m["ece_ew"] < 1e-5);

    write_map(&root.join("pred/x.dbmp"), &Grid::filled(8, 8, 0.5 + 1e-3), MapDtype::Probability).unwrap();
    let rel = root.join("rel.csv");
    let o = aslp(&[
        "eval-maps", "--pred", p(&root.join("pred")), "--gt", p(&root.join("gt")), "--export-reliability", p(&rel),
    ]);
    assert!(o.status.success());
    let populated: Vec<String> = fs::read_to_string(&rel)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(2) != Some("0"))
        .map(String::from)
        .collect();
    assert_eq!(populated.len(), 1);
    assert!(populated[0].starts_with("0.5,0.6,64,"), "{}", populated[0]);
}
