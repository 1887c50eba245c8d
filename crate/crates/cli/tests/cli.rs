use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_SIM: &str = "num_sequences = 3\nseed = 5\n[motion]\nframe_count = 24\n[shots]\nmean_shot_length = 6.0\n";
const FAST_SOLVER: &str = "max_iters = 40\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_multishot"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().to_path_buf();
    fs::write(p.join("sim.toml"), SMALL_SIM).unwrap();
    fs::write(p.join("solver.toml"), FAST_SOLVER).unwrap();
    (dir, p)
}

#[test]
fn simulate_optimize_eval_gives_monotone_pck() {
    let (_g, d) = setup();
    ok(&d, &["simulate", "--config", "sim.toml", "--out", "data.jsonl"]);
    ok(&d, &["optimize", "--data", "data.jsonl", "--mode", "multi-shot", "--config", "solver.toml", "--out", "est.json"]);
    ok(&d, &["eval", "--data", "data.jsonl", "--estimates", "est.json", "--metric", "cross-shot-pck", "--alphas", "0.02,0.05,0.1,0.2,0.5", "--out", "pck.csv"]);

    let text = fs::read_to_string(d.join("pck.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("alpha,pck,pairs"));
    let pck: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(pck.len(), 5);
    assert!(pck.windows(2).all(|w| w[0] <= w[1]), "{pck:?}");
    assert!(pck.iter().all(|p| (0.0..=100.0).contains(p)));

    for artifact in ["data.jsonl", "est.json", "pck.csv"] {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join(format!("{artifact}.manifest.json"))).unwrap()).unwrap();
        assert!(m["outputs"].as_array().unwrap().iter().any(|o| o.as_str().unwrap().ends_with(artifact)));
        assert!(m["wall_time_secs"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn seed_flag_overrides_config_and_lands_in_manifest() {
    let (_g, d) = setup();
    ok(&d, &["--seed", "11", "simulate", "--config", "sim.toml", "--out", "a.jsonl"]);
    ok(&d, &["simulate", "--config", "sim.toml", "--out", "b.jsonl"]);
    assert_ne!(fs::read(d.join("a.jsonl")).unwrap(), fs::read(d.join("b.jsonl")).unwrap());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 11);
    assert_eq!(m["config"]["seed"], 11);
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_mode_is_usage_error() {
    let (_g, d) = setup();
    let out = run(&d, &["optimize", "--data", "x", "--mode", "two-shot", "--out", "y"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_config_names_the_file() {
    let (_g, d) = setup();
    fs::write(d.join("bad.toml"), "num_sequence = 3\n").unwrap();
    let out = run(&d, &["simulate", "--config", "bad.toml", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn cross_shot_eval_without_cuts_is_data_error() {
    let (_g, d) = setup();
    fs::write(d.join("one.toml"), "num_sequences = 2\n[motion]\nframe_count = 12\n[shots]\nmean_shot_length = 100000.0\n").unwrap();
    ok(&d, &["simulate", "--config", "one.toml", "--out", "data.jsonl"]);
    ok(&d, &["optimize", "--data", "data.jsonl", "--mode", "single-shot", "--config", "solver.toml", "--out", "est.json"]);
    let out = run(&d, &["eval", "--data", "data.jsonl", "--estimates", "est.json", "--metric", "cross-shot-pck", "--out", "p.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no shot boundaries"));
    assert!(!d.join("p.csv").exists());
}

#[test]
fn job_count_does_not_change_outputs() {
    let (_g, d) = setup();
    for jobs in ["1", "2"] {
        ok(&d, &["--jobs", jobs, "simulate", "--config", "sim.toml", "--out", &format!("data{jobs}.jsonl")]);
        ok(&d, &["--jobs", jobs, "optimize", "--data", "data1.jsonl", "--mode", "multi-shot", "--config", "solver.toml", "--out", &format!("est{jobs}.json")]);
    }
    assert_eq!(fs::read(d.join("data1.jsonl")).unwrap(), fs::read(d.join("data2.jsonl")).unwrap());
    assert_eq!(fs::read(d.join("est1.json")).unwrap(), fs::read(d.join("est2.json")).unwrap());
}

#[test]
fn train_eval_stats_compare_round_trip() {
    let (_g, d) = setup();
    fs::write(d.join("train.toml"), "epochs = 2\nwindow = 8\nfeature_dim = 16\n").unwrap();
    ok(&d, &["simulate", "--config", "sim.toml", "--out", "data.jsonl"]);
    ok(&d, &["optimize", "--data", "data.jsonl", "--mode", "multi-shot", "--config", "solver.toml", "--out", "pseudo.json"]);
    ok(&d, &["train", "--data", "data.jsonl", "--pseudo-gt", "pseudo.json", "--model", "single-frame", "--config", "train.toml", "--out", "sf.json"]);
    ok(&d, &["train", "--data", "data.jsonl", "--pseudo-gt", "pseudo.json", "--model", "transformer", "--config", "train.toml", "--init", "sf.json", "--out", "tr.json"]);
    let curve = fs::read_to_string(d.join("tr.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    ok(&d, &["eval", "--data", "data.jsonl", "--weights", "tr.json", "--window", "8", "--metric", "mpjpe", "--out", "tr.csv"]);
    ok(&d, &["eval", "--data", "data.jsonl", "--estimates", "pseudo.json", "--metric", "mpjpe", "--out", "ms.csv"]);
    assert_eq!(fs::read_to_string(d.join("ms.csv")).unwrap().lines().count(), 4);

    let out = ok(&d, &["compare", "--report-a", "ms.csv", "--report-b", "tr.csv", "--out", "cmp.csv"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 pairs"));
    assert!(d.join("cmp.csv.manifest.json").exists());

    let out = ok(&d, &["stats", "--data", "data.jsonl", "--out", "stats.csv"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("continuous-identity"));
    assert_eq!(fs::read_to_string(d.join("stats.csv")).unwrap().lines().count(), 4);
}

#[test]
fn compare_rejects_mismatched_headers() {
    let (_g, d) = setup();
    fs::write(d.join("a.csv"), "identity,mpjpe_mm\n0,1.0\n").unwrap();
    fs::write(d.join("b.csv"), "alpha,pck,pairs\n0.1,50,3\n").unwrap();
    let out = run(&d, &["compare", "--report-a", "a.csv", "--report-b", "b.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn experiment_writes_report_tables() {
    let (_g, d) = setup();
    fs::write(
        d.join("exp.toml"),
        "[modes]\nseeds = 1\nsequences_per_seed = 1\nmin_ordered_seeds = 0\nmin_margin = 0.0\n[modes.sim.motion]\nframe_count = 16\n[modes.solver]\nmax_iters = 20\n",
    )
    .unwrap();
    ok(&d, &["experiment", "--config", "exp.toml", "--protocol", "modes", "--out-dir", "report"]);
    let table = fs::read_to_string(d.join("report/modes_pck.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(d.join("report/summary.txt").exists());
    assert!(d.join("report/manifest.json").exists());
}
