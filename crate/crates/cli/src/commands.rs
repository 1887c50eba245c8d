use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use multishot::body_model::BodyModel;
use multishot::exec::Exec;
use multishot::experiments::{emit_report, run_encoder_comparison, run_mode_comparison, EncoderProtocol, ExperimentResults, ModeProtocol};
use multishot::metrics::{cross_shot_pck, frame_pck, sequence_errors, PckReport};
use multishot::neural::{predict_dataset, read_weights, train, write_loss_curve, write_weights, ModelKind, TrainConfig};
use multishot::scene_sim::{assemble_tracklets, generate_dataset, read_dataset, write_dataset, SequenceDataset, SimConfig, TrackletMode};
use multishot::solver::{read_estimates, solve_dataset, write_estimates, SequenceEstimate, SolverConfig, SolverMode};
use multishot::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::{write_atomic, RunManifest, MANIFEST_FORMAT_VERSION};
use crate::{
    Cli, CliError, Command, CompareArgs, EvalArgs, ExperimentArgs, MetricArg, ModeArg, ModelArg, OptimizeArgs, ProtocolArg,
    SimulateArgs, StatsArgs, TrackletArg, TrainArgs,
};

/// Configuration of the `experiment` command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modes: ModeProtocol,
    pub encoders: EncoderProtocol,
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let start = Instant::now();
    let (config, inputs, outputs, manifest_at) = with_exec(cli.jobs, |exec| dispatch(cli, exec))??;
    let seed = cli.seed.or_else(|| config.get("seed").and_then(|s| s.as_u64()));
    let manifest = RunManifest {
        format_version: MANIFEST_FORMAT_VERSION.to_string(),
        command: command_name(&cli.command).to_string(),
        argv: std::env::args().skip(1).collect(),
        config,
        seed,
        inputs,
        outputs,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(artifact) = manifest_at {
        manifest.write_for(&artifact)?;
    }
    Ok(())
}

type Outcome = (serde_json::Value, Vec<PathBuf>, Vec<PathBuf>, Option<PathBuf>);

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Optimize(_) => "optimize",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Stats(_) => "stats",
        Command::Compare(_) => "compare",
        Command::Experiment(_) => "experiment",
    }
}

/// Runs `f` with an executor honoring `--jobs`.
fn with_exec<T: Send>(jobs: usize, f: impl FnOnce(Exec) -> T + Send) -> Result<T, CliError> {
    #[cfg(feature = "parallel")]
    {
        if jobs == 1 {
            return Ok(f(Exec::Serial));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::usage(format!("--jobs {jobs}: {e}")))?;
        Ok(pool.install(|| f(Exec::Parallel)))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        Ok(f(Exec::Serial))
    }
}

fn dispatch(cli: &Cli, exec: Exec) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Simulate(a) => simulate(a, cli.seed, exec),
        Command::Optimize(a) => optimize(a, cli.seed, exec),
        Command::Train(a) => train_cmd(a, cli.seed, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Stats(a) => stats(a),
        Command::Compare(a) => compare(a),
        Command::Experiment(a) => experiment(a, exec),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn to_json(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn simulate(a: &SimulateArgs, seed: Option<u64>, exec: Exec) -> Result<Outcome, CliError> {
    let mut cfg: SimConfig = load_config(a.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let model = BodyModel::standard();
    let data = generate_dataset(&model, &cfg, exec)?;
    write_dataset(&data, &a.out)?;
    println!("wrote {} sequences to {}", data.sequences.len(), a.out.display());
    Ok((to_json(&cfg), inputs(&[a.config.as_ref()]), vec![a.out.clone()], Some(a.out.clone())))
}

fn inputs(paths: &[Option<&PathBuf>]) -> Vec<PathBuf> {
    paths.iter().flatten().map(|p| (*p).clone()).collect()
}

fn solver_mode(m: ModeArg) -> SolverMode {
    match m {
        ModeArg::SingleFrame => SolverMode::SingleFrame,
        ModeArg::SingleShot => SolverMode::SingleShot,
        ModeArg::MultiShot => SolverMode::MultiShot,
    }
}

fn optimize(a: &OptimizeArgs, seed: Option<u64>, exec: Exec) -> Result<Outcome, CliError> {
    let mut cfg: SolverConfig = load_config(a.config.as_deref())?;
    cfg.mode = solver_mode(a.mode);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let model = BodyModel::standard();
    let data = read_dataset(&a.data)?;
    let ests = solve_dataset(&model, &data, &cfg, exec)?;
    write_estimates(&model, &ests, Some(cfg.clone()), &a.out)?;
    let converged: usize = ests.iter().map(|e| e.converged.iter().filter(|&&c| c).count()).sum();
    let frames: usize = ests.iter().map(|e| e.len()).sum();
    println!("{} sequences, {converged}/{frames} frames converged, wrote {}", ests.len(), a.out.display());
    Ok((to_json(&cfg), inputs(&[Some(&a.data), a.config.as_ref()]), vec![a.out.clone()], Some(a.out.clone())))
}

fn model_kind(m: ModelArg) -> ModelKind {
    match m {
        ModelArg::SingleFrame => ModelKind::SingleFrame,
        ModelArg::Transformer => ModelKind::Transformer,
        ModelArg::Conv => ModelKind::Conv,
    }
}

fn read_pseudo(path: &Path) -> Result<Vec<SequenceEstimate>, CliError> {
    Ok(read_estimates(path)?.to_estimates()?)
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>, exec: Exec) -> Result<Outcome, CliError> {
    let mut cfg: TrainConfig = load_config(a.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let model = BodyModel::standard();
    let data = read_dataset(&a.data)?;
    let pseudo = read_pseudo(&a.pseudo_gt)?;
    let init = a.init.as_deref().map(read_weights).transpose()?;
    let out = train(&model, &data, &pseudo, model_kind(a.model), &cfg, init.as_ref(), exec)?;
    write_weights(&out.weights, &a.out)?;
    let curve_path = a.loss_curve.clone().unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_loss_curve(&out.curve, &curve_path)?;
    if let (Some(first), Some(last)) = (out.curve.first(), out.curve.last()) {
        println!("{} epochs, total loss {:.4} -> {:.4}, wrote {}", out.curve.len(), first.total, last.total, a.out.display());
    }
    let ins = inputs(&[Some(&a.data), Some(&a.pseudo_gt), a.config.as_ref(), a.init.as_ref()]);
    Ok((to_json(&cfg), ins, vec![a.out.clone(), curve_path], Some(a.out.clone())))
}

fn check_pairs(data: &SequenceDataset, ests: &[SequenceEstimate]) -> Result<(), CliError> {
    if ests.len() != data.sequences.len() {
        return Err(CliError::data(format!(
            "{} estimates for {} sequences",
            ests.len(),
            data.sequences.len()
        )));
    }
    for (seq, est) in data.sequences.iter().zip(ests) {
        if seq.identity != est.identity {
            return Err(CliError::data(format!("estimate identity {} does not match sequence {}", est.identity, seq.identity)));
        }
    }
    Ok(())
}

/// Pools per-sequence PCK reports, skipping sequences with nothing to score.
fn pool_pck(reports: Vec<multishot::Result<PckReport>>, none: Error) -> Result<PckReport, CliError> {
    let mut kept = Vec::new();
    for r in reports {
        match r {
            Ok(r) => kept.push(r),
            Err(Error::NoShotBoundaries | Error::EmptyEvaluation | Error::NoValidFrames) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if kept.is_empty() {
        return Err(none.into());
    }
    Ok(PckReport::pool(&kept)?)
}

fn eval(a: &EvalArgs, exec: Exec) -> Result<Outcome, CliError> {
    if a.alphas.is_empty() || a.alphas.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(CliError::usage("--alphas must be positive numbers"));
    }
    let model = BodyModel::standard();
    let data = read_dataset(&a.data)?;
    let (ests, source) = match (&a.estimates, &a.weights) {
        (Some(p), _) => (read_pseudo(p)?, p.clone()),
        (None, Some(w)) => (predict_dataset(&model, &read_weights(w)?, &data, a.window, exec)?, w.clone()),
        (None, None) => return Err(CliError::usage("one of --estimates or --weights is required")),
    };
    check_pairs(&data, &ests)?;
    let pairs: Vec<_> = data.sequences.iter().zip(&ests).collect();
    let text = match a.metric {
        MetricArg::Pck | MetricArg::CrossShotPck => {
            let reports = exec.map(&pairs, |_, (seq, est)| {
                if a.metric == MetricArg::Pck {
                    frame_pck(&model, est, seq, &a.alphas)
                } else {
                    cross_shot_pck(&model, est, seq, &a.alphas)
                }
            });
            let none = if a.metric == MetricArg::Pck { Error::EmptyEvaluation } else { Error::NoShotBoundaries };
            let r = pool_pck(reports, none)?;
            for (al, p) in r.alphas.iter().zip(&r.pck) {
                println!("alpha {al}: {p:.2}% over {} pairs", r.pairs);
            }
            r.to_csv()
        }
        MetricArg::Mpjpe | MetricArg::PaMpjpe => {
            let errs = exec.map(&pairs, |_, (seq, est)| sequence_errors(&model, est, seq));
            let name = if a.metric == MetricArg::Mpjpe { "mpjpe_mm" } else { "pa_mpjpe_mm" };
            let mut s = format!("identity,{name}\n");
            let mut sum = 0.0;
            for ((seq, _), e) in pairs.iter().zip(errs) {
                let (m, pa) = e?;
                let v = if a.metric == MetricArg::Mpjpe { m } else { pa };
                sum += v;
                let _ = writeln!(s, "{},{v}", seq.identity);
            }
            println!("mean {name}: {:.3}", sum / pairs.len().max(1) as f64);
            s
        }
    };
    write_atomic(&a.out, text.as_bytes())?;
    let cfg = serde_json::json!({ "metric": format!("{:?}", a.metric), "alphas": a.alphas, "window": a.window });
    Ok((cfg, vec![a.data.clone(), source], vec![a.out.clone()], Some(a.out.clone())))
}

fn tracklet_mode(m: TrackletArg) -> TrackletMode {
    match m {
        TrackletArg::SingleShot => TrackletMode::SingleShot,
        TrackletArg::ContinuousIdentity => TrackletMode::ContinuousIdentity,
        TrackletArg::MultiShot => TrackletMode::MultiShot,
    }
}

fn stats(a: &StatsArgs) -> Result<Outcome, CliError> {
    let data = read_dataset(&a.data)?;
    let modes: Vec<TrackletMode> = match a.mode {
        Some(m) => vec![tracklet_mode(m)],
        None => TrackletMode::ALL.to_vec(),
    };
    let mut csv = String::from("mode,tracklets,long_tracklets,frames,long_frames\n");
    println!("{:<20} {:>10} {:>6} {:>8} {:>11}", "mode", "tracklets", "long", "frames", "long frames");
    for mode in modes {
        let (_, st) = assemble_tracklets(&data, mode);
        println!("{:<20} {:>10} {:>6} {:>8} {:>11}", mode.as_str(), st.count_all, st.count_long, st.frames_all, st.frames_long);
        let _ = writeln!(csv, "{},{},{},{},{}", mode.as_str(), st.count_all, st.count_long, st.frames_all, st.frames_long);
    }
    let outputs: Vec<PathBuf> = a.out.iter().cloned().collect();
    if let Some(out) = &a.out {
        write_atomic(out, csv.as_bytes())?;
    }
    let cfg = serde_json::json!({ "mode": a.mode.map(|m| tracklet_mode(m).as_str()) });
    Ok((cfg, vec![a.data.clone()], outputs, a.out.clone()))
}

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let err = |e: csv::Error| CliError::data(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let headers = r.headers().map_err(err)?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .map_err(err)?;
    Ok(Table { headers, rows })
}

/// Rows are paired by position; their first columns must agree.
fn compare(a: &CompareArgs) -> Result<Outcome, CliError> {
    let ta = read_table(&a.report_a)?;
    let tb = read_table(&a.report_b)?;
    if ta.headers != tb.headers {
        return Err(CliError::data(format!(
            "{}: header {:?} differs from {:?} in {}",
            a.report_b.display(),
            tb.headers,
            ta.headers,
            a.report_a.display()
        )));
    }
    if ta.headers.len() < 2 {
        return Err(CliError::data(format!("{}: need a key column and a value column", a.report_a.display())));
    }
    let col = match &a.column {
        Some(name) => ta
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::usage(format!("--column `{name}` is not one of {:?}", ta.headers)))?,
        None => 1,
    };
    if ta.rows.len() != tb.rows.len() {
        return Err(CliError::data(format!("{} rows vs {} rows", ta.rows.len(), tb.rows.len())));
    }
    if ta.rows.is_empty() {
        return Err(CliError::data(format!("{}: no rows", a.report_a.display())));
    }
    let num = |path: &Path, line: usize, v: &str| {
        v.parse::<f64>()
            .map_err(|_| CliError::data(format!("{}: row {line}: `{v}` in column `{}` is not a number", path.display(), ta.headers[col])))
    };
    let mut out = format!("{},a,b,b_minus_a\n", ta.headers[0]);
    let (mut sa, mut sb, mut b_wins, mut a_wins) = (0.0, 0.0, 0usize, 0usize);
    for (i, (ra, rb)) in ta.rows.iter().zip(&tb.rows).enumerate() {
        if ra[0] != rb[0] {
            return Err(CliError::data(format!("row {}: key `{}` vs `{}`", i + 2, ra[0], rb[0])));
        }
        let va = num(&a.report_a, i + 2, &ra[col])?;
        let vb = num(&a.report_b, i + 2, &rb[col])?;
        sa += va;
        sb += vb;
        b_wins += (vb > va) as usize;
        a_wins += (va > vb) as usize;
        let _ = writeln!(out, "{},{va},{vb},{}", ra[0], vb - va);
    }
    let n = ta.rows.len();
    println!("column {}: {n} pairs", ta.headers[col]);
    println!("mean a {:.4}, mean b {:.4}, mean b - a {:.4}", sa / n as f64, sb / n as f64, (sb - sa) / n as f64);
    println!("b > a on {b_wins}, a > b on {a_wins}, ties {}", n - a_wins - b_wins);
    let outputs: Vec<PathBuf> = a.out.iter().cloned().collect();
    if let Some(path) = &a.out {
        write_atomic(path, out.as_bytes())?;
    }
    let cfg = serde_json::json!({ "column": ta.headers[col] });
    Ok((cfg, vec![a.report_a.clone(), a.report_b.clone()], outputs, a.out.clone()))
}

fn experiment(a: &ExperimentArgs, exec: Exec) -> Result<Outcome, CliError> {
    let cfg: ExperimentConfig = load_config(a.config.as_deref())?;
    let model = BodyModel::standard();
    let run_modes = matches!(a.protocol, ProtocolArg::Modes | ProtocolArg::All);
    let run_encoders = matches!(a.protocol, ProtocolArg::Encoders | ProtocolArg::All);
    let results = ExperimentResults {
        modes: run_modes.then(|| run_mode_comparison(&model, &cfg.modes, exec)).transpose()?,
        encoders: run_encoders.then(|| run_encoder_comparison(&model, &cfg.encoders, exec)).transpose()?,
    };
    let files = emit_report(&results, &a.out_dir)?;
    let summary = fs::read_to_string(a.out_dir.join("summary.txt")).unwrap_or_default();
    print!("{summary}");
    Ok((to_json(&cfg), inputs(&[a.config.as_ref()]), files, Some(a.out_dir.clone())))
}
