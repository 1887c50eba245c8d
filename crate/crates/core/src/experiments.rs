//! Seeded comparison protocols and report emission.
//!
//! Two protocols are provided. The mode comparison solves truncated two-shot
//! scenes with each smoothing mode and scores cross-shot PCK. The encoder
//! comparison pretrains a single-frame regressor on optimized pseudo ground
//! truth, then trains the transformer and the convolutional stage from it on
//! the same data. Seeds are independent and run through [`Exec`]; all
//! reductions happen in seed order, so reports do not depend on the executor.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::body_model::BodyModel;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{cross_shot_pck, PckReport, DEFAULT_ALPHAS};
use crate::neural::{predict_sequence, train, ModelKind, TrainConfig};
use crate::scene_sim::{generate_dataset, generate_two_shot_sequence, Sequence, SequenceDataset, ShotConfig, SimConfig};
use crate::solver::{solve_dataset, solve_sequence, InitStrategy, SequenceEstimate, SolverConfig, SolverMode};

/// Alpha at which verdicts are taken.
pub const VERDICT_ALPHA: f64 = 0.1;

/// Mode comparison on truncated two-shot scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeProtocol {
    pub seeds: usize,
    /// Two-shot sequences per scene; cross-shot PCK is pooled over them.
    pub sequences_per_seed: usize,
    pub sim: SimConfig,
    /// `mode` and `seed` are set per run.
    pub solver: SolverConfig,
    pub alphas: Vec<f64>,
    /// Required lead of multi-shot over single-frame, in PCK points.
    pub min_margin: f64,
    /// Seeds on which the strict ordering must hold.
    pub min_ordered_seeds: usize,
}

impl Default for ModeProtocol {
    fn default() -> Self {
        ModeProtocol {
            seeds: 20,
            sequences_per_seed: 3,
            sim: SimConfig::default(),
            solver: SolverConfig { init: InitStrategy::PerturbedGtVisible, max_iters: 1500, ..SolverConfig::default() },
            alphas: DEFAULT_ALPHAS.to_vec(),
            min_margin: 5.0,
            min_ordered_seeds: 17,
        }
    }
}

/// Single-frame pretraining, then transformer and conv stages on top of the
/// frozen pretrained encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderProtocol {
    pub seeds: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    /// `seed` and `num_sequences` are set per run.
    pub sim: SimConfig,
    /// Pseudo ground truth is the multi-shot solution under this config.
    pub solver: SolverConfig,
    pub pretrain: TrainConfig,
    pub temporal: TrainConfig,
    pub alphas: Vec<f64>,
    /// Seeds on which the transformer must match or beat the conv stage.
    pub min_winning_seeds: usize,
}

impl Default for EncoderProtocol {
    fn default() -> Self {
        EncoderProtocol {
            seeds: 10,
            train_sequences: 8,
            test_sequences: 12,
            sim: SimConfig {
                shots: ShotConfig { missing_prob: 0.3, ..ShotConfig::default() },
                ..SimConfig::default()
            },
            solver: SolverConfig::default(),
            pretrain: TrainConfig { epochs: 100, learning_rate: 3e-3, ..TrainConfig::default() },
            temporal: TrainConfig { epochs: 100, learning_rate: 1e-3, freeze_encoder: true, ..TrainConfig::default() },
            alphas: DEFAULT_ALPHAS.to_vec(),
            min_winning_seeds: 8,
        }
    }
}

/// Per-seed pooled reports, indexed like [`SolverMode::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSeedResult {
    pub seed: u64,
    pub reports: Vec<PckReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub protocol: ModeProtocol,
    pub seeds: Vec<ModeSeedResult>,
}

/// Per-seed pooled test reports, indexed like [`ModelKind::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSeedResult {
    pub seed: u64,
    pub reports: Vec<PckReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderComparison {
    pub protocol: EncoderProtocol,
    pub seeds: Vec<EncoderSeedResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub modes: Option<ModeComparison>,
    pub encoders: Option<EncoderComparison>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeVerdict {
    /// Mean PCK at [`VERDICT_ALPHA`] per mode, in [`SolverMode::ALL`] order.
    pub means: [f64; 3],
    pub ordered_on_means: bool,
    pub margin: f64,
    pub ordered_seeds: usize,
    pub seeds: usize,
    pub min_margin: f64,
    pub min_ordered_seeds: usize,
}

impl ModeVerdict {
    pub fn passes(&self) -> bool {
        self.ordered_on_means && self.margin >= self.min_margin && self.ordered_seeds >= self.min_ordered_seeds
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderVerdict {
    /// Mean PCK at [`VERDICT_ALPHA`] per model, in [`ModelKind::ALL`] order.
    pub means: [f64; 3],
    pub winning_seeds: usize,
    pub seeds: usize,
    pub min_winning_seeds: usize,
}

impl EncoderVerdict {
    pub fn passes(&self) -> bool {
        self.winning_seeds >= self.min_winning_seeds
    }
}

fn verdict_pck(r: &PckReport) -> Result<f64> {
    r.at(VERDICT_ALPHA)
        .ok_or_else(|| Error::invalid("alphas", format!("verdict alpha {VERDICT_ALPHA} is not evaluated")))
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() || !alphas.iter().any(|a| (a - VERDICT_ALPHA).abs() < 1e-12) {
        return Err(Error::invalid("alphas", format!("must include {VERDICT_ALPHA}")));
    }
    Ok(())
}

/// Per-seed means of `pck@VERDICT_ALPHA` for three columns.
fn means(rows: &[&[PckReport]]) -> Result<[f64; 3]> {
    if rows.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut m = [0.0; 3];
    for r in rows {
        for (k, slot) in m.iter_mut().enumerate() {
            *slot += verdict_pck(&r[k])?;
        }
    }
    Ok(m.map(|v| v / rows.len() as f64))
}

impl ModeComparison {
    pub fn verdict(&self) -> Result<ModeVerdict> {
        let rows: Vec<&[PckReport]> = self.seeds.iter().map(|s| s.reports.as_slice()).collect();
        let means = means(&rows)?;
        let mut ordered_seeds = 0;
        for r in &rows {
            let [sf, ss, ms] = [verdict_pck(&r[0])?, verdict_pck(&r[1])?, verdict_pck(&r[2])?];
            ordered_seeds += (ms > ss && ss > sf) as usize;
        }
        Ok(ModeVerdict {
            means,
            ordered_on_means: means[2] > means[1] && means[1] > means[0],
            margin: means[2] - means[0],
            ordered_seeds,
            seeds: rows.len(),
            min_margin: self.protocol.min_margin,
            min_ordered_seeds: self.protocol.min_ordered_seeds,
        })
    }
}

impl EncoderComparison {
    pub fn verdict(&self) -> Result<EncoderVerdict> {
        let rows: Vec<&[PckReport]> = self.seeds.iter().map(|s| s.reports.as_slice()).collect();
        let means = means(&rows)?;
        let mut winning_seeds = 0;
        for r in &rows {
            winning_seeds += (verdict_pck(&r[1])? >= verdict_pck(&r[2])?) as usize;
        }
        Ok(EncoderVerdict {
            means,
            winning_seeds,
            seeds: rows.len(),
            min_winning_seeds: self.protocol.min_winning_seeds,
        })
    }
}

/// The scenes of one mode-comparison seed.
pub fn mode_scenes(model: &BodyModel, protocol: &ModeProtocol, seed: u64) -> Result<Vec<Sequence>> {
    let sim = SimConfig { seed, num_sequences: protocol.sequences_per_seed, ..protocol.sim.clone() };
    (0..protocol.sequences_per_seed).map(|i| generate_two_shot_sequence(model, &sim, i)).collect()
}

/// Cross-shot PCK pooled over sequences; sequences without a usable shot
/// boundary are skipped.
fn pooled(model: &BodyModel, seqs: &[Sequence], ests: &[SequenceEstimate], alphas: &[f64]) -> Result<PckReport> {
    let mut reports = Vec::with_capacity(seqs.len());
    for (seq, est) in seqs.iter().zip(ests) {
        match cross_shot_pck(model, est, seq, alphas) {
            Ok(r) => reports.push(r),
            Err(Error::NoShotBoundaries) => {}
            Err(e) => return Err(e),
        }
    }
    if reports.is_empty() {
        return Err(Error::NoShotBoundaries);
    }
    PckReport::pool(&reports)
}

/// Runs the mode comparison over seeds `0..protocol.seeds`.
pub fn run_mode_comparison(model: &BodyModel, protocol: &ModeProtocol, exec: Exec) -> Result<ModeComparison> {
    check_alphas(&protocol.alphas)?;
    protocol.solver.validate()?;
    if protocol.seeds == 0 || protocol.sequences_per_seed == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let seeds = exec.try_map_range(protocol.seeds, |s| {
        let seed = s as u64;
        let scenes = mode_scenes(model, protocol, seed)?;
        let reports = SolverMode::ALL
            .iter()
            .map(|&mode| {
                let cfg = SolverConfig { mode, seed, ..protocol.solver.clone() };
                let ests = scenes.iter().map(|seq| solve_sequence(model, seq, &cfg)).collect::<Result<Vec<_>>>()?;
                pooled(model, &scenes, &ests, &protocol.alphas)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok::<_, Error>(ModeSeedResult { seed, reports })
    })?;
    Ok(ModeComparison { protocol: protocol.clone(), seeds })
}

/// Training and test datasets of one encoder-comparison seed. The test set
/// continues the identity numbering of the training set.
pub fn encoder_datasets(model: &BodyModel, protocol: &EncoderProtocol, seed: u64) -> Result<(SequenceDataset, SequenceDataset)> {
    let n = protocol.train_sequences + protocol.test_sequences;
    let sim = SimConfig { seed, num_sequences: n, ..protocol.sim.clone() };
    let mut all = generate_dataset(model, &sim, Exec::Serial)?;
    let test = all.sequences.split_off(protocol.train_sequences);
    Ok((all, SequenceDataset::new(test)))
}

/// Runs the encoder comparison over seeds `0..protocol.seeds`.
pub fn run_encoder_comparison(model: &BodyModel, protocol: &EncoderProtocol, exec: Exec) -> Result<EncoderComparison> {
    check_alphas(&protocol.alphas)?;
    protocol.solver.validate()?;
    protocol.pretrain.validate()?;
    protocol.temporal.validate()?;
    if protocol.seeds == 0 || protocol.train_sequences == 0 || protocol.test_sequences == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let seeds = exec.try_map_range(protocol.seeds, |s| {
        let seed = s as u64;
        let (train_set, test_set) = encoder_datasets(model, protocol, seed)?;
        let solver = SolverConfig { mode: SolverMode::MultiShot, seed, ..protocol.solver.clone() };
        let pseudo = solve_dataset(model, &train_set, &solver, Exec::Serial)?;
        let pre_cfg = TrainConfig { seed, ..protocol.pretrain.clone() };
        let single = train(model, &train_set, &pseudo, ModelKind::SingleFrame, &pre_cfg, None, Exec::Serial)?.weights;
        let tmp_cfg = TrainConfig { seed, ..protocol.temporal.clone() };
        let mut reports = Vec::with_capacity(3);
        for kind in ModelKind::ALL {
            let (weights, window) = if kind == ModelKind::SingleFrame {
                (single.clone(), pre_cfg.window)
            } else {
                (train(model, &train_set, &pseudo, kind, &tmp_cfg, Some(&single), Exec::Serial)?.weights, tmp_cfg.window)
            };
            let ests = test_set
                .sequences
                .iter()
                .map(|seq| predict_sequence(model, &weights, seq, window))
                .collect::<Result<Vec<_>>>()?;
            reports.push(pooled(model, &test_set.sequences, &ests, &protocol.alphas)?);
        }
        Ok::<_, Error>(EncoderSeedResult { seed, reports })
    })?;
    Ok(EncoderComparison { protocol: protocol.clone(), seeds })
}

fn alpha_header(first: &str, alphas: &[f64]) -> String {
    let mut s = first.to_string();
    for a in alphas {
        let _ = write!(s, ",pck@{a}");
    }
    s.push('\n');
    s
}

/// Mean over seeds per alpha of column `k`.
fn mean_row(rows: &[&[PckReport]], k: usize, n_alphas: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_alphas];
    for r in rows {
        for (slot, v) in m.iter_mut().zip(&r[k].pck) {
            *slot += v;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

fn push_row(s: &mut String, label: &str, values: &[f64]) {
    s.push_str(label);
    for v in values {
        let _ = write!(s, ",{v:.4}");
    }
    s.push('\n');
}

/// `mode,pck@a...` with seed-mean PCK, one row per mode.
pub fn modes_csv(c: &ModeComparison) -> String {
    let rows: Vec<&[PckReport]> = c.seeds.iter().map(|s| s.reports.as_slice()).collect();
    let mut s = alpha_header("mode", &c.protocol.alphas);
    for (k, mode) in SolverMode::ALL.iter().enumerate() {
        push_row(&mut s, mode.as_str(), &mean_row(&rows, k, c.protocol.alphas.len()));
    }
    s
}

/// `encoder,protocol,pck@a...` with seed-mean test PCK, one row per model.
pub fn encoders_csv(c: &EncoderComparison) -> String {
    let rows: Vec<&[PckReport]> = c.seeds.iter().map(|s| s.reports.as_slice()).collect();
    let protocol = format!(
        "missing_{}{}",
        c.protocol.sim.shots.missing_prob,
        if c.protocol.temporal.freeze_encoder { "_frozen_encoder" } else { "" }
    );
    let mut s = alpha_header("encoder,protocol", &c.protocol.alphas);
    for (k, kind) in ModelKind::ALL.iter().enumerate() {
        push_row(&mut s, &format!("{kind},{protocol}"), &mean_row(&rows, k, c.protocol.alphas.len()));
    }
    s
}

fn per_seed_csv<L: std::fmt::Display>(first: &str, alphas: &[f64], labels: &[L], seeds: &[(u64, &[PckReport])]) -> String {
    let mut s = alpha_header(&format!("seed,{first}"), alphas);
    for (seed, reports) in seeds {
        for (label, r) in labels.iter().zip(reports.iter()) {
            push_row(&mut s, &format!("{seed},{label}"), &r.pck);
        }
    }
    s
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Plain-text summary with per-seed PCK, means and verdicts.
pub fn summary_text(results: &ExperimentResults) -> Result<String> {
    let mut s = String::new();
    if let Some(c) = &results.modes {
        let v = c.verdict()?;
        let _ = writeln!(s, "mode comparison: {} seeds x {} two-shot scenes, cross-shot PCK@{VERDICT_ALPHA}", v.seeds, c.protocol.sequences_per_seed);
        let _ = writeln!(s, "seed  single-frame  single-shot  multi-shot  ordered");
        for r in &c.seeds {
            let p: Vec<f64> = r.reports.iter().map(verdict_pck).collect::<Result<_>>()?;
            let _ = writeln!(s, "{:>4}  {:>12.2}  {:>11.2}  {:>10.2}  {}", r.seed, p[0], p[1], p[2], p[2] > p[1] && p[1] > p[0]);
        }
        let _ = writeln!(s, "mean  {:>12.2}  {:>11.2}  {:>10.2}", v.means[0], v.means[1], v.means[2]);
        let _ = writeln!(s, "ordering on means (multi > single-shot > single-frame): {}", mark(v.ordered_on_means));
        let _ = writeln!(s, "multi-shot lead over single-frame: {:.2} (need >= {}): {}", v.margin, v.min_margin, mark(v.margin >= v.min_margin));
        let _ = writeln!(
            s,
            "seeds with strict ordering: {}/{} (need >= {}): {}",
            v.ordered_seeds,
            v.seeds,
            v.min_ordered_seeds,
            mark(v.ordered_seeds >= v.min_ordered_seeds)
        );
        let _ = writeln!(s, "verdict: {}\n", mark(v.passes()));
    }
    if let Some(c) = &results.encoders {
        let v = c.verdict()?;
        let _ = writeln!(s, "encoder comparison: {} seeds, missing {}, test cross-shot PCK@{VERDICT_ALPHA}", v.seeds, c.protocol.sim.shots.missing_prob);
        let _ = writeln!(s, "seed  single-frame  transformer        conv  transformer>=conv");
        for r in &c.seeds {
            let p: Vec<f64> = r.reports.iter().map(verdict_pck).collect::<Result<_>>()?;
            let _ = writeln!(s, "{:>4}  {:>12.2}  {:>11.2}  {:>10.2}  {}", r.seed, p[0], p[1], p[2], p[1] >= p[2]);
        }
        let _ = writeln!(s, "mean  {:>12.2}  {:>11.2}  {:>10.2}", v.means[0], v.means[1], v.means[2]);
        let _ = writeln!(
            s,
            "seeds with transformer >= conv: {}/{} (need >= {}): {}",
            v.winning_seeds,
            v.seeds,
            v.min_winning_seeds,
            mark(v.passes())
        );
        let _ = writeln!(s, "verdict: {}", mark(v.passes()));
    }
    Ok(s)
}

/// Writes the comparison tables, per-seed tables and `summary.txt` into
/// `dir` and returns the written paths. Fails with
/// [`Error::EmptyEvaluation`] when there is nothing to report.
pub fn emit_report(results: &ExperimentResults, dir: &Path) -> Result<Vec<PathBuf>> {
    let empty_modes = results.modes.as_ref().is_none_or(|c| c.seeds.is_empty());
    let empty_encoders = results.encoders.as_ref().is_none_or(|c| c.seeds.is_empty());
    if empty_modes && empty_encoders {
        return Err(Error::EmptyEvaluation);
    }
    let results = ExperimentResults {
        modes: results.modes.clone().filter(|c| !c.seeds.is_empty()),
        encoders: results.encoders.clone().filter(|c| !c.seeds.is_empty()),
    };
    let summary = summary_text(&results)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    if let Some(c) = &results.modes {
        let seeds: Vec<(u64, &[PckReport])> = c.seeds.iter().map(|s| (s.seed, s.reports.as_slice())).collect();
        let labels: Vec<&str> = SolverMode::ALL.iter().map(|m| m.as_str()).collect();
        files.push(("modes_pck.csv", modes_csv(c)));
        files.push(("modes_pck_per_seed.csv", per_seed_csv("mode", &c.protocol.alphas, &labels, &seeds)));
    }
    if let Some(c) = &results.encoders {
        let seeds: Vec<(u64, &[PckReport])> = c.seeds.iter().map(|s| (s.seed, s.reports.as_slice())).collect();
        files.push(("encoders_pck.csv", encoders_csv(c)));
        files.push(("encoders_pck_per_seed.csv", per_seed_csv("encoder", &c.protocol.alphas, &ModelKind::ALL, &seeds)));
    }
    files.push(("summary.txt", summary));
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
