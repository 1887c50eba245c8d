//! Sequence fitting in three modes.
//!
//! - `single_frame`: no temporal coupling; frames share only `beta`.
//! - `single_shot`: camera-frame joint smoothness, never across a shot change.
//! - `multi_shot`: canonical-frame smoothness over every consecutive valid
//!   pair, shot changes included.

mod init;
mod io;
pub mod lbfgs;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use init::{depth_from_bones, initialize_sequence, InitStrategy, DEFAULT_DEPTH, YAW_GRID};
pub use io::{
    read_estimates, record_joints, write_estimates, EstimateFile, FrameRecord, SequenceRecord, ESTIMATE_FORMAT_VERSION,
};

use crate::body_model::{frame_joints, BodyModel, FrameParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::objectives::{total_energy, EnergyBreakdown, Layout, Smoothing, Weights};
use crate::scene_sim::{Sequence, SequenceDataset};
use crate::Vec3;

/// Shape coefficients are kept inside `[-BETA_BOUND, BETA_BOUND]`.
pub const BETA_BOUND: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    SingleFrame,
    SingleShot,
    MultiShot,
}

impl SolverMode {
    pub const ALL: [SolverMode; 3] = [SolverMode::SingleFrame, SolverMode::SingleShot, SolverMode::MultiShot];

    pub fn smoothing(self) -> Smoothing {
        match self {
            SolverMode::SingleFrame => Smoothing::None,
            SolverMode::SingleShot => Smoothing::WithinShot,
            SolverMode::MultiShot => Smoothing::Canonical,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SolverMode::SingleFrame => "single-frame",
            SolverMode::SingleShot => "single-shot",
            SolverMode::MultiShot => "multi-shot",
        }
    }
}

impl fmt::Display for SolverMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolverMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "single-frame" => Ok(SolverMode::SingleFrame),
            "single-shot" => Ok(SolverMode::SingleShot),
            "multi-shot" => Ok(SolverMode::MultiShot),
            _ => Err(Error::UnknownMode { what: "solver mode", value: s.to_string() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub mode: SolverMode,
    pub weights: Weights,
    pub max_iters: usize,
    /// On the gradient infinity-norm.
    pub grad_tol: f64,
    /// Relative to `max(1, |x|_inf)`.
    pub step_tol: f64,
    pub init: InitStrategy,
    /// Perturbation scale of `perturbed_gt` initialization.
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mode: SolverMode::MultiShot,
            weights: Weights::default(),
            max_iters: 300,
            grad_tol: 1e-6,
            step_tol: 1e-9,
            init: InitStrategy::PerturbedGt,
            init_noise: 0.2,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.grad_tol > 0.0 && self.step_tol > 0.0) {
            return Err(Error::invalid("solver config", "tolerances must be positive"));
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return Err(Error::invalid("solver config", "init_noise must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEstimate {
    pub identity: u64,
    pub beta: Vec<f64>,
    pub frames: Vec<FrameParams>,
    /// False for invalid frames and for every frame of an unconverged solve.
    pub converged: Vec<bool>,
    pub energy: EnergyBreakdown,
    pub iterations: usize,
}

impl SequenceEstimate {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The simulator's ground truth as an estimate. Frames without ground
    /// truth are an error.
    pub fn from_ground_truth(seq: &Sequence) -> Result<Self> {
        let frames = seq
            .frames
            .iter()
            .map(|f| f.gt.as_ref().map(|g| g.params.clone()).ok_or(Error::MissingGroundTruth { frame: f.t }))
            .collect::<Result<Vec<_>>>()?;
        let beta = seq.beta_gt.clone().ok_or(Error::MissingGroundTruth { frame: 0 })?;
        Ok(SequenceEstimate {
            identity: seq.identity,
            beta,
            frames,
            converged: seq.frames.iter().map(|f| f.valid).collect(),
            energy: EnergyBreakdown::default(),
            iterations: 0,
        })
    }

    /// Camera-frame joints of frame `t`.
    pub fn joints(&self, model: &BodyModel, t: usize) -> Result<Vec<Vec3>> {
        frame_joints(model, &self.frames[t], &self.beta)
    }
}

fn project_beta(x: &mut [f64], dim: usize) {
    for b in &mut x[..dim] {
        *b = b.clamp(-BETA_BOUND, BETA_BOUND);
    }
}

/// Minimizes the sequence energy from `init`.
pub fn optimize_sequence(
    model: &BodyModel,
    seq: &Sequence,
    cfg: &SolverConfig,
    init: &SequenceEstimate,
) -> Result<SequenceEstimate> {
    cfg.validate()?;
    if init.frames.len() != seq.len() {
        return Err(Error::Dimension { what: "initial estimate frames", expected: seq.len(), actual: init.frames.len() });
    }
    let layout = Layout::new(model, seq.len());
    let x0 = layout.pack(&init.beta, &init.frames);
    let smoothing = cfg.mode.smoothing();
    let objective = |x: &[f64]| {
        let (e, g) = total_energy(model, seq, x, &cfg.weights, smoothing, true)?;
        Ok((e.total, g.expect("gradient requested")))
    };
    let opts = lbfgs::Options { max_iters: cfg.max_iters, grad_tol: cfg.grad_tol, step_tol: cfg.step_tol };
    let dim = model.shape_dim();
    let out = lbfgs::minimize(objective, x0, &opts, |x| project_beta(x, dim))?;
    let (energy, _) = total_energy(model, seq, &out.x, &cfg.weights, smoothing, false)?;
    let (beta, frames) = layout.unpack(&out.x)?;
    let ok = out.stop.converged();
    Ok(SequenceEstimate {
        identity: seq.identity,
        beta,
        frames,
        converged: seq.frames.iter().map(|f| ok && f.valid).collect(),
        energy,
        iterations: out.iterations,
    })
}

/// Initializes and solves one sequence.
pub fn solve_sequence(model: &BodyModel, seq: &Sequence, cfg: &SolverConfig) -> Result<SequenceEstimate> {
    let init = initialize_sequence(model, seq, cfg.init, cfg.init_noise, cfg.seed)?;
    optimize_sequence(model, seq, cfg, &init)
}

/// Solves every sequence of a dataset; results are in dataset order
/// whatever the executor.
pub fn solve_dataset(
    model: &BodyModel,
    dataset: &SequenceDataset,
    cfg: &SolverConfig,
    exec: Exec,
) -> Result<Vec<SequenceEstimate>> {
    exec.try_map_range(dataset.sequences.len(), |i| solve_sequence(model, &dataset.sequences[i], cfg))
}
