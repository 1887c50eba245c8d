//! Mini-batch Adam training on pseudo ground truth.
//!
//! Samples are windows: consecutive chunks of `window` frames of a sequence
//! with at least one valid frame. The single-frame model sees the same
//! windows but has no temporal stage, and its smoothness weight is zero.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layers::{Adam, Mat};
use super::losses::{compute_losses, LossWeights, Losses};
use super::{backward_window, forward_window, ModelKind, TemporalModelWeights, DEFAULT_FEATURE_DIM};
use crate::body_model::{BodyModel, FrameParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{stream_rng, Stream};
use crate::scene_sim::{FrameObservation, SequenceDataset};
use crate::solver::SequenceEstimate;

/// Training hyperparameters; the TOML file for `train` mirrors it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub window: usize,
    /// Windows per batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda_2d: f64,
    pub lambda_smpl: f64,
    pub lambda_sm: f64,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub feature_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 16,
            batch_size: 8,
            learning_rate: 1e-3,
            epochs: 100,
            lambda_2d: 1.0,
            lambda_smpl: 1.0,
            lambda_sm: 0.1,
            seed: 0,
            freeze_encoder: false,
            feature_dim: DEFAULT_FEATURE_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.batch_size == 0 || self.epochs == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("train config", "window, batch_size, epochs and feature_dim must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train config", "learning_rate must be positive"));
        }
        for (name, v) in [("lambda_2d", self.lambda_2d), ("lambda_smpl", self.lambda_smpl), ("lambda_sm", self.lambda_sm)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("train config", format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Loss weights for `kind`; the single-frame model has no smoothness.
    pub fn loss_weights(&self, kind: ModelKind) -> LossWeights {
        LossWeights {
            lambda_2d: self.lambda_2d,
            lambda_smpl: self.lambda_smpl,
            lambda_sm: if kind.is_temporal() { self.lambda_sm } else { 0.0 },
        }
    }
}

/// Mean losses over the windows of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l2d: f64,
    pub lsmpl: f64,
    pub lsm: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: TemporalModelWeights,
    pub curve: Vec<EpochLoss>,
}

pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,l2d,lsmpl,lsm,total\n");
    for e in curve {
        s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.l2d, e.lsmpl, e.lsm, e.total));
    }
    s
}

pub fn write_loss_curve(curve: &[EpochLoss], path: &Path) -> Result<()> {
    File::create(path)
        .and_then(|mut f| f.write_all(loss_curve_csv(curve).as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// One training sample.
struct Window<'a> {
    frames: &'a [FrameObservation],
    pseudo: &'a [FrameParams],
    beta: &'a [f64],
}

/// Losses of one window and the gradient of its total with respect to every
/// tensor. Encoder gradients are left at zero when `freeze_encoder` is set.
pub fn window_gradient(
    model: &BodyModel,
    weights: &TemporalModelWeights,
    frames: &[FrameObservation],
    pseudo: &[FrameParams],
    pseudo_beta: &[f64],
    loss_weights: &LossWeights,
    freeze_encoder: bool,
) -> Result<(Losses, TemporalModelWeights)> {
    let (theta, cache) = forward_window(weights, frames)?;
    let (losses, g_theta) = compute_losses(model, &theta, frames, pseudo, pseudo_beta, loss_weights)?;
    Ok((losses, backward_window(weights, &cache, &g_theta, freeze_encoder)))
}

/// Mean pseudo-ground-truth parameter row over valid frames.
fn pseudo_mean(model: &BodyModel, windows: &[Window]) -> Mat {
    let p = model.frame_dim() + model.shape_dim();
    let mut sum = vec![0.0; p];
    let mut n = 0usize;
    for w in windows {
        for (obs, params) in w.frames.iter().zip(w.pseudo) {
            if obs.valid {
                let row = params.to_vec();
                for (s, v) in sum.iter_mut().zip(row.iter().chain(w.beta)) {
                    *s += v;
                }
                n += 1;
            }
        }
    }
    Mat::from_fn(1, p, |_, c| sum[c] / n.max(1) as f64)
}

fn gather(weights: &TemporalModelWeights, trainable: &[usize]) -> Vec<f64> {
    let tensors = weights.tensors();
    trainable.iter().flat_map(|&k| tensors[k].1.iter().copied().collect::<Vec<_>>()).collect()
}

fn scatter(weights: &mut TemporalModelWeights, trainable: &[usize], flat: &[f64]) {
    let mut tensors = weights.tensors_mut();
    let mut at = 0;
    for &k in trainable {
        let m = &mut tensors[k];
        let n = m.len();
        m.as_mut_slice().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// Trains a model of `kind` on `data` against `pseudo_gt` (one estimate per
/// sequence, matched by position and identity).
///
/// With `init`, training starts from those weights; a different `kind` keeps
/// the encoder and regressor and adds a fresh temporal stage. Otherwise the
/// regressor starts from the mean pseudo-ground-truth parameters.
pub fn train(
    model: &BodyModel,
    data: &SequenceDataset,
    pseudo_gt: &[SequenceEstimate],
    kind: ModelKind,
    cfg: &TrainConfig,
    init: Option<&TemporalModelWeights>,
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pseudo_gt.len() != data.sequences.len() {
        return Err(Error::Dimension { what: "pseudo ground truth", expected: data.sequences.len(), actual: pseudo_gt.len() });
    }
    let fd = model.frame_dim();
    let mut windows = Vec::new();
    for (seq, est) in data.sequences.iter().zip(pseudo_gt) {
        if seq.identity != est.identity {
            return Err(Error::invalid(
                "pseudo ground truth",
                format!("identity {} does not match sequence {}", est.identity, seq.identity),
            ));
        }
        if est.len() != seq.len() {
            return Err(Error::Dimension { what: "pseudo ground-truth frames", expected: seq.len(), actual: est.len() });
        }
        if est.beta.len() != model.shape_dim() {
            return Err(Error::Dimension { what: "pseudo ground-truth shape", expected: model.shape_dim(), actual: est.beta.len() });
        }
        if let Some(f) = est.frames.iter().find(|f| 6 + 3 * f.theta_b.len() != fd) {
            return Err(Error::Dimension { what: "pseudo ground-truth pose", expected: fd, actual: 6 + 3 * f.theta_b.len() });
        }
        for (frames, pseudo) in seq.frames.chunks(cfg.window).zip(est.frames.chunks(cfg.window)) {
            if frames.iter().any(|f| f.valid) {
                windows.push(Window { frames, pseudo, beta: &est.beta });
            }
        }
    }
    if windows.is_empty() {
        return Err(Error::NoValidFrames);
    }

    let mut weights = match init {
        Some(w) => {
            w.check_model(model)?;
            if w.kind == kind {
                w.clone()
            } else {
                w.with_kind(kind, cfg.seed)?
            }
        }
        None => TemporalModelWeights::new(model, kind, cfg.feature_dim, pseudo_mean(model, &windows), cfg.seed)?,
    };
    let trainable: Vec<usize> = weights
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| name != "regressor.mean" && !(cfg.freeze_encoder && name.starts_with("encoder.")))
        .map(|(k, _)| k)
        .collect();
    let mut flat = gather(&weights, &trainable);
    let mut adam = Adam::new(flat.len(), cfg.learning_rate);
    let lw = cfg.loss_weights(kind);

    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64, Stream::Shuffle));
        let mut sum = Losses::default();
        for (batch, ids) in order.chunks(cfg.batch_size).enumerate() {
            let results = exec.map(ids, |_, &i| {
                let w = &windows[i];
                window_gradient(model, &weights, w.frames, w.pseudo, w.beta, &lw, cfg.freeze_encoder)
            });
            let mut grad = vec![0.0; flat.len()];
            for r in results {
                let (losses, g) = r?;
                if !losses.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch });
                }
                sum.l2d += losses.l2d;
                sum.lsmpl += losses.lsmpl;
                sum.lsm_joint += losses.lsm_joint;
                sum.lsm_param += losses.lsm_param;
                sum.total += losses.total;
                for (a, b) in grad.iter_mut().zip(gather(&g, &trainable)) {
                    *a += b;
                }
            }
            let scale = 1.0 / ids.len() as f64;
            grad.iter_mut().for_each(|v| *v *= scale);
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            adam.update(&mut flat, &grad);
            scatter(&mut weights, &trainable, &flat);
        }
        let n = windows.len() as f64;
        curve.push(EpochLoss {
            epoch,
            l2d: sum.l2d / n,
            lsmpl: sum.lsmpl / n,
            lsm: sum.lsm() / n,
            total: sum.total / n,
        });
    }
    Ok(TrainOutcome { weights, curve })
}
