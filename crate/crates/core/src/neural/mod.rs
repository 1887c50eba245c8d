//! Regressors from 2D keypoints to body parameters, trained on pseudo ground
//! truth: a single-frame model, a masked-attention temporal model and a
//! zero-padded temporal convolution baseline. All backward passes are
//! written by hand.
//!
//! Every model is encoder → temporal stage → iterative regressor. The
//! single-frame model has no temporal stage (`Φ = φ`).

pub mod conv;
mod io;
pub mod layers;
pub mod losses;
pub mod regressor;
mod train;
pub mod transformer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use conv::ConvStage;
pub use io::{read_weights, weights_from_json, weights_to_json, write_weights, WEIGHTS_FORMAT_VERSION};
pub use layers::Mat;
pub use losses::{compute_losses, LossWeights, Losses};
pub use regressor::{Encoder, Regressor};
pub use train::{loss_curve_csv, train, window_gradient, write_loss_curve, EpochLoss, TrainConfig, TrainOutcome};
pub use transformer::{positional_encoding, TransformerLayer};

use crate::body_model::{BodyModel, FrameParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::objectives::EnergyBreakdown;
use crate::rng::{stream_rng, Stream};
use crate::scene_sim::{FrameObservation, Sequence, SequenceDataset};
use crate::solver::SequenceEstimate;
use crate::Vec3;

pub const DEFAULT_FEATURE_DIM: usize = 64;
/// Root depth of the fallback mean parameters.
pub const MEAN_DEPTH: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SingleFrame,
    Transformer,
    Conv,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::SingleFrame, ModelKind::Transformer, ModelKind::Conv];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::SingleFrame => "single-frame",
            ModelKind::Transformer => "transformer",
            ModelKind::Conv => "conv",
        }
    }

    pub fn is_temporal(self) -> bool {
        self != ModelKind::SingleFrame
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "single-frame" => Ok(ModelKind::SingleFrame),
            "transformer" => Ok(ModelKind::Transformer),
            "conv" | "conv-baseline" => Ok(ModelKind::Conv),
            _ => Err(Error::UnknownMode { what: "model", value: s.to_string() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Temporal {
    None,
    Transformer(TransformerLayer),
    Conv(ConvStage),
}

/// Encoder, temporal stage and regressor of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalModelWeights {
    pub kind: ModelKind,
    pub joint_count: usize,
    pub shape_dim: usize,
    pub encoder: Encoder,
    pub temporal: Temporal,
    pub regressor: Regressor,
}

fn check_dim(kind: ModelKind, d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::invalid("feature dimension", "must be positive"));
    }
    if kind == ModelKind::Transformer && d % transformer::HEADS != 0 {
        return Err(Error::invalid(
            "feature dimension",
            format!("{d} is not divisible by {} heads", transformer::HEADS),
        ));
    }
    Ok(())
}

impl TemporalModelWeights {
    /// Fresh weights from `seed`. `mean` is the regressor's starting
    /// parameter row.
    pub fn new(model: &BodyModel, kind: ModelKind, d: usize, mean: Mat, seed: u64) -> Result<Self> {
        check_dim(kind, d)?;
        let p = model.frame_dim() + model.shape_dim();
        if mean.shape() != (1, p) {
            return Err(Error::Dimension { what: "mean parameters", expected: p, actual: mean.len() });
        }
        let mut rng = stream_rng(seed, 0, Stream::Weights);
        let encoder = Encoder::new(3 * model.joint_count(), d, &mut rng);
        let regressor = Regressor::new(d, mean, &mut rng);
        let temporal = fresh_temporal(kind, d, seed);
        Ok(TemporalModelWeights { kind, joint_count: model.joint_count(), shape_dim: model.shape_dim(), encoder, temporal, regressor })
    }

    /// All-zero weights of the given architecture.
    pub fn zeros(kind: ModelKind, joint_count: usize, shape_dim: usize, d: usize) -> Result<Self> {
        check_dim(kind, d)?;
        if joint_count < 2 {
            return Err(Error::invalid("joint count", "need at least two joints"));
        }
        let p = 6 + 3 * (joint_count - 1) + shape_dim;
        Ok(TemporalModelWeights {
            kind,
            joint_count,
            shape_dim,
            encoder: Encoder::zeros(3 * joint_count, d),
            temporal: match kind {
                ModelKind::SingleFrame => Temporal::None,
                ModelKind::Transformer => Temporal::Transformer(TransformerLayer::zeros(d)),
                ModelKind::Conv => Temporal::Conv(ConvStage::zeros(d)),
            },
            regressor: Regressor::zeros(d, p),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kind, self.joint_count, self.shape_dim, self.feature_dim()).expect("shape already valid")
    }

    /// Same encoder and regressor with a fresh temporal stage of `kind`. A
    /// fresh stage adds nothing, so predictions are unchanged at first.
    pub fn with_kind(&self, kind: ModelKind, seed: u64) -> Result<Self> {
        let d = self.feature_dim();
        check_dim(kind, d)?;
        Ok(TemporalModelWeights { kind, temporal: fresh_temporal(kind, d, seed), ..self.clone() })
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.l2.outputs()
    }

    pub fn param_dim(&self) -> usize {
        self.regressor.param_dim()
    }

    pub fn check_model(&self, model: &BodyModel) -> Result<()> {
        if self.joint_count != model.joint_count() {
            return Err(Error::Dimension { what: "weights joint count", expected: model.joint_count(), actual: self.joint_count });
        }
        if self.shape_dim != model.shape_dim() {
            return Err(Error::Dimension { what: "weights shape dim", expected: model.shape_dim(), actual: self.shape_dim });
        }
        Ok(())
    }

    /// Named tensors in a fixed order. The regressor mean comes last.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("encoder.l1.w".into(), &self.encoder.l1.w),
            ("encoder.l1.b".into(), &self.encoder.l1.b),
            ("encoder.l2.w".into(), &self.encoder.l2.w),
            ("encoder.l2.b".into(), &self.encoder.l2.b),
        ];
        match &self.temporal {
            Temporal::None => {}
            Temporal::Transformer(t) => out.extend(t.tensors().into_iter().map(|(n, m)| (format!("transformer.{n}"), m))),
            Temporal::Conv(c) => out.extend(c.tensors().into_iter().map(|(n, m)| (format!("conv.{n}"), m))),
        }
        out.extend([
            ("regressor.l1.w".into(), &self.regressor.l1.w),
            ("regressor.l1.b".into(), &self.regressor.l1.b),
            ("regressor.l2.w".into(), &self.regressor.l2.w),
            ("regressor.l2.b".into(), &self.regressor.l2.b),
            ("regressor.mean".into(), &self.regressor.mean),
        ]);
        out
    }

    /// Mutable tensors in the order of [`TemporalModelWeights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = vec![
            &mut self.encoder.l1.w,
            &mut self.encoder.l1.b,
            &mut self.encoder.l2.w,
            &mut self.encoder.l2.b,
        ];
        match &mut self.temporal {
            Temporal::None => {}
            Temporal::Transformer(t) => out.extend(t.tensors_mut()),
            Temporal::Conv(c) => out.extend(c.tensors_mut()),
        }
        out.extend([
            &mut self.regressor.l1.w,
            &mut self.regressor.l1.b,
            &mut self.regressor.l2.w,
            &mut self.regressor.l2.b,
            &mut self.regressor.mean,
        ]);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }
}

fn fresh_temporal(kind: ModelKind, d: usize, seed: u64) -> Temporal {
    let mut rng = stream_rng(seed, 1, Stream::Weights);
    match kind {
        ModelKind::SingleFrame => Temporal::None,
        ModelKind::Transformer => Temporal::Transformer(TransformerLayer::new(d, &mut rng)),
        ModelKind::Conv => Temporal::Conv(ConvStage::new(d, &mut rng)),
    }
}

/// Rest pose at depth [`MEAN_DEPTH`] with zero shape, as a parameter row.
pub fn rest_mean(model: &BodyModel) -> Mat {
    let mut v = FrameParams::rest(model, Vec3::new(0.0, 0.0, MEAN_DEPTH)).to_vec();
    v.extend(std::iter::repeat_n(0.0, model.shape_dim()));
    Mat::from_row_slice(1, v.len(), &v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeature {
    pub phi: Vec<f64>,
    pub valid: bool,
    pub t: usize,
}

/// Encoder input: per joint `(u, v)` scaled to [-1, 1] by the image size,
/// then the confidence. Joints with zero confidence contribute zeros.
pub fn keypoint_input(obs: &FrameObservation) -> Vec<f64> {
    let (w, h) = (obs.camera.width(), obs.camera.height());
    let mut x = Vec::with_capacity(3 * obs.keypoints.len());
    for kp in &obs.keypoints {
        if kp.conf == 0.0 || !obs.valid {
            x.extend([0.0, 0.0, 0.0]);
        } else {
            x.extend([2.0 * kp.u / w - 1.0, 2.0 * kp.v / h - 1.0, kp.conf]);
        }
    }
    x
}

fn input_matrix(weights: &TemporalModelWeights, frames: &[FrameObservation]) -> Result<Mat> {
    let nin = 3 * weights.joint_count;
    let mut x = Mat::zeros(frames.len(), nin);
    for (r, f) in frames.iter().enumerate() {
        if f.keypoints.len() != weights.joint_count {
            return Err(Error::Dimension { what: "keypoints", expected: weights.joint_count, actual: f.keypoints.len() });
        }
        for (c, v) in keypoint_input(f).into_iter().enumerate() {
            x[(r, c)] = v;
        }
    }
    Ok(x)
}

/// Feature of one frame; invalid frames get the zero vector.
pub fn encode_frame(obs: &FrameObservation, weights: &TemporalModelWeights) -> Result<FrameFeature> {
    let x = input_matrix(weights, std::slice::from_ref(obs))?;
    let phi = if obs.valid {
        weights.encoder.forward(&x).0.row(0).iter().copied().collect()
    } else {
        vec![0.0; weights.feature_dim()]
    };
    Ok(FrameFeature { phi, valid: obs.valid, t: obs.t })
}

fn feature_matrix(features: &[FrameFeature]) -> Result<(Mat, Vec<bool>)> {
    let d = features.first().map_or(0, |f| f.phi.len());
    if let Some(f) = features.iter().find(|f| f.phi.len() != d) {
        return Err(Error::Dimension { what: "feature", expected: d, actual: f.phi.len() });
    }
    let m = Mat::from_fn(features.len(), d, |r, c| features[r].phi[c]);
    Ok((m, features.iter().map(|f| f.valid).collect()))
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Per-frame `Φ` of a transformer layer over a window, plus whether the
/// window had no valid frame.
pub fn transformer_forward(features: &[FrameFeature], layer: &TransformerLayer) -> Result<(Vec<Vec<f64>>, bool)> {
    if features.is_empty() {
        return Err(Error::invalid("window", "empty"));
    }
    let (phi, valid) = feature_matrix(features)?;
    let (out, cache) = layer.forward(&phi, &valid)?;
    Ok((rows_of(&out), cache.empty))
}

/// Per-frame `Φ` of the convolution stage. Features are used exactly as
/// given, whatever their validity.
pub fn conv_forward(features: &[FrameFeature], stage: &ConvStage) -> Result<Vec<Vec<f64>>> {
    if features.is_empty() {
        return Err(Error::invalid("window", "empty"));
    }
    let (phi, _) = feature_matrix(features)?;
    Ok(rows_of(&stage.forward(&phi).0))
}

/// Parameter rows `(r_gl, t_gl, theta_b, beta)` for per-frame `Φ`.
pub fn regress_params(big_phi: &[Vec<f64>], weights: &TemporalModelWeights) -> Result<Vec<Vec<f64>>> {
    let d = weights.feature_dim();
    if let Some(r) = big_phi.iter().find(|r| r.len() != d) {
        return Err(Error::Dimension { what: "feature", expected: d, actual: r.len() });
    }
    let m = Mat::from_fn(big_phi.len(), d, |r, c| big_phi[r][c]);
    Ok(rows_of(&weights.regressor.forward(&m).0))
}

enum TemporalCache {
    None,
    Transformer(transformer::TransformerCache),
    Conv(conv::ConvCache),
}

pub(crate) struct WindowCache {
    enc: regressor::EncoderCache,
    valid: Vec<bool>,
    temporal: TemporalCache,
    reg: regressor::RegressorCache,
}

/// Parameter predictions for a window of frames.
pub(crate) fn forward_window(weights: &TemporalModelWeights, frames: &[FrameObservation]) -> Result<(Mat, WindowCache)> {
    let x = input_matrix(weights, frames)?;
    let valid: Vec<bool> = frames.iter().map(|f| f.valid).collect();
    let (mut phi, enc) = weights.encoder.forward(&x);
    for (r, v) in valid.iter().enumerate() {
        if !v {
            phi.row_mut(r).fill(0.0);
        }
    }
    let (big_phi, temporal) = match &weights.temporal {
        Temporal::None => (phi, TemporalCache::None),
        Temporal::Transformer(t) => {
            let (o, c) = t.forward(&phi, &valid)?;
            (o, TemporalCache::Transformer(c))
        }
        Temporal::Conv(c) => {
            let (o, cc) = c.forward(&phi);
            (o, TemporalCache::Conv(cc))
        }
    };
    let (theta, reg) = weights.regressor.forward(&big_phi);
    Ok((theta, WindowCache { enc, valid, temporal, reg }))
}

/// Gradients of all tensors given the gradient on the predictions.
pub(crate) fn backward_window(
    weights: &TemporalModelWeights,
    cache: &WindowCache,
    g_theta: &Mat,
    freeze_encoder: bool,
) -> TemporalModelWeights {
    let mut g = weights.zeros_like();
    let g_big = weights.regressor.backward(&cache.reg, g_theta, &mut g.regressor);
    let mut g_phi = match (&weights.temporal, &cache.temporal, &mut g.temporal) {
        (Temporal::Transformer(t), TemporalCache::Transformer(c), Temporal::Transformer(gt)) => t.backward(c, &g_big, gt),
        (Temporal::Conv(s), TemporalCache::Conv(c), Temporal::Conv(gs)) => s.backward(c, &g_big, gs),
        _ => g_big,
    };
    if !freeze_encoder {
        for (r, v) in cache.valid.iter().enumerate() {
            if !v {
                g_phi.row_mut(r).fill(0.0);
            }
        }
        weights.encoder.backward(&cache.enc, &g_phi, &mut g.encoder);
    }
    g
}

/// Predicts a whole sequence in consecutive windows of `window` frames.
/// The sequence shape is the mean predicted shape over valid frames.
pub fn predict_sequence(
    model: &BodyModel,
    weights: &TemporalModelWeights,
    seq: &Sequence,
    window: usize,
) -> Result<SequenceEstimate> {
    weights.check_model(model)?;
    if window == 0 {
        return Err(Error::invalid("window", "must be positive"));
    }
    let fd = model.frame_dim();
    let mut frames = Vec::with_capacity(seq.len());
    let mut beta_sum = vec![0.0; model.shape_dim()];
    let mut beta_all = vec![0.0; model.shape_dim()];
    let mut nvalid = 0usize;
    for chunk in seq.frames.chunks(window) {
        let (theta, _) = forward_window(weights, chunk)?;
        for (r, obs) in chunk.iter().enumerate() {
            let row: Vec<f64> = theta.row(r).iter().copied().collect();
            frames.push(FrameParams::from_slice(&row[..fd])?);
            for (b, v) in row[fd..].iter().enumerate() {
                beta_all[b] += v;
                if obs.valid {
                    beta_sum[b] += v;
                }
            }
            nvalid += obs.valid as usize;
        }
    }
    let beta = if nvalid > 0 {
        beta_sum.iter().map(|v| v / nvalid as f64).collect()
    } else {
        beta_all.iter().map(|v| v / seq.len().max(1) as f64).collect()
    };
    Ok(SequenceEstimate {
        identity: seq.identity,
        beta,
        converged: seq.frames.iter().map(|f| f.valid).collect(),
        frames,
        energy: EnergyBreakdown::default(),
        iterations: 0,
    })
}

pub fn predict_dataset(
    model: &BodyModel,
    weights: &TemporalModelWeights,
    dataset: &SequenceDataset,
    window: usize,
    exec: Exec,
) -> Result<Vec<SequenceEstimate>> {
    exec.try_map_range(dataset.sequences.len(), |i| predict_sequence(model, weights, &dataset.sequences[i], window))
}
