//! Starting points for the sequence solve.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SequenceEstimate;
use crate::body_model::{forward_kinematics, rodrigues, BodyModel, FrameParams};
use crate::error::{Error, Result};
use crate::objectives::{e_proj, EnergyBreakdown, Weights};
use crate::rng::{stream_rng, Stream};
use crate::scene_sim::{FrameObservation, Sequence};
use crate::Vec3;

pub const YAW_GRID: usize = 36;
/// Root depth used when a frame shows no complete bone.
pub const DEFAULT_DEPTH: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    PerturbedGt,
    /// Perturbed ground truth for what the detections show; joints whose
    /// rotation moves no detected joint start at rest, as a regressor with no
    /// view of a cut-off limb would guess.
    PerturbedGtVisible,
    Coarse,
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitStrategy::PerturbedGt => "perturbed_gt",
            InitStrategy::PerturbedGtVisible => "perturbed_gt_visible",
            InitStrategy::Coarse => "coarse",
        })
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "perturbed_gt" => Ok(InitStrategy::PerturbedGt),
            "perturbed_gt_visible" => Ok(InitStrategy::PerturbedGtVisible),
            "coarse" => Ok(InitStrategy::Coarse),
            _ => Err(Error::UnknownMode { what: "init strategy", value: s.to_string() }),
        }
    }
}

fn gauss3(rng: &mut impl Rng, sigma: f64) -> Vec3 {
    Vec3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ) * sigma
}

/// Builds the initial estimate. `noise` is the perturbation scale for
/// [`InitStrategy::PerturbedGt`]; `seed` feeds its random stream, keyed by
/// the sequence identity.
pub fn initialize_sequence(
    model: &BodyModel,
    seq: &Sequence,
    strategy: InitStrategy,
    noise: f64,
    seed: u64,
) -> Result<SequenceEstimate> {
    if seq.is_empty() {
        return Err(Error::invalid("sequence", "no frames"));
    }
    let (beta, mut frames) = match strategy {
        InitStrategy::PerturbedGt => perturbed_gt(model, seq, noise, seed)?,
        InitStrategy::PerturbedGtVisible => {
            let (beta, mut frames) = perturbed_gt(model, seq, noise, seed)?;
            for (p, f) in frames.iter_mut().zip(&seq.frames) {
                for (i, th) in p.theta_b.iter_mut().enumerate() {
                    if !model.descendants(i + 1).iter().any(|&d| f.keypoints.get(d).is_some_and(|k| k.conf > 0.0)) {
                        *th = Vec3::zeros();
                    }
                }
            }
            (beta, frames)
        }
        InitStrategy::Coarse => (vec![0.0; model.shape_dim()], coarse(model, seq)),
    };
    // Invalid frames start from the rest pose at the nearest valid depth.
    for t in 0..seq.len() {
        if seq.frames[t].valid {
            continue;
        }
        let near = (0..seq.len())
            .filter(|&u| seq.frames[u].valid)
            .min_by_key(|&u| u.abs_diff(t));
        let t_gl = near.map_or(Vec3::new(0.0, 0.0, DEFAULT_DEPTH), |u| frames[u].t_gl);
        frames[t] = FrameParams::rest(model, t_gl);
    }
    Ok(SequenceEstimate {
        identity: seq.identity,
        beta,
        frames,
        converged: vec![false; seq.len()],
        energy: EnergyBreakdown::default(),
        iterations: 0,
    })
}

fn perturbed_gt(model: &BodyModel, seq: &Sequence, noise: f64, seed: u64) -> Result<(Vec<f64>, Vec<FrameParams>)> {
    let mut rng = stream_rng(seed, seq.identity, Stream::Init);
    let mut frames = Vec::with_capacity(seq.len());
    for f in &seq.frames {
        let gt = match (&f.gt, f.valid) {
            (Some(gt), _) => gt.params.clone(),
            (None, false) => FrameParams::rest(model, Vec3::zeros()),
            (None, true) => return Err(Error::MissingGroundTruth { frame: f.t }),
        };
        // Draws are taken for every frame so validity never shifts the stream.
        let mut p = gt;
        p.r_gl += gauss3(&mut rng, noise);
        p.t_gl += gauss3(&mut rng, noise);
        for th in &mut p.theta_b {
            *th += gauss3(&mut rng, noise);
        }
        frames.push(p);
    }
    let beta = match &seq.beta_gt {
        Some(b) => b.iter().map(|v| v + noise * rng.sample::<f64, _>(StandardNormal)).collect(),
        None => vec![0.0; model.shape_dim()],
    };
    Ok((beta, frames))
}

fn coarse(model: &BodyModel, seq: &Sequence) -> Vec<FrameParams> {
    let zero_beta = vec![0.0; model.shape_dim()];
    let rest_b = forward_kinematics(model, &vec![Vec3::zeros(); model.joint_count() - 1], &zero_beta)
        .expect("rest pose matches model");
    seq.frames
        .iter()
        .map(|f| {
            if f.valid {
                coarse_frame(model, &rest_b, f)
            } else {
                FrameParams::rest(model, Vec3::new(0.0, 0.0, DEFAULT_DEPTH))
            }
        })
        .collect()
}

/// Root depth from the median ratio of 3D bone length to detected pixel length.
pub fn depth_from_bones(model: &BodyModel, rest_b: &[Vec3], obs: &FrameObservation) -> f64 {
    let mut ratios: Vec<f64> = model
        .bones()
        .filter_map(|(p, c)| {
            let (kp, kc) = (&obs.keypoints[p], &obs.keypoints[c]);
            if kp.conf == 0.0 || kc.conf == 0.0 {
                return None;
            }
            let px = (kp.uv() - kc.uv()).norm();
            let len = (rest_b[c] - rest_b[p]).norm();
            (px > 1e-6).then(|| obs.camera.focal * len / px)
        })
        .collect();
    if ratios.is_empty() {
        return DEFAULT_DEPTH;
    }
    ratios.sort_by(f64::total_cmp);
    let m = ratios.len();
    if m % 2 == 1 {
        ratios[m / 2]
    } else {
        0.5 * (ratios[m / 2 - 1] + ratios[m / 2])
    }
}

/// Rest pose at the bone-ratio depth, translated so the visible joints'
/// centroid lands on the detected centroid, with yaw from a grid search.
fn coarse_frame(model: &BodyModel, rest_b: &[Vec3], obs: &FrameObservation) -> FrameParams {
    let depth = depth_from_bones(model, rest_b, obs);
    let visible: Vec<usize> = (0..obs.keypoints.len()).filter(|&k| obs.keypoints[k].conf > 0.0).collect();
    let cam = &obs.camera;
    let target = if visible.is_empty() {
        cam.principal
    } else {
        visible.iter().map(|&k| obs.keypoints[k].uv()).sum::<crate::Vec2>() / visible.len() as f64
    };
    let ray = Vec3::new((target.x - cam.principal.x) / cam.focal, (target.y - cam.principal.y) / cam.focal, 1.0);
    let zero_beta = vec![0.0; model.shape_dim()];
    let weights = Weights::default();
    let mut best: Option<(f64, FrameParams)> = None;
    for i in 0..YAW_GRID {
        let yaw = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / YAW_GRID as f64;
        let r_gl = Vec3::new(0.0, yaw, 0.0);
        let r = rodrigues(&r_gl);
        let centroid = if visible.is_empty() {
            Vec3::zeros()
        } else {
            visible.iter().map(|&k| r * rest_b[k]).sum::<Vec3>() / visible.len() as f64
        };
        let t_gl = ray * (depth + centroid.z) - centroid;
        let params = FrameParams { r_gl, t_gl, theta_b: vec![Vec3::zeros(); model.joint_count() - 1] };
        let e = e_proj(model, &params, &zero_beta, obs, weights.gm_sigma)
            .map(|g| g.value)
            .unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(b, _)| e < *b) {
            best = Some((e, params));
        }
    }
    best.expect("grid is non-empty").1
}
