//! Fitting energy: robust reprojection, quadratic priors and temporal
//! smoothness, with analytic gradients.
//!
//! Sequence parameters are packed as `[beta | frame 0 | frame 1 | ...]`,
//! each frame laid out as `[r_gl, t_gl, theta_b...]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::body_model::{
    body_jacobian, forward_kinematics, rodrigues, rodrigues_derivatives, BodyModel, FrameParams,
};
use crate::camera::Z_MIN;
use crate::error::{Error, Result};
use crate::scene_sim::{FrameObservation, Sequence};
use crate::{Mat3, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Weights {
    pub w_proj: f64,
    pub w_prior_pose: f64,
    pub w_prior_shape: f64,
    pub w_sm_joint: f64,
    pub w_sm_param: f64,
    /// Geman-McClure scale, pixels.
    pub gm_sigma: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights {
            w_proj: 1.0,
            w_prior_pose: 0.1,
            w_prior_shape: 1.0,
            w_sm_joint: 5.0,
            w_sm_param: 1.0,
            gm_sigma: 50.0,
        }
    }
}

impl Weights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("w_proj", self.w_proj),
            ("w_prior_pose", self.w_prior_pose),
            ("w_prior_shape", self.w_prior_shape),
            ("w_sm_joint", self.w_sm_joint),
            ("w_sm_param", self.w_sm_param),
        ];
        for (name, w) in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid("weights", format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.gm_sigma > 0.0 && self.gm_sigma.is_finite()) {
            return Err(Error::invalid("weights", "gm_sigma must be positive"));
        }
        Ok(())
    }
}

/// Which frame pairs are coupled by smoothness, and in which frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothing {
    /// Frames are independent.
    None,
    /// Consecutive valid frames of the same shot, joints compared in camera
    /// coordinates.
    WithinShot,
    /// All consecutive valid frames, joints compared in the canonical body
    /// frame.
    Canonical,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// Unweighted robust reprojection error.
    pub e_proj: f64,
    /// Prior energy, its own weights included.
    pub e_prior: f64,
    /// Unweighted joint smoothness, gap weights included.
    pub e_sm_joint: f64,
    /// Unweighted parameter smoothness, gap weights included.
    pub e_sm_param: f64,
    pub total: f64,
    /// Per-frame terms; a pair term is booked on its earlier frame.
    pub per_frame_proj: Vec<f64>,
    pub per_frame_prior: Vec<f64>,
    pub per_frame_sm_joint: Vec<f64>,
    pub per_frame_sm_param: Vec<f64>,
    /// Weighted per-frame sum of the above.
    pub per_frame_total: Vec<f64>,
}

/// Value and gradient of a single-frame term; `frame` follows the
/// `[r_gl, t_gl, theta_b]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGrad {
    pub value: f64,
    pub frame: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Value and gradient of a term coupling two frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub value: f64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Parameter packing for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub frames: usize,
    pub frame_dim: usize,
    pub shape_dim: usize,
}

impl Layout {
    pub fn new(model: &BodyModel, frames: usize) -> Self {
        Layout {
            frames,
            frame_dim: model.frame_dim(),
            shape_dim: model.shape_dim(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape_dim + self.frames * self.frame_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_range(&self, t: usize) -> std::ops::Range<usize> {
        let a = self.shape_dim + t * self.frame_dim;
        a..a + self.frame_dim
    }

    pub fn pack(&self, beta: &[f64], frames: &[FrameParams]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        x.extend_from_slice(beta);
        for f in frames {
            f.write_to(&mut x);
        }
        x
    }

    pub fn unpack(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<FrameParams>)> {
        self.check(x)?;
        let beta = x[..self.shape_dim].to_vec();
        let frames = (0..self.frames)
            .map(|t| FrameParams::from_slice(&x[self.frame_range(t)]))
            .collect::<Result<_>>()?;
        Ok((beta, frames))
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.len() {
            return Err(Error::Dimension {
                what: "sequence parameter vector",
                expected: self.len(),
                actual: x.len(),
            });
        }
        Ok(())
    }
}

/// Geman-McClure penalty of a squared residual and its derivative with
/// respect to that squared residual.
pub fn geman_mcclure(r2: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    let d = s2 + r2;
    (s2 * r2 / d, s2 * s2 / (d * d))
}

/// Per-frame kinematic state shared by all terms touching that frame.
struct Kin {
    xb: Vec<Vec3>,
    jb: Option<DMatrix<f64>>,
    r: Mat3,
    dr: [Mat3; 3],
    x: Vec<Vec3>,
}

impl Kin {
    fn new(model: &BodyModel, frame: &FrameParams, beta: &[f64], grad: bool) -> Result<Self> {
        let (xb, jb) = if grad {
            let (xb, jb) = body_jacobian(model, &frame.theta_b, beta)?;
            (xb, Some(jb))
        } else {
            (forward_kinematics(model, &frame.theta_b, beta)?, None)
        };
        let r = rodrigues(&frame.r_gl);
        let dr = if grad {
            rodrigues_derivatives(&frame.r_gl)
        } else {
            [Mat3::zeros(); 3]
        };
        let x = xb.iter().map(|p| r * p + frame.t_gl).collect();
        Ok(Kin { xb, jb, r, dr, x })
    }
}

/// Gradient accumulator for one frame, in terms of joint positions.
struct Acc {
    r: Vec3,
    t: Vec3,
    /// dE/dX_b, body frame.
    xb: Vec<Vec3>,
    /// Direct gradient on theta_b (priors, parameter smoothness).
    theta: Vec<f64>,
}

impl Acc {
    fn new(joints: usize) -> Self {
        Acc {
            r: Vec3::zeros(),
            t: Vec3::zeros(),
            xb: vec![Vec3::zeros(); joints],
            theta: vec![0.0; 3 * (joints - 1)],
        }
    }

    /// Adds `g = dE/dX_k` for a camera-frame joint.
    fn camera(&mut self, kin: &Kin, k: usize, g: &Vec3) {
        self.t += g;
        for i in 0..3 {
            self.r[i] += g.dot(&(kin.dr[i] * kin.xb[k]));
        }
        self.xb[k] += kin.r.transpose() * g;
    }

    /// Writes the frame gradient into `frame` and adds the shape part to `beta`.
    fn finish(self, kin: &Kin, frame: &mut [f64], beta: &mut [f64]) {
        let jb = kin.jb.as_ref().expect("gradient requested");
        let nt = self.theta.len();
        frame[0..3].copy_from_slice(self.r.as_slice());
        frame[3..6].copy_from_slice(self.t.as_slice());
        frame[6..].copy_from_slice(&self.theta);
        for (k, g) in self.xb.iter().enumerate() {
            if *g == Vec3::zeros() {
                continue;
            }
            let rows = jb.fixed_rows::<3>(3 * k);
            for c in 0..jb.ncols() {
                let v = rows[(0, c)] * g.x + rows[(1, c)] * g.y + rows[(2, c)] * g.z;
                if c < nt {
                    frame[6 + c] += v;
                } else {
                    beta[c - nt] += v;
                }
            }
        }
    }
}

fn proj_term(kin: &Kin, obs: &FrameObservation, sigma: f64, acc: Option<&mut Acc>) -> f64 {
    let cam = &obs.camera;
    let mut value = 0.0;
    let mut grads = Vec::new();
    for (k, kp) in obs.keypoints.iter().enumerate() {
        if kp.conf == 0.0 {
            continue;
        }
        let x = kin.x[k];
        if x.z <= Z_MIN {
            // Behind the camera the penalty saturates at its supremum.
            value += kp.conf * sigma * sigma;
            continue;
        }
        let res = cam.project_point(&x) - kp.uv();
        let (rho, drho) = geman_mcclure(res.norm_squared(), sigma);
        value += kp.conf * rho;
        if acc.is_some() {
            let g_uv = res * (2.0 * kp.conf * drho);
            grads.push((k, cam.projection_jacobian(&x).transpose() * g_uv));
        }
    }
    if let Some(acc) = acc {
        for (k, g) in grads {
            acc.camera(kin, k, &g);
        }
    }
    value
}

fn prior_term(frame: &FrameParams, beta: &[f64], w: &Weights, acc: Option<(&mut Acc, &mut [f64])>) -> f64 {
    let pose: f64 = frame.theta_b.iter().map(|v| v.norm_squared()).sum();
    let shape: f64 = beta.iter().map(|b| b * b).sum();
    if let Some((acc, gbeta)) = acc {
        for (j, v) in frame.theta_b.iter().enumerate() {
            for i in 0..3 {
                acc.theta[3 * j + i] += 2.0 * w.w_prior_pose * v[i];
            }
        }
        for (g, b) in gbeta.iter_mut().zip(beta) {
            *g += 2.0 * w.w_prior_shape * b;
        }
    }
    w.w_prior_pose * pose + w.w_prior_shape * shape
}

/// Squared distance between two joint sets, scaled by `scale`. With
/// `camera` the camera-frame joints are compared, otherwise the body-frame
/// ones (equal to the canonical joints since the root sits at the origin).
fn joint_pair(a: &Kin, b: &Kin, camera: bool, scale: f64, acc: Option<(&mut Acc, &mut Acc)>) -> f64 {
    let (pa, pb) = if camera { (&a.x, &b.x) } else { (&a.xb, &b.xb) };
    let mut value = 0.0;
    let mut diffs = Vec::with_capacity(pa.len());
    for (p, q) in pa.iter().zip(pb) {
        let d = p - q;
        value += d.norm_squared();
        diffs.push(d);
    }
    if let Some((ga, gb)) = acc {
        for (k, d) in diffs.iter().enumerate() {
            let g = d * (2.0 * scale);
            if camera {
                ga.camera(a, k, &g);
                gb.camera(b, k, &(-g));
            } else {
                ga.xb[k] += g;
                gb.xb[k] -= g;
            }
        }
    }
    scale * value
}

fn param_pair(a: &FrameParams, b: &FrameParams, scale: f64, acc: Option<(&mut Acc, &mut Acc)>) -> f64 {
    let mut value = 0.0;
    let mut acc = acc;
    for (j, (p, q)) in a.theta_b.iter().zip(&b.theta_b).enumerate() {
        let d = p - q;
        value += d.norm_squared();
        if let Some((ga, gb)) = acc.as_mut() {
            for i in 0..3 {
                ga.theta[3 * j + i] += 2.0 * scale * d[i];
                gb.theta[3 * j + i] -= 2.0 * scale * d[i];
            }
        }
    }
    scale * value
}

fn check_frame(model: &BodyModel, frame: &FrameParams, beta: &[f64]) -> Result<()> {
    if frame.theta_b.len() + 1 != model.joint_count() {
        return Err(Error::Dimension {
            what: "theta_b",
            expected: model.joint_count() - 1,
            actual: frame.theta_b.len(),
        });
    }
    if beta.len() != model.shape_dim() {
        return Err(Error::Dimension {
            what: "beta",
            expected: model.shape_dim(),
            actual: beta.len(),
        });
    }
    Ok(())
}

fn check_obs(model: &BodyModel, obs: &FrameObservation) -> Result<()> {
    if obs.keypoints.len() != model.joint_count() {
        return Err(Error::Dimension {
            what: "keypoints",
            expected: model.joint_count(),
            actual: obs.keypoints.len(),
        });
    }
    Ok(())
}

/// Confidence-weighted Geman-McClure reprojection error of one frame.
pub fn e_proj(
    model: &BodyModel,
    frame: &FrameParams,
    beta: &[f64],
    obs: &FrameObservation,
    sigma: f64,
) -> Result<TermGrad> {
    check_frame(model, frame, beta)?;
    check_obs(model, obs)?;
    let kin = Kin::new(model, frame, beta, true)?;
    let mut acc = Acc::new(model.joint_count());
    let value = proj_term(&kin, obs, sigma, Some(&mut acc));
    let mut g = vec![0.0; model.frame_dim()];
    let mut gb = vec![0.0; model.shape_dim()];
    acc.finish(&kin, &mut g, &mut gb);
    Ok(TermGrad { value, frame: g, beta: gb })
}

/// Quadratic pose and shape prior about the rest pose.
pub fn e_prior(model: &BodyModel, frame: &FrameParams, beta: &[f64], w: &Weights) -> Result<TermGrad> {
    check_frame(model, frame, beta)?;
    let mut acc = Acc::new(model.joint_count());
    let mut gb = vec![0.0; beta.len()];
    let value = prior_term(frame, beta, w, Some((&mut acc, &mut gb)));
    let mut g = vec![0.0; model.frame_dim()];
    g[6..].copy_from_slice(&acc.theta);
    Ok(TermGrad { value, frame: g, beta: gb })
}

fn pair_term(
    model: &BodyModel,
    a: &FrameParams,
    b: &FrameParams,
    beta: &[f64],
    camera: bool,
) -> Result<PairGrad> {
    check_frame(model, a, beta)?;
    check_frame(model, b, beta)?;
    let ka = Kin::new(model, a, beta, true)?;
    let kb = Kin::new(model, b, beta, true)?;
    let mut ga = Acc::new(model.joint_count());
    let mut gb = Acc::new(model.joint_count());
    let value = joint_pair(&ka, &kb, camera, 1.0, Some((&mut ga, &mut gb)));
    let mut first = vec![0.0; model.frame_dim()];
    let mut second = vec![0.0; model.frame_dim()];
    let mut beta_g = vec![0.0; model.shape_dim()];
    ga.finish(&ka, &mut first, &mut beta_g);
    gb.finish(&kb, &mut second, &mut beta_g);
    Ok(PairGrad {
        value,
        first,
        second,
        beta: beta_g,
    })
}

/// Squared distance between the canonical joints of two frames.
pub fn e_sm_joint(model: &BodyModel, a: &FrameParams, b: &FrameParams, beta: &[f64]) -> Result<PairGrad> {
    pair_term(model, a, b, beta, false)
}

/// Squared distance between the camera-frame joints of two frames.
pub fn e_sm_joint_camera(
    model: &BodyModel,
    a: &FrameParams,
    b: &FrameParams,
    beta: &[f64],
) -> Result<PairGrad> {
    pair_term(model, a, b, beta, true)
}

/// Squared distance between stacked body poses; global orientation excluded.
pub fn e_sm_param(model: &BodyModel, a: &FrameParams, b: &FrameParams) -> Result<PairGrad> {
    let zeros = vec![0.0; model.shape_dim()];
    check_frame(model, a, &zeros)?;
    check_frame(model, b, &zeros)?;
    let mut ga = Acc::new(model.joint_count());
    let mut gb = Acc::new(model.joint_count());
    let value = param_pair(a, b, 1.0, Some((&mut ga, &mut gb)));
    let mut first = vec![0.0; model.frame_dim()];
    let mut second = vec![0.0; model.frame_dim()];
    first[6..].copy_from_slice(&ga.theta);
    second[6..].copy_from_slice(&gb.theta);
    Ok(PairGrad {
        value,
        first,
        second,
        beta: zeros,
    })
}

/// Smoothness pairs `(a, b, 1/gap)` between consecutive valid frames.
pub fn smoothness_pairs(seq: &Sequence, smoothing: Smoothing) -> Vec<(usize, usize, f64)> {
    if smoothing == Smoothing::None {
        return Vec::new();
    }
    let valid: Vec<usize> = (0..seq.len()).filter(|&t| seq.frames[t].valid).collect();
    valid
        .windows(2)
        .filter(|w| smoothing == Smoothing::Canonical || seq.frames[w[0]].shot_id == seq.frames[w[1]].shot_id)
        .map(|w| (w[0], w[1], 1.0 / (w[1] - w[0]) as f64))
        .collect()
}

/// Full sequence energy. Returns the breakdown and, when `grad` is set, the
/// gradient in [`Layout`] order.
pub fn total_energy(
    model: &BodyModel,
    seq: &Sequence,
    x: &[f64],
    weights: &Weights,
    smoothing: Smoothing,
    grad: bool,
) -> Result<(EnergyBreakdown, Option<Vec<f64>>)> {
    let layout = Layout::new(model, seq.len());
    let (beta, frames) = layout.unpack(x)?;
    let n = seq.len();
    let nj = model.joint_count();
    let mut kins = Vec::with_capacity(n);
    for (f, obs) in frames.iter().zip(&seq.frames) {
        check_obs(model, obs)?;
        // Invalid frames only carry the prior, which needs no kinematics.
        kins.push(if obs.valid {
            Some(Kin::new(model, f, &beta, grad)?)
        } else {
            None
        });
    }
    let mut accs: Vec<Acc> = if grad { (0..n).map(|_| Acc::new(nj)).collect() } else { Vec::new() };
    let mut gbeta = vec![0.0; beta.len()];
    let mut out = EnergyBreakdown {
        per_frame_proj: vec![0.0; n],
        per_frame_prior: vec![0.0; n],
        per_frame_sm_joint: vec![0.0; n],
        per_frame_sm_param: vec![0.0; n],
        ..Default::default()
    };

    // β is shared by every frame, so its prior is split evenly and counts
    // once per sequence.
    let prior_weights = Weights { w_prior_shape: weights.w_prior_shape / n.max(1) as f64, ..weights.clone() };
    for t in 0..n {
        let prior = prior_term(&frames[t], &beta, &prior_weights, accs.get_mut(t).map(|a| (a, gbeta.as_mut_slice())));
        out.per_frame_prior[t] = prior;
        if let Some(kin) = &kins[t] {
            let mut local = grad.then(|| Acc::new(nj));
            let p = proj_term(kin, &seq.frames[t], weights.gm_sigma, local.as_mut());
            out.per_frame_proj[t] = p;
            if let Some(local) = local {
                merge(&mut accs[t], local, weights.w_proj);
            }
        }
    }

    let camera = smoothing == Smoothing::WithinShot;
    for (a, b, scale) in smoothness_pairs(seq, smoothing) {
        let (ka, kb) = (kins[a].as_ref().unwrap(), kins[b].as_ref().unwrap());
        if !grad {
            out.per_frame_sm_joint[a] += joint_pair(ka, kb, camera, scale, None);
            out.per_frame_sm_param[a] += param_pair(&frames[a], &frames[b], scale, None);
            continue;
        }
        let (mut ja, mut jb) = (Acc::new(nj), Acc::new(nj));
        let (mut pa, mut pb) = (Acc::new(nj), Acc::new(nj));
        out.per_frame_sm_joint[a] += joint_pair(ka, kb, camera, scale, Some((&mut ja, &mut jb)));
        out.per_frame_sm_param[a] += param_pair(&frames[a], &frames[b], scale, Some((&mut pa, &mut pb)));
        let (lo, hi) = accs.split_at_mut(b);
        merge(&mut lo[a], ja, weights.w_sm_joint);
        merge(&mut lo[a], pa, weights.w_sm_param);
        merge(&mut hi[0], jb, weights.w_sm_joint);
        merge(&mut hi[0], pb, weights.w_sm_param);
    }

    out.e_proj = out.per_frame_proj.iter().sum();
    out.e_prior = out.per_frame_prior.iter().sum();
    out.e_sm_joint = out.per_frame_sm_joint.iter().sum();
    out.e_sm_param = out.per_frame_sm_param.iter().sum();
    out.total = weights.w_proj * out.e_proj
        + out.e_prior
        + weights.w_sm_joint * out.e_sm_joint
        + weights.w_sm_param * out.e_sm_param;
    out.per_frame_total = (0..n)
        .map(|t| {
            weights.w_proj * out.per_frame_proj[t]
                + out.per_frame_prior[t]
                + weights.w_sm_joint * out.per_frame_sm_joint[t]
                + weights.w_sm_param * out.per_frame_sm_param[t]
        })
        .collect();
    if !out.total.is_finite() {
        let frame = out.per_frame_total.iter().position(|e| !e.is_finite()).unwrap_or(0);
        return Err(Error::NonFiniteEnergy { frame });
    }

    if !grad {
        return Ok((out, None));
    }
    let mut g = vec![0.0; layout.len()];
    for (t, acc) in accs.into_iter().enumerate() {
        let range = layout.frame_range(t);
        match &kins[t] {
            Some(kin) => acc.finish(kin, &mut g[range], &mut gbeta),
            None => g[range][6..].copy_from_slice(&acc.theta),
        }
    }
    g[..beta.len()].copy_from_slice(&gbeta);
    Ok((out, Some(g)))
}


fn merge(into: &mut Acc, from: Acc, w: f64) {
    into.r += from.r * w;
    into.t += from.t * w;
    for (a, b) in into.xb.iter_mut().zip(&from.xb) {
        *a += b * w;
    }
    for (a, b) in into.theta.iter_mut().zip(&from.theta) {
        *a += b * w;
    }
}
