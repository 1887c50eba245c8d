//! Training losses on per-frame parameter predictions, with gradients.
//!
//! A prediction row is `(r_gl, t_gl, theta_b, beta)`. Every term is masked
//! to valid frames; smoothness links nearest valid neighbours with weight
//! `1 / gap`, as in the fitting energy.

use serde::{Deserialize, Serialize};

use super::layers::Mat;
use crate::body_model::{body_jacobian, fk_jacobian, BodyModel, FrameParams};
use crate::camera::{Camera, Z_MIN};
use crate::error::{Error, Result};
use crate::scene_sim::FrameObservation;
use crate::{Vec2, Vec3};
use nalgebra::{DVector, Matrix2x3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_2d: f64,
    pub lambda_smpl: f64,
    pub lambda_sm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_2d: 1.0, lambda_smpl: 1.0, lambda_sm: 0.1 }
    }
}

/// Unweighted loss values; `total` applies the weights, with `lambda_sm` on
/// the sum of both smoothness terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    /// Confidence-weighted L1 pixel error, summed over joints, mean over valid frames.
    pub l2d: f64,
    /// Squared error on `(r_gl, theta_b, beta)`, mean over valid frames.
    pub lsmpl: f64,
    /// Body-frame joint smoothness, mean over valid pairs.
    pub lsm_joint: f64,
    /// Body-pose parameter smoothness, mean over valid pairs.
    pub lsm_param: f64,
    pub total: f64,
}

impl Losses {
    pub fn lsm(&self) -> f64 {
        self.lsm_joint + self.lsm_param
    }
}

/// Splits a prediction row into frame parameters and shape.
pub fn split_row(model: &BodyModel, row: &[f64]) -> Result<(FrameParams, Vec<f64>)> {
    let fd = model.frame_dim();
    if row.len() != fd + model.shape_dim() {
        return Err(Error::Dimension { what: "prediction row", expected: fd + model.shape_dim(), actual: row.len() });
    }
    Ok((FrameParams::from_slice(&row[..fd])?, row[fd..].to_vec()))
}

/// Projection with depth clamped at [`Z_MIN`]; the clamp has zero depth
/// derivative.
fn project_clamped(cam: &Camera, x: &Vec3) -> (Vec2, Matrix2x3<f64>) {
    if x.z > Z_MIN {
        return (cam.project_point(x), cam.projection_jacobian(x));
    }
    let s = cam.focal / Z_MIN;
    (
        Vec2::new(s * x.x + cam.principal.x, s * x.y + cam.principal.y),
        Matrix2x3::new(s, 0.0, 0.0, 0.0, s, 0.0),
    )
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss values and their gradient with respect to `pred` (`n x P`).
///
/// `pseudo` and `pseudo_beta` are the pseudo ground truth for the same
/// frames; entries at invalid frames are ignored.
pub fn compute_losses(
    model: &BodyModel,
    pred: &Mat,
    frames: &[FrameObservation],
    pseudo: &[FrameParams],
    pseudo_beta: &[f64],
    w: &LossWeights,
) -> Result<(Losses, Mat)> {
    let n = frames.len();
    let fd = model.frame_dim();
    let p = fd + model.shape_dim();
    if pred.nrows() != n || pseudo.len() != n {
        return Err(Error::Dimension { what: "loss window", expected: n, actual: pred.nrows().min(pseudo.len()) });
    }
    if pred.ncols() != p {
        return Err(Error::Dimension { what: "prediction width", expected: p, actual: pred.ncols() });
    }
    if pseudo_beta.len() != model.shape_dim() {
        return Err(Error::Dimension { what: "pseudo ground-truth shape", expected: model.shape_dim(), actual: pseudo_beta.len() });
    }
    let valid: Vec<usize> = (0..n).filter(|&t| frames[t].valid).collect();
    if valid.is_empty() {
        return Err(Error::NoValidFrames);
    }
    let nv = valid.len() as f64;
    let rows: Vec<Vec<f64>> = (0..n).map(|t| pred.row(t).iter().copied().collect()).collect();
    let mut grad = Mat::zeros(n, p);
    let mut out = Losses::default();

    let mut body: Vec<Option<(Vec<Vec3>, nalgebra::DMatrix<f64>)>> = vec![None; n];
    for &t in &valid {
        let (params, beta) = split_row(model, &rows[t])?;
        let obs = &frames[t];
        if obs.keypoints.len() != model.joint_count() {
            return Err(Error::Dimension { what: "keypoints", expected: model.joint_count(), actual: obs.keypoints.len() });
        }
        // Reprojection.
        let (x, jac) = fk_jacobian(model, &params, &beta)?;
        let mut gx = DVector::zeros(3 * x.len());
        for (j, kp) in obs.keypoints.iter().enumerate() {
            if kp.conf == 0.0 {
                continue;
            }
            let (uv, jp) = project_clamped(&obs.camera, &x[j]);
            let r = uv - kp.uv();
            out.l2d += kp.conf * (r.x.abs() + r.y.abs()) / nv;
            let s = nalgebra::Vector2::new(sign(r.x), sign(r.y)) * (kp.conf / nv);
            gx.fixed_rows_mut::<3>(3 * j).copy_from(&(jp.transpose() * s));
        }
        let g2d = jac.tr_mul(&gx) * w.lambda_2d;
        // Parameter supervision on orientation, body pose and shape.
        let target = &pseudo[t];
        let mut gs = vec![0.0; p];
        for i in 0..3 {
            let d = rows[t][i] - target.r_gl[i];
            out.lsmpl += d * d / nv;
            gs[i] = 2.0 * d / nv;
        }
        for (j, th) in target.theta_b.iter().enumerate() {
            for i in 0..3 {
                let k = 6 + 3 * j + i;
                let d = rows[t][k] - th[i];
                out.lsmpl += d * d / nv;
                gs[k] = 2.0 * d / nv;
            }
        }
        for (b, tb) in pseudo_beta.iter().enumerate() {
            let d = rows[t][fd + b] - tb;
            out.lsmpl += d * d / nv;
            gs[fd + b] = 2.0 * d / nv;
        }
        for k in 0..p {
            grad[(t, k)] += g2d[k] + w.lambda_smpl * gs[k];
        }
        body[t] = Some(body_jacobian(model, &params.theta_b, &beta)?);
    }

    let pairs: Vec<(usize, usize, f64)> = valid.windows(2).map(|v| (v[0], v[1], 1.0 / (v[1] - v[0]) as f64)).collect();
    if !pairs.is_empty() {
        let np = pairs.len() as f64;
        for &(a, b, s) in &pairs {
            let (xa, ja) = body[a].as_ref().unwrap();
            let (xb, jb) = body[b].as_ref().unwrap();
            let mut diff = DVector::zeros(3 * xa.len());
            for k in 0..xa.len() {
                let d = xa[k] - xb[k];
                out.lsm_joint += s * d.norm_squared() / np;
                diff.fixed_rows_mut::<3>(3 * k).copy_from(&d);
            }
            let gj = ja.tr_mul(&diff) * (2.0 * s / np * w.lambda_sm);
            let gk = jb.tr_mul(&diff) * (-2.0 * s / np * w.lambda_sm);
            for c in 0..gj.len() {
                grad[(a, 6 + c)] += gj[c];
                grad[(b, 6 + c)] += gk[c];
            }
            for k in 6..fd {
                let d = rows[a][k] - rows[b][k];
                out.lsm_param += s * d * d / np;
                let g = 2.0 * s * d / np * w.lambda_sm;
                grad[(a, k)] += g;
                grad[(b, k)] -= g;
            }
        }
    }
    out.total = w.lambda_2d * out.l2d + w.lambda_smpl * out.lsmpl + w.lambda_sm * out.lsm();
    Ok((out, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_sim::{generate_sequence, MotionConfig, ShotConfig, SimConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn truth_rows(model: &BodyModel, frames: &[FrameObservation], beta: &[f64]) -> Mat {
        let p = model.frame_dim() + model.shape_dim();
        let mut m = Mat::zeros(frames.len(), p);
        for (t, f) in frames.iter().enumerate() {
            let mut v = f.gt.as_ref().unwrap().params.to_vec();
            v.extend_from_slice(beta);
            for (k, x) in v.iter().enumerate() {
                m[(t, k)] = *x;
            }
        }
        m
    }

    fn noiseless(frames: usize, seed: usize) -> crate::scene_sim::Sequence {
        let sim = SimConfig {
            noise_sigma_px: 0.0,
            motion: MotionConfig { frame_count: frames, ..MotionConfig::default() },
            shots: ShotConfig { missing_prob: 0.3, ..ShotConfig::default() },
            ..SimConfig::default()
        };
        generate_sequence(&BodyModel::standard(), &sim, seed).unwrap()
    }

    #[test]
    fn exact_predictions_give_zero_loss() {
        let model = BodyModel::standard();
        let mut seq = noiseless(12, 1);
        // Smoothness is only zero for a static pose.
        let first = seq.frames.iter().find(|f| f.valid).unwrap().gt.clone().unwrap();
        for f in &mut seq.frames {
            let gt = f.gt.as_mut().unwrap();
            gt.params.theta_b = first.params.theta_b.clone();
            gt.joints = crate::body_model::frame_joints(&model, &gt.params, seq.beta_gt.as_ref().unwrap()).unwrap();
            if f.valid {
                for (kp, x) in f.keypoints.iter_mut().zip(&gt.joints) {
                    let uv = f.camera.project_point(x);
                    kp.u = uv.x;
                    kp.v = uv.y;
                }
            }
        }
        let beta = seq.beta_gt.clone().unwrap();
        let pred = truth_rows(&model, &seq.frames, &beta);
        let pseudo: Vec<FrameParams> = seq.frames.iter().map(|f| f.gt.as_ref().unwrap().params.clone()).collect();
        let (l, _) = compute_losses(&model, &pred, &seq.frames, &pseudo, &beta, &LossWeights::default()).unwrap();
        assert!(l.l2d < 1e-9, "{l:?}");
        assert_eq!(l.lsmpl, 0.0);
        assert!(l.lsm_joint < 1e-24 && l.lsm_param == 0.0, "{l:?}");
    }

    #[test]
    fn single_joint_l1_arithmetic() {
        let model = BodyModel::standard();
        let seq = noiseless(2, 0);
        let beta = seq.beta_gt.clone().unwrap();
        let mut frame = seq.frames[0].clone();
        frame.valid = true;
        let x = &frame.gt.as_ref().unwrap().joints;
        for (j, kp) in frame.keypoints.iter_mut().enumerate() {
            let uv = frame.camera.project_point(&x[j]);
            kp.conf = if j == 5 { 1.0 } else { 0.0 };
            kp.u = uv.x + if j == 5 { 3.0 } else { 0.0 };
            kp.v = uv.y - if j == 5 { 4.0 } else { 0.0 };
        }
        let pred = truth_rows(&model, std::slice::from_ref(&frame), &beta);
        let pseudo = vec![frame.gt.as_ref().unwrap().params.clone()];
        let (l, _) = compute_losses(&model, &pred, &[frame], &pseudo, &beta, &LossWeights::default()).unwrap();
        assert!((l.l2d - 7.0).abs() < 1e-9, "{}", l.l2d);
    }

    #[test]
    fn no_valid_frames_is_an_error() {
        let model = BodyModel::standard();
        let mut seq = noiseless(3, 0);
        for f in &mut seq.frames {
            f.valid = false;
        }
        let beta = seq.beta_gt.clone().unwrap();
        let pred = truth_rows(&model, &seq.frames, &beta);
        let pseudo: Vec<FrameParams> = seq.frames.iter().map(|f| f.gt.as_ref().unwrap().params.clone()).collect();
        let err = compute_losses(&model, &pred, &seq.frames, &pseudo, &beta, &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::NoValidFrames));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = BodyModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let seq = noiseless(3, seed);
            if seq.valid_count() == 0 {
                continue;
            }
            let beta = seq.beta_gt.clone().unwrap();
            let mut pred = truth_rows(&model, &seq.frames, &beta);
            pred.apply(|v| *v += rng.random_range(-0.1..0.1));
            let pseudo: Vec<FrameParams> = seq.frames.iter().map(|f| f.gt.as_ref().unwrap().params.clone()).collect();
            let w = LossWeights { lambda_2d: 1.0, lambda_smpl: 2.0, lambda_sm: 3.0 };
            let f = |m: &Mat| compute_losses(&model, m, &seq.frames, &pseudo, &beta, &w).unwrap().0.total;
            let (_, g) = compute_losses(&model, &pred, &seq.frames, &pseudo, &beta, &w).unwrap();
            let h = 1e-6;
            let mut worst = 0.0f64;
            let mut scale = 0.0f64;
            for i in 0..pred.len() {
                let (mut a, mut b) = (pred.clone(), pred.clone());
                a[i] += h;
                b[i] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                worst = worst.max((fd - g[i]).abs());
                scale = scale.max(fd.abs());
            }
            assert!(worst / scale.max(1e-8) < 1e-4, "seed {seed}: {worst} / {scale}");
        }
    }
}
