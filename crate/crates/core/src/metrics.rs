//! Keypoint accuracy: PCK, cross-shot PCK, MPJPE and PA-MPJPE.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

use crate::body_model::{forward_kinematics, pose_joints, BodyModel};
use crate::camera::Z_MIN;
use crate::error::{Error, Result};
use crate::scene_sim::{FrameObservation, Sequence};
use crate::solver::SequenceEstimate;
use crate::{Vec2, Vec3};

pub const DEFAULT_ALPHAS: [f64; 3] = [0.05, 0.1, 0.2];

/// Side of the square that bounds the points: `max(width, height)`.
pub fn bbox_size(points: &[Vec2]) -> f64 {
    let (mut lo, mut hi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).max()
}

/// Per-joint hit flags at one threshold; `None` joints are not evaluated.
fn hits(pred: &[Option<Vec2>], gt: &[Vec2], mask: &[bool], alpha: f64) -> Vec<Option<bool>> {
    let thr = alpha * bbox_size(gt);
    pred.iter()
        .zip(gt)
        .zip(mask)
        .map(|((p, g), &m)| m.then(|| p.is_some_and(|p| (p - g).norm() <= thr)))
        .collect()
}

/// Percentage of masked joints within `alpha` times the ground-truth box size.
pub fn pck(pred: &[Vec2], gt: &[Vec2], mask: Option<&[bool]>, alpha: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension { what: "predicted joints", expected: gt.len(), actual: pred.len() });
    }
    let all = vec![true; gt.len()];
    let mask = mask.unwrap_or(&all);
    let pred: Vec<Option<Vec2>> = pred.iter().map(|p| Some(*p)).collect();
    let h: Vec<bool> = hits(&pred, gt, mask, alpha).into_iter().flatten().collect();
    if h.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(100.0 * h.iter().filter(|&&x| x).count() as f64 / h.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    pub alphas: Vec<f64>,
    /// Percent, one per alpha.
    pub pck: Vec<f64>,
    /// Percent per alpha per joint; NaN for never-evaluated joints.
    pub per_joint: Vec<Vec<f64>>,
    /// Evaluated frame pairs (cross-shot) or frames (plain PCK).
    pub pairs: usize,
    /// Hit and evaluation counts behind `pck`, for pooling reports.
    pub hits: Vec<usize>,
    pub evaluated: usize,
}

#[derive(Debug, Clone)]
struct Tally {
    alphas: Vec<f64>,
    hits: Vec<Vec<usize>>,
    counts: Vec<usize>,
    pairs: usize,
}

impl Tally {
    fn new(alphas: &[f64], joints: usize) -> Self {
        Tally { alphas: alphas.to_vec(), hits: vec![vec![0; joints]; alphas.len()], counts: vec![0; joints], pairs: 0 }
    }

    fn add(&mut self, pred: &[Option<Vec2>], gt: &[Vec2], mask: &[bool]) {
        self.pairs += 1;
        for (k, m) in mask.iter().enumerate() {
            if *m {
                self.counts[k] += 1;
            }
        }
        for (i, &a) in self.alphas.iter().enumerate() {
            for (k, h) in hits(pred, gt, mask, a).into_iter().enumerate() {
                if h == Some(true) {
                    self.hits[i][k] += 1;
                }
            }
        }
    }

    fn report(self) -> Result<PckReport> {
        let evaluated: usize = self.counts.iter().sum();
        if evaluated == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let hits: Vec<usize> = self.hits.iter().map(|h| h.iter().sum()).collect();
        Ok(PckReport {
            pck: hits.iter().map(|&h| 100.0 * h as f64 / evaluated as f64).collect(),
            per_joint: self
                .hits
                .iter()
                .map(|h| {
                    h.iter()
                        .zip(&self.counts)
                        .map(|(&x, &c)| if c == 0 { f64::NAN } else { 100.0 * x as f64 / c as f64 })
                        .collect()
                })
                .collect(),
            alphas: self.alphas,
            pairs: self.pairs,
            hits,
            evaluated,
        })
    }
}

impl PckReport {
    /// Pools reports over the same alphas by summing their counts.
    pub fn pool(reports: &[PckReport]) -> Result<PckReport> {
        let first = reports.first().ok_or(Error::EmptyEvaluation)?;
        let mut hits = vec![0; first.alphas.len()];
        let mut evaluated = 0;
        let mut pairs = 0;
        for r in reports {
            if r.alphas != first.alphas {
                return Err(Error::invalid("pck reports", "alphas differ"));
            }
            for (h, x) in hits.iter_mut().zip(&r.hits) {
                *h += x;
            }
            evaluated += r.evaluated;
            pairs += r.pairs;
        }
        Ok(PckReport {
            alphas: first.alphas.clone(),
            pck: hits.iter().map(|&h| 100.0 * h as f64 / evaluated as f64).collect(),
            per_joint: Vec::new(),
            pairs,
            hits,
            evaluated,
        })
    }

    pub fn at(&self, alpha: f64) -> Option<f64> {
        self.alphas.iter().position(|a| (a - alpha).abs() < 1e-12).map(|i| self.pck[i])
    }

    /// `alpha,pck,pairs` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,pck,pairs\n");
        for (a, p) in self.alphas.iter().zip(&self.pck) {
            s.push_str(&format!("{a},{p},{}\n", self.pairs));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::invalid("pck report", e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Reference 2D joints of a frame and which of them to score: exact
/// projections of the ground truth when present (all joints), otherwise the
/// detections with non-zero confidence.
fn reference_2d(frame: &FrameObservation) -> (Vec<Vec2>, Vec<bool>) {
    match frame.gt_keypoints() {
        Some(gt) => {
            let n = gt.len();
            (gt, vec![true; n])
        }
        None => (
            frame.keypoints.iter().map(|k| k.uv()).collect(),
            frame.keypoints.iter().map(|k| k.conf > 0.0).collect(),
        ),
    }
}

fn project_all(frame: &FrameObservation, x: &[Vec3]) -> Vec<Option<Vec2>> {
    x.iter().map(|p| (p.z > Z_MIN).then(|| frame.camera.project_point(p))).collect()
}

fn check_estimate(est: &SequenceEstimate, seq: &Sequence) -> Result<()> {
    if est.frames.len() != seq.len() {
        return Err(Error::Dimension { what: "estimate frames", expected: seq.len(), actual: est.frames.len() });
    }
    Ok(())
}

/// Novel-view PCK across shot changes. For each boundary pair and both
/// directions, the source frame's body pose and the shared shape are placed
/// with the target frame's estimated global pose, projected with the target
/// camera and scored against the target's reference joints.
pub fn cross_shot_pck(model: &BodyModel, est: &SequenceEstimate, seq: &Sequence, alphas: &[f64]) -> Result<PckReport> {
    check_estimate(est, seq)?;
    let boundaries = seq.shot_boundaries();
    if boundaries.is_empty() {
        return Err(Error::NoShotBoundaries);
    }
    let mut tally = Tally::new(alphas, model.joint_count());
    for (a, b) in boundaries {
        for (src, dst) in [(a, b), (b, a)] {
            let xb = forward_kinematics(model, &est.frames[src].theta_b, &est.beta)?;
            let target = &est.frames[dst];
            let x = pose_joints(&xb, &target.r_gl, &target.t_gl);
            let frame = &seq.frames[dst];
            let (gt, mask) = reference_2d(frame);
            tally.add(&project_all(frame, &x), &gt, &mask);
        }
    }
    tally.report()
}

/// Plain per-frame PCK of the estimate's own projections over valid frames.
pub fn frame_pck(model: &BodyModel, est: &SequenceEstimate, seq: &Sequence, alphas: &[f64]) -> Result<PckReport> {
    check_estimate(est, seq)?;
    let mut tally = Tally::new(alphas, model.joint_count());
    for (t, frame) in seq.frames.iter().enumerate() {
        if !frame.valid {
            continue;
        }
        let x = est.joints(model, t)?;
        let (gt, mask) = reference_2d(frame);
        tally.add(&project_all(frame, &x), &gt, &mask);
    }
    tally.report()
}

fn check_pair(pred: &[Vec3], gt: &[Vec3]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension { what: "predicted joints", expected: gt.len(), actual: pred.len() });
    }
    if gt.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(())
}

fn mean_error_mm(pred: &[Vec3], gt: &[Vec3]) -> f64 {
    1000.0 * pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum::<f64>() / gt.len() as f64
}

/// Mean joint error in millimeters after aligning the roots (joint 0).
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_pair(pred, gt)?;
    let shift = gt[0] - pred[0];
    let aligned: Vec<Vec3> = pred.iter().map(|p| p + shift).collect();
    Ok(mean_error_mm(&aligned, gt))
}

/// Similarity transform `(scale, rotation, translation)` minimizing
/// `sum |s R p + t - q|^2`, reflections excluded.
pub fn similarity_alignment(pred: &[Vec3], gt: &[Vec3]) -> Result<(f64, Matrix3<f64>, Vec3)> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<Vec3>() / n;
    let mg = gt.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (pc, gc) = (p - mp, g - mg);
        cov += gc * pc.transpose();
        var += pc.norm_squared();
    }
    cov /= n;
    var /= n;
    let svd = SVD::new(cov, true, true);
    let sv = svd.singular_values;
    if !(var > 1e-18) || sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(Error::Degenerate("point sets are collinear"));
    }
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
    let s_mat = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rot = u * s_mat * vt;
    let scale = (sv[0] + sv[1] + d * sv[2]) / var;
    let trans = mg - rot * mp * scale;
    Ok((scale, rot, trans))
}

/// Mean joint error in millimeters after the optimal similarity alignment.
pub fn pa_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let (s, r, t) = similarity_alignment(pred, gt)?;
    let aligned: Vec<Vec3> = pred.iter().map(|p| r * p * s + t).collect();
    Ok(mean_error_mm(&aligned, gt))
}

/// Mean MPJPE and PA-MPJPE over valid frames with ground truth.
pub fn sequence_errors(model: &BodyModel, est: &SequenceEstimate, seq: &Sequence) -> Result<(f64, f64)> {
    check_estimate(est, seq)?;
    let (mut a, mut b, mut n) = (0.0, 0.0, 0usize);
    for (t, frame) in seq.frames.iter().enumerate() {
        let (true, Some(gt)) = (frame.valid, &frame.gt) else { continue };
        let x = est.joints(model, t)?;
        a += mpjpe(&x, &gt.joints)?;
        b += pa_mpjpe(&x, &gt.joints)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok((a / n as f64, b / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::rodrigues;
    use crate::objectives::EnergyBreakdown;
    use crate::scene_sim::{generate_sequence, MotionConfig, ShotConfig, SimConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut impl Rng, n: usize, s: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s)))
            .collect()
    }

    fn gt_estimate(seq: &Sequence) -> SequenceEstimate {
        SequenceEstimate {
            identity: seq.identity,
            beta: seq.beta_gt.clone().unwrap(),
            frames: seq.frames.iter().map(|f| f.gt.as_ref().unwrap().params.clone()).collect(),
            converged: vec![true; seq.len()],
            energy: EnergyBreakdown::default(),
            iterations: 0,
        }
    }

    #[test]
    fn perfect_prediction_scores_full_marks() {
        let gt = vec![Vec2::new(0.0, 0.0), Vec2::new(10.0, 40.0), Vec2::new(20.0, 5.0)];
        for a in DEFAULT_ALPHAS {
            assert_eq!(pck(&gt, &gt, None, a).unwrap(), 100.0);
        }
    }

    #[test]
    fn displacement_just_past_threshold_scores_zero() {
        let gt = vec![Vec2::new(0.0, 0.0), Vec2::new(100.0, 50.0), Vec2::new(30.0, 80.0)];
        let alpha = 0.1;
        let pred: Vec<Vec2> = gt.iter().map(|g| g + Vec2::new(alpha * 100.0 + 1e-9, 0.0)).collect();
        assert_eq!(pck(&pred, &gt, None, alpha).unwrap(), 0.0);
    }

    #[test]
    fn hand_counted_four_joints() {
        // Box size 100; threshold at alpha 0.1 is 10 px.
        let gt = vec![Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0), Vec2::new(0.0, 100.0), Vec2::new(100.0, 100.0)];
        let pred = vec![gt[0] + Vec2::new(3.0, 4.0), gt[1] + Vec2::new(6.0, 8.0), gt[2] + Vec2::new(9.0, 9.0), gt[3]];
        // |(3,4)| = 5 and |(6,8)| = 10 are in; |(9,9)| = 12.7 is out.
        assert_eq!(pck(&pred, &gt, None, 0.1).unwrap(), 75.0);
        let mask = [true, false, true, true];
        assert_relative_eq!(pck(&pred, &gt, Some(&mask), 0.1).unwrap(), 200.0 / 3.0);
        let pred2 = vec![gt[0] + Vec2::new(11.0, 0.0), gt[1], gt[2] + Vec2::new(0.0, -20.0), gt[3]];
        assert_eq!(pck(&pred2, &gt, None, 0.1).unwrap(), 50.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let gt = vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0)];
        assert!(matches!(pck(&gt, &gt, Some(&[false, false]), 0.1), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn ground_truth_transfers_perfectly() {
        // The swap pairs the pose of one frame with the placement of the
        // next, so exact transfer needs a nearly static body.
        let model = BodyModel::standard();
        let sim = SimConfig {
            noise_sigma_px: 0.0,
            motion: MotionConfig { max_joint_speed: 1e-3, ..MotionConfig::default() },
            ..SimConfig::default()
        };
        let seq = generate_sequence(&model, &sim, 1).unwrap();
        let r = cross_shot_pck(&model, &gt_estimate(&seq), &seq, &[0.05]).unwrap();
        assert_eq!(r.pck, vec![100.0]);
        assert_eq!(r.pairs, 2 * seq.shot_boundaries().len());
    }

    #[test]
    fn single_shot_has_no_boundaries() {
        let model = BodyModel::standard();
        let sim = SimConfig { shots: ShotConfig { mean_shot_length: 1000.0, ..ShotConfig::default() }, ..SimConfig::default() };
        let seq = generate_sequence(&model, &sim, 0).unwrap();
        let err = cross_shot_pck(&model, &gt_estimate(&seq), &seq, &[0.1]).unwrap_err();
        assert!(matches!(err, Error::NoShotBoundaries));
        assert!(err.to_string().contains("no shot boundaries"));
    }

    #[test]
    fn cross_shot_ignores_rotation_of_the_canonical_body() {
        // Express the body in a rotated canonical frame Q: offsets and shape
        // basis rotate, joint axes rotate, and R_gl absorbs Q^T. Posed joints
        // are unchanged, so the score must be too.
        let model = BodyModel::standard();
        let seq = generate_sequence(&model, &SimConfig::default(), 2).unwrap();
        let mut est = gt_estimate(&seq);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for f in &mut est.frames {
            for th in &mut f.theta_b {
                *th += cloud(&mut rng, 1, 0.2)[0];
            }
        }
        let base = cross_shot_pck(&model, &est, &seq, &DEFAULT_ALPHAS).unwrap();
        assert!(base.pck.windows(2).all(|w| w[0] <= w[1]));

        let q = rodrigues(&Vec3::new(0.4, 1.1, -0.7));
        let rotated = BodyModel::new(
            model.parents().to_vec(),
            model.rest_offsets().iter().map(|o| q * o).collect(),
            model.shape_basis().iter().map(|b| b.iter().map(|v| q * v).collect()).collect(),
            model.joint_names().to_vec(),
        )
        .unwrap();
        let mut est2 = est.clone();
        for f in &mut est2.frames {
            f.r_gl = crate::body_model::log_rotation(&(rodrigues(&f.r_gl) * q.transpose()));
            for th in &mut f.theta_b {
                *th = q * *th;
            }
        }
        let again = cross_shot_pck(&rotated, &est2, &seq, &DEFAULT_ALPHAS).unwrap();
        assert_eq!(again.pck, base.pck);
    }

    #[test]
    fn identical_points_have_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(&mut rng, 17, 1.0);
        assert_eq!(mpjpe(&x, &x).unwrap(), 0.0);
        assert!(pa_mpjpe(&x, &x).unwrap() < 1e-9);
    }

    #[test]
    fn similarity_is_factored_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = cloud(&mut rng, 17, 1.0);
        let r = rodrigues(&Vec3::new(0.3, -1.2, 0.8));
        let pred: Vec<Vec3> = gt.iter().map(|p| r * p * 1.7 + Vec3::new(0.5, -2.0, 3.0)).collect();
        assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-9);
        assert!(mpjpe(&pred, &gt).unwrap() > 10.0);
    }

    #[test]
    fn collinear_points_are_rejected() {
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(pa_mpjpe(&line, &line), Err(Error::Degenerate(_))));
    }

    /// Grid search over rotations (2 degree Euler grid) with the optimal
    /// scale and translation for each; returns the mean error in mm at the
    /// least-squares optimum.
    fn brute_force_pa(pred: &[Vec3], gt: &[Vec3]) -> f64 {
        let n = pred.len() as f64;
        let mp = pred.iter().sum::<Vec3>() / n;
        let mg = gt.iter().sum::<Vec3>() / n;
        let pc: Vec<Vec3> = pred.iter().map(|p| p - mp).collect();
        let gc: Vec<Vec3> = gt.iter().map(|g| g - mg).collect();
        let var: f64 = pc.iter().map(|p| p.norm_squared()).sum();
        let step = 2f64.to_radians();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..180 {
            let a = -std::f64::consts::PI + i as f64 * step;
            let ra = nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), a);
            for j in 0..=90 {
                let b = -std::f64::consts::FRAC_PI_2 + j as f64 * step;
                let rb = ra * nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), b);
                for k in 0..180 {
                    let c = -std::f64::consts::PI + k as f64 * step;
                    let r = rb * nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), c);
                    let rp: Vec<Vec3> = pc.iter().map(|p| r * p).collect();
                    let s = (rp.iter().zip(&gc).map(|(p, g)| p.dot(g)).sum::<f64>() / var).max(0.0);
                    let sq: f64 = rp.iter().zip(&gc).map(|(p, g)| (p * s - g).norm_squared()).sum();
                    if sq < best.0 {
                        let mean = rp.iter().zip(&gc).map(|(p, g)| (p * s - g).norm()).sum::<f64>() / n;
                        best = (sq, 1000.0 * mean);
                    }
                }
            }
        }
        best.1
    }

    #[test]
    fn procrustes_matches_brute_force_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2 {
            let gt = cloud(&mut rng, 5, 1.0);
            let r = rodrigues(&cloud(&mut rng, 1, 2.0)[0]);
            let noise = cloud(&mut rng, 5, 0.5);
            let pred: Vec<Vec3> = gt.iter().zip(&noise).map(|(p, e)| r * (p + e) * 0.8 + Vec3::new(1.0, 0.0, 4.0)).collect();
            let pa = pa_mpjpe(&pred, &gt).unwrap();
            let brute = brute_force_pa(&pred, &gt);
            assert!((pa - brute).abs() / brute < 0.02, "pa {pa} brute {brute}");
        }
    }

    #[test]
    fn csv_layout() {
        let r = PckReport {
            alphas: vec![0.05, 0.1],
            pck: vec![50.0, 75.0],
            per_joint: vec![],
            pairs: 4,
            hits: vec![2, 3],
            evaluated: 4,
        };
        assert_eq!(r.to_csv(), "alpha,pck,pairs\n0.05,50,4\n0.1,75,4\n");
        let pooled = PckReport::pool(&[r.clone(), r]).unwrap();
        assert_eq!(pooled.pck, vec![50.0, 75.0]);
        assert_eq!(pooled.pairs, 8);
    }

    proptest! {
        #[test]
        fn aligned_error_never_exceeds_root_aligned(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = cloud(&mut rng, 17, 1.0);
            let pred = cloud(&mut rng, 17, 1.0);
            prop_assert!(pa_mpjpe(&pred, &gt).unwrap() <= mpjpe(&pred, &gt).unwrap() + 1e-9);
        }

        #[test]
        fn pck_is_monotone_in_alpha(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt: Vec<Vec2> = (0..17).map(|_| Vec2::new(rng.random_range(0.0..500.0), rng.random_range(0.0..500.0))).collect();
            let pred: Vec<Vec2> = gt.iter().map(|g| g + Vec2::new(rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0))).collect();
            let mut last = 0.0;
            for a in [0.01, 0.05, 0.1, 0.2, 0.5] {
                let p = pck(&pred, &gt, None, a).unwrap();
                prop_assert!((0.0..=100.0).contains(&p) && p >= last);
                last = p;
            }
        }
    }
}
