use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{FrameGt, FrameObservation, Keypoint, Motion, ShotSchedule};
use crate::body_model::{forward_kinematics, log_rotation, pose_joints, rodrigues, BodyModel, FrameParams};
use crate::camera::project;
use crate::error::{Error, Result};

/// Renders a world motion through a shot schedule into 2D detections.
///
/// Every frame consumes the same number of random draws whatever its
/// visibility, so changing one probability never reshuffles the noise of
/// unrelated frames.
///
/// Absence is a two-state Markov chain with stationary probability
/// `missing_prob` and lag-one correlation `missing_persistence`.
pub fn synthesize_observations(
    model: &BodyModel,
    motion: &Motion,
    schedule: &ShotSchedule,
    noise_sigma_px: f64,
    missing_prob: f64,
    missing_persistence: f64,
    seed: u64,
) -> Result<Vec<FrameObservation>> {
    if schedule.frame_count() != motion.len() {
        return Err(Error::Dimension {
            what: "shot schedule frames",
            expected: motion.len(),
            actual: schedule.frame_count(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(motion.len());
    let mut prev_missing = None;
    for t in 0..motion.len() {
        let shot = schedule.shot_of_frame(t);
        let r_cam = shot.rotation * rodrigues(&motion.r_world[t]);
        let params = FrameParams {
            r_gl: log_rotation(&r_cam),
            t_gl: shot.rotation * motion.t_world[t] + shot.translation,
            theta_b: motion.theta_b[t].clone(),
        };
        let xb = forward_kinematics(model, &params.theta_b, &motion.beta)?;
        let joints = pose_joints(&xb, &params.r_gl, &params.t_gl);
        let proj = project(&joints, &shot.camera);

        let p_missing = match prev_missing {
            None => missing_prob,
            Some(true) => missing_prob + (1.0 - missing_prob) * missing_persistence,
            Some(false) => missing_prob * (1.0 - missing_persistence),
        };
        let valid = rng.random::<f64>() >= p_missing;
        prev_missing = Some(!valid);
        let keypoints = proj
            .iter()
            .map(|p| {
                let nu: f64 = rng.sample(StandardNormal);
                let nv: f64 = rng.sample(StandardNormal);
                let c: f64 = rng.random_range(0.5..=1.0);
                if !valid {
                    return Keypoint { u: 0.0, v: 0.0, conf: 0.0 };
                }
                Keypoint {
                    u: p.uv.x + noise_sigma_px * nu,
                    v: p.uv.y + noise_sigma_px * nv,
                    conf: if p.visible { c } else { 0.0 },
                }
            })
            .collect();

        frames.push(FrameObservation {
            t,
            shot_id: shot.id,
            valid,
            keypoints,
            camera: shot.camera.clone(),
            gt: Some(FrameGt { params, joints }),
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::joints::LOWER_LEGS;
    use crate::scene_sim::{sample_motion, sample_shots, MotionConfig, ShotConfig};

    fn scene(shots: &ShotConfig, seed: u64, sigma: f64) -> Vec<FrameObservation> {
        let model = BodyModel::standard();
        let motion = sample_motion(&model, &MotionConfig { rng_seed: seed, ..MotionConfig::default() }).unwrap();
        let mut schedule = sample_shots(motion.len(), shots, seed + 1000).unwrap();
        schedule.aim_at(&motion.t_world);
        synthesize_observations(&model, &motion, &schedule, sigma, shots.missing_prob, shots.missing_persistence, seed).unwrap()
    }

    #[test]
    fn noiseless_detections_are_exact_projections() {
        let cfg = ShotConfig { truncation_prob: 0.0, missing_prob: 0.0, ..ShotConfig::default() };
        for seed in 0..5 {
            for f in scene(&cfg, seed, 0.0) {
                assert!(f.valid);
                let gt = f.gt_keypoints().unwrap();
                for (k, g) in f.keypoints.iter().zip(&gt) {
                    assert_eq!(k.uv(), *g);
                    assert!(k.conf >= 0.5);
                }
            }
        }
    }

    #[test]
    fn close_ups_cut_knees_and_ankles() {
        let cfg = ShotConfig { truncation_prob: 1.0, missing_prob: 0.0, ..ShotConfig::default() };
        let model = BodyModel::standard();
        let mut close_frames = 0;
        let mut head_visible = 0;
        for seed in 0..200 {
            let motion = sample_motion(&model, &MotionConfig { rng_seed: seed, ..MotionConfig::default() }).unwrap();
            let mut schedule = sample_shots(motion.len(), &cfg, seed + 1000).unwrap();
            schedule.aim_at(&motion.t_world);
            let frames = synthesize_observations(&model, &motion, &schedule, 2.0, 0.0, 0.0, seed).unwrap();
            for f in &frames {
                if !schedule.shots[f.shot_id].close_up {
                    continue;
                }
                close_frames += 1;
                for &j in &LOWER_LEGS {
                    assert_eq!(f.keypoints[j].conf, 0.0, "seed {seed} frame {} joint {j}", f.t);
                }
                if f.keypoints[4].conf > 0.0 {
                    head_visible += 1;
                }
            }
        }
        assert!(close_frames > 1000);
        assert!(head_visible as f64 > 0.95 * close_frames as f64, "{head_visible}/{close_frames}");
    }

    #[test]
    fn wide_shots_keep_the_whole_body_in_frame() {
        let cfg = ShotConfig { truncation_prob: 0.0, missing_prob: 0.0, ..ShotConfig::default() };
        for seed in 0..100 {
            for f in scene(&cfg, seed, 0.0) {
                assert!(f.keypoints.iter().all(|k| k.conf > 0.0), "seed {seed} frame {}", f.t);
            }
        }
    }

    #[test]
    fn missing_fraction_is_binomial() {
        let cfg = ShotConfig { missing_prob: 0.1, ..ShotConfig::default() };
        let mut n = 0usize;
        let mut missing = 0usize;
        let mut seed = 0;
        while n < 10_000 {
            for f in scene(&cfg, seed, 2.0) {
                n += 1;
                if !f.valid {
                    missing += 1;
                    assert!(f.keypoints.iter().all(|k| k.conf == 0.0));
                }
            }
            seed += 1;
        }
        let p = 0.1;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        let frac = missing as f64 / n as f64;
        assert!((frac - p).abs() <= 3.0 * sd, "missing fraction {frac}");
    }

    #[test]
    fn persistent_absence_keeps_rate_and_lengthens_runs() {
        let (p, rho) = (0.3, 0.8);
        let cfg = ShotConfig { missing_prob: p, missing_persistence: rho, ..ShotConfig::default() };
        let (mut n, mut missing, mut runs) = (0usize, 0usize, 0usize);
        for seed in 0..300 {
            let mut prev = true;
            for f in scene(&cfg, seed, 2.0) {
                n += 1;
                if !f.valid {
                    missing += 1;
                    runs += prev as usize;
                }
                prev = f.valid;
            }
        }
        let frac = missing as f64 / n as f64;
        assert!((frac - p).abs() < 0.03, "missing fraction {frac}");
        // Expected run length 1 / ((1 - p)(1 - rho)).
        let mean_run = missing as f64 / runs as f64;
        let expected = 1.0 / ((1.0 - p) * (1.0 - rho));
        assert!((mean_run - expected).abs() < 0.15 * expected, "mean run {mean_run}, expected {expected}");
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let model = BodyModel::standard();
        let motion = sample_motion(&model, &MotionConfig::default()).unwrap();
        let schedule = sample_shots(10, &ShotConfig::default(), 0).unwrap();
        assert!(synthesize_observations(&model, &motion, &schedule, 1.0, 0.0, 0.0, 0).is_err());
    }
}
