//! Synthetic multi-shot sequences of one moving body.
//!
//! A world-space motion is sampled once per sequence; a shot schedule then
//! assigns each frame a static camera viewpoint. Camera-frame poses jump at
//! shot boundaries while the body-frame pose keeps evolving smoothly.

mod io;
mod motion;
mod observe;
mod shots;
mod tracklets;

use serde::{Deserialize, Serialize};

pub use io::{read_dataset, write_dataset, FORMAT_VERSION};
pub use motion::{joint_limit, sample_motion, Motion, MotionConfig};
pub use observe::synthesize_observations;
pub use shots::{sample_shots, two_shot_schedule, Shot, ShotConfig, ShotSchedule, CLOSE_UP_DISTANCE};
pub use tracklets::{assemble_tracklets, Tracklet, TrackletMode, TrackletStats, LONG_TRACKLET_FRAMES};

use crate::body_model::{BodyModel, FrameParams};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{self, Stream};
use crate::{Vec2, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub conf: f64,
}

impl Keypoint {
    pub fn uv(&self) -> Vec2 {
        Vec2::new(self.u, self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGt {
    pub params: FrameParams,
    /// Camera-frame joints.
    pub joints: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub t: usize,
    pub shot_id: usize,
    pub valid: bool,
    pub keypoints: Vec<Keypoint>,
    pub camera: Camera,
    pub gt: Option<FrameGt>,
}

impl FrameObservation {
    /// Exact projections of the ground-truth joints, if ground truth exists.
    pub fn gt_keypoints(&self) -> Option<Vec<Vec2>> {
        self.gt
            .as_ref()
            .map(|g| g.joints.iter().map(|x| self.camera.project_point(x)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub identity: u64,
    pub beta_gt: Option<Vec<f64>>,
    pub frames: Vec<FrameObservation>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.frames.iter().filter(|f| f.valid).count()
    }

    /// Frame index pairs `(a, b)` across each shot change: `a` is the last
    /// valid frame of a shot and `b` the first valid frame of the next one.
    /// Shots without valid frames are skipped over.
    pub fn shot_boundaries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut last_valid: Option<usize> = None;
        for (i, f) in self.frames.iter().enumerate() {
            if !f.valid {
                continue;
            }
            if let Some(a) = last_valid {
                if self.frames[a].shot_id != f.shot_id {
                    out.push((a, i));
                }
            }
            last_valid = Some(i);
        }
        out
    }

    pub fn check_invariants(&self) -> Result<()> {
        for w in self.frames.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::invalid("sequence", "frame indices must increase"));
            }
            if w[1].shot_id < w[0].shot_id {
                return Err(Error::invalid("sequence", "shot ids must not decrease"));
            }
        }
        for f in &self.frames {
            if f.keypoints.iter().any(|k| !(0.0..=1.0).contains(&k.conf)) {
                return Err(Error::invalid("sequence", "confidence outside [0, 1]"));
            }
            if !f.valid && f.keypoints.iter().any(|k| k.conf != 0.0) {
                return Err(Error::invalid(
                    "sequence",
                    format!("invalid frame {} has non-zero confidence", f.t),
                ));
            }
        }
        Ok(())
    }
}

/// Full generator configuration; the TOML file for `simulate` mirrors it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub motion: MotionConfig,
    pub shots: ShotConfig,
    pub noise_sigma_px: f64,
    pub num_sequences: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            motion: MotionConfig::default(),
            shots: ShotConfig::default(),
            noise_sigma_px: 2.0,
            num_sequences: 32,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.motion.validate()?;
        self.shots.validate()?;
        if !(self.noise_sigma_px >= 0.0 && self.noise_sigma_px.is_finite()) {
            return Err(Error::invalid("sim config", "noise_sigma_px must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub format_version: String,
    pub sequences: Vec<Sequence>,
    pub generator: Option<SimConfig>,
}

impl SequenceDataset {
    pub fn new(sequences: Vec<Sequence>) -> Self {
        SequenceDataset {
            format_version: FORMAT_VERSION.to_string(),
            sequences,
            generator: None,
        }
    }
}

/// Generates one sequence from its own substream of `cfg.seed`.
pub fn generate_sequence(model: &BodyModel, cfg: &SimConfig, index: usize) -> Result<Sequence> {
    generate_with(model, cfg, index, sample_shots)
}

/// Like [`generate_sequence`] with a [`two_shot_schedule`]: a wide shot
/// followed by a lower-body-truncated close-up. `cfg.shots.truncation_prob`
/// and `mean_shot_length` are not used.
pub fn generate_two_shot_sequence(model: &BodyModel, cfg: &SimConfig, index: usize) -> Result<Sequence> {
    generate_with(model, cfg, index, two_shot_schedule)
}

fn generate_with(
    model: &BodyModel,
    cfg: &SimConfig,
    index: usize,
    schedule: impl Fn(usize, &ShotConfig, u64) -> Result<ShotSchedule>,
) -> Result<Sequence> {
    cfg.validate()?;
    let base = rng::substream(cfg.seed, index as u64);
    let motion_cfg = MotionConfig {
        rng_seed: rng::substream(base, Stream::Motion as u64),
        ..cfg.motion.clone()
    };
    let motion = sample_motion(model, &motion_cfg)?;
    let mut schedule = schedule(
        cfg.motion.frame_count,
        &cfg.shots,
        rng::substream(base, Stream::Shots as u64),
    )?;
    schedule.aim_at(&motion.t_world);
    let frames = synthesize_observations(
        model,
        &motion,
        &schedule,
        cfg.noise_sigma_px,
        cfg.shots.missing_prob,
        cfg.shots.missing_persistence,
        rng::substream(base, Stream::Observations as u64),
    )?;
    Ok(Sequence {
        identity: index as u64,
        beta_gt: Some(motion.beta.clone()),
        frames,
    })
}

pub fn generate_dataset(model: &BodyModel, cfg: &SimConfig, exec: Exec) -> Result<SequenceDataset> {
    cfg.validate()?;
    let sequences = exec.try_map_range(cfg.num_sequences, |i| generate_sequence(model, cfg, i))?;
    Ok(SequenceDataset {
        format_version: FORMAT_VERSION.to_string(),
        sequences,
        generator: Some(cfg.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{canonicalize, geodesic_angle};

    #[test]
    fn parallel_generation_equals_serial() {
        let model = BodyModel::standard();
        let cfg = SimConfig {
            num_sequences: 6,
            seed: 42,
            ..SimConfig::default()
        };
        let a = generate_dataset(&model, &cfg, Exec::Serial).unwrap();
        let b = generate_dataset(&model, &cfg, Exec::default()).unwrap();
        assert_eq!(a, b);
        for s in &a.sequences {
            s.check_invariants().unwrap();
        }
    }

    #[test]
    fn shot_changes_jump_in_camera_frame_but_not_canonical_frame() {
        let model = BodyModel::standard();
        let cfg = SimConfig {
            num_sequences: 10,
            seed: 3,
            ..SimConfig::default()
        };
        let speed = cfg.motion.max_joint_speed;
        let ds = generate_dataset(&model, &cfg, Exec::default()).unwrap();
        let mut boundaries = 0;
        for seq in &ds.sequences {
            for w in seq.frames.windows(2) {
                let (g0, g1) = (w[0].gt.as_ref().unwrap(), w[1].gt.as_ref().unwrap());
                let c0 = canonicalize(&g0.joints, &g0.params.r_gl);
                let c1 = canonicalize(&g1.joints, &g1.params.r_gl);
                let can_step = c0
                    .iter()
                    .zip(&c1)
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max);
                // Bones are at most ~1.6 m from the root; each of at most
                // four rotations along a chain moves by `speed`.
                assert!(can_step < 4.0 * speed * 1.7, "canonical step {can_step}");
                let cam_step = g0
                    .joints
                    .iter()
                    .zip(&g1.joints)
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max);
                if w[0].shot_id == w[1].shot_id {
                    let rot = geodesic_angle(&g0.params.r_gl, &g1.params.r_gl);
                    assert!(rot <= speed + 1e-9, "in-shot orientation step {rot}");
                } else {
                    boundaries += 1;
                    assert!(cam_step > 0.5, "camera-frame jump {cam_step}");
                }
            }
        }
        assert!(boundaries > 10);
    }
}
