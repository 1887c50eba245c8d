use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

/// Camera distance range of close-up shots, meters. The camera aims at the
/// neck from at or below its height, so knees and ankles fall outside the
/// image even with the subject 0.42 m off the aim line.
pub const CLOSE_UP_DISTANCE: (f64, f64) = (0.9, 1.2);

/// Aim points relative to the root (y down): body center for wide shots,
/// neck for close-ups.
const WIDE_AIM: Vec3 = Vec3::new(0.0, 0.05, 0.0);
const CLOSE_UP_AIM: Vec3 = Vec3::new(0.0, -0.7, 0.0);

const MIN_AZIMUTH_CHANGE: f64 = std::f64::consts::FRAC_PI_4;
const MAX_ELEVATION: f64 = 0.25;
/// Consecutive wide shots differ in camera distance by at least this much.
const MIN_DISTANCE_CHANGE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShotConfig {
    /// Frames.
    pub mean_shot_length: f64,
    /// Meters, wide shots.
    pub camera_distance_range: (f64, f64),
    /// Probability that a shot is a close-up of the upper body.
    pub truncation_prob: f64,
    /// Per-frame probability that the identity is absent.
    pub missing_prob: f64,
    /// Correlation of absence between consecutive frames, in [0, 1). Zero
    /// drops frames independently; larger values give longer absences at the
    /// same overall rate.
    pub missing_persistence: f64,
}

impl Default for ShotConfig {
    fn default() -> Self {
        ShotConfig {
            mean_shot_length: 10.0,
            camera_distance_range: (3.0, 6.0),
            truncation_prob: 0.4,
            missing_prob: 0.1,
            missing_persistence: 0.0,
        }
    }
}

impl ShotConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("truncation_prob", self.truncation_prob),
            ("missing_prob", self.missing_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("shot config", format!("{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.missing_persistence) {
            return Err(Error::invalid("shot config", "missing_persistence must lie in [0, 1)"));
        }
        if !(self.mean_shot_length >= 1.0) {
            return Err(Error::invalid("shot config", "mean_shot_length must be >= 1"));
        }
        let (lo, hi) = self.camera_distance_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::invalid("shot config", "bad camera_distance_range"));
        }
        Ok(())
    }
}

/// One static camera setup.
#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub id: usize,
    pub start: usize,
    pub len: usize,
    pub close_up: bool,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation: `x_cam = rotation * x_world + translation`.
    pub translation: Vec3,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShotSchedule {
    pub shots: Vec<Shot>,
}

impl ShotSchedule {
    pub fn frame_count(&self) -> usize {
        self.shots.iter().map(|s| s.len).sum()
    }

    /// Shifts every camera so it aims at the subject: the center of the
    /// bounding box of the root positions during the shot.
    pub fn aim_at(&mut self, roots: &[Vec3]) {
        for shot in &mut self.shots {
            let span = &roots[shot.start..shot.start + shot.len];
            let lo = span.iter().fold(span[0], |a, p| a.inf(p));
            let hi = span.iter().fold(span[0], |a, p| a.sup(p));
            let center = (lo + hi) * 0.5;
            shot.translation -= shot.rotation * center;
        }
    }

    pub fn shot_of_frame(&self, t: usize) -> &Shot {
        self.shots
            .iter()
            .find(|s| t >= s.start && t < s.start + s.len)
            .expect("frame inside schedule")
    }
}

/// Draws shot lengths: geometric with the configured mean, at least two
/// frames each. A final remainder shorter than two frames joins the previous
/// shot.
fn shot_lengths(frames: usize, mean: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if mean >= frames as f64 {
        return vec![frames];
    }
    let p = 1.0 / mean;
    let mut lens = Vec::new();
    let mut used = 0;
    while used < frames {
        let mut len = 1;
        while rng.random::<f64>() >= p {
            len += 1;
        }
        let len = len.max(2).min(frames - used);
        lens.push(len);
        used += len;
    }
    if lens.len() > 1 && *lens.last().unwrap() < 2 {
        let tail = lens.pop().unwrap();
        *lens.last_mut().unwrap() += tail;
    }
    lens
}

/// Camera looking from `center` at `aim` with image y aligned to world down.
pub(crate) fn look_at(center: Vec3, aim: Vec3) -> (Mat3, Vec3) {
    let z = (aim - center).normalize();
    let x = Vec3::y().cross(&z).normalize();
    let y = z.cross(&x);
    let rot = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    (rot, -(rot * center))
}

/// Places a camera at `distance` from the aim point; azimuth 0 is frontal.
pub(crate) fn orbit_camera(azimuth: f64, elevation: f64, distance: f64, close_up: bool) -> (Mat3, Vec3) {
    let aim = if close_up { CLOSE_UP_AIM } else { WIDE_AIM };
    let dir = Vec3::new(
        azimuth.sin() * elevation.cos(),
        -elevation.sin(),
        -azimuth.cos() * elevation.cos(),
    );
    look_at(aim + dir * distance, aim)
}

/// Samples a shot schedule covering `frames` frames.
pub fn sample_shots(frames: usize, cfg: &ShotConfig, seed: u64) -> Result<ShotSchedule> {
    if frames == 0 {
        return Err(Error::invalid("shot schedule", "needs at least one frame"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lens = shot_lengths(frames, cfg.mean_shot_length, &mut rng);
    let (dmin, dmax) = cfg.camera_distance_range;

    let mut shots: Vec<Shot> = Vec::with_capacity(lens.len());
    let mut start = 0;
    let mut azimuth = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut prev_distance: Option<f64> = None;
    let mut prev_close = false;
    for (id, len) in lens.into_iter().enumerate() {
        let wants_close = rng.random::<f64>() < cfg.truncation_prob;
        // Two close-ups in a row would differ only by a turn about the neck.
        let close_up = wants_close && !prev_close;
        if id > 0 {
            let turn = rng.random_range(MIN_AZIMUTH_CHANGE..=std::f64::consts::PI);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            azimuth += sign * turn;
        }
        // Positive elevation looks down; close-ups never do, which would pull
        // the knees toward the optical axis.
        let elevation = if close_up {
            rng.random_range(-MAX_ELEVATION..=0.0)
        } else {
            rng.random_range(-MAX_ELEVATION..=MAX_ELEVATION)
        };
        let distance = if close_up {
            rng.random_range(CLOSE_UP_DISTANCE.0..=CLOSE_UP_DISTANCE.1)
        } else {
            let mut d = rng.random_range(dmin..=dmax);
            if let (Some(prev), false) = (prev_distance, prev_close) {
                // Rejection keeps consecutive wide shots visibly different.
                let mut tries = 0;
                while (d - prev).abs() < MIN_DISTANCE_CHANGE && dmax - dmin > MIN_DISTANCE_CHANGE && tries < 64 {
                    d = rng.random_range(dmin..=dmax);
                    tries += 1;
                }
            }
            d
        };
        let (rotation, translation) = orbit_camera(azimuth, elevation, distance, close_up);
        shots.push(Shot {
            id,
            start,
            len,
            close_up,
            rotation,
            translation,
            camera: Camera::with_shot(id),
        });
        start += len;
        prev_distance = Some(distance);
        prev_close = close_up;
    }
    Ok(ShotSchedule { shots })
}

/// Two shots splitting `frames` in half: a wide shot, then an upper-body
/// close-up from a different azimuth. The close-up cuts off the legs.
pub fn two_shot_schedule(frames: usize, cfg: &ShotConfig, seed: u64) -> Result<ShotSchedule> {
    if frames < 4 {
        return Err(Error::invalid("shot schedule", "a two-shot scene needs at least four frames"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dmin, dmax) = cfg.camera_distance_range;
    let azimuth = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let turn = rng.random_range(MIN_AZIMUTH_CHANGE..=std::f64::consts::PI);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let wide = orbit_camera(
        azimuth,
        rng.random_range(-MAX_ELEVATION..=MAX_ELEVATION),
        rng.random_range(dmin..=dmax),
        false,
    );
    let close = orbit_camera(
        azimuth + sign * turn,
        rng.random_range(-MAX_ELEVATION..=0.0),
        rng.random_range(CLOSE_UP_DISTANCE.0..=CLOSE_UP_DISTANCE.1),
        true,
    );
    let half = frames / 2;
    let shots = [(0, half, false, wide), (half, frames - half, true, close)]
        .into_iter()
        .enumerate()
        .map(|(id, (start, len, close_up, (rotation, translation)))| Shot {
            id,
            start,
            len,
            close_up,
            rotation,
            translation,
            camera: Camera::with_shot(id),
        })
        .collect();
    Ok(ShotSchedule { shots })
}
