use nalgebra::UnitQuaternion;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::body_model::BodyModel;
use crate::error::{Error, Result};
use crate::Vec3;

/// Horizontal root drift per keyframe interval, meters per frame.
const ROOT_DRIFT_SPEED: f64 = 0.01;
const ROOT_DRIFT_LIMIT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub frame_count: usize,
    pub keyframe_spacing: usize,
    /// Radians per frame.
    pub max_joint_speed: f64,
    /// Shape coefficients are drawn from `[-beta_range, beta_range]`.
    pub beta_range: f64,
    pub rng_seed: u64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            frame_count: 64,
            keyframe_spacing: 8,
            max_joint_speed: 0.15,
            beta_range: 1.0,
            rng_seed: 0,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::invalid("motion config", "frame_count must be >= 2"));
        }
        if self.keyframe_spacing < 2 {
            return Err(Error::invalid("motion config", "keyframe_spacing must be >= 2"));
        }
        if !(self.max_joint_speed > 0.0 && self.beta_range >= 0.0) {
            return Err(Error::invalid(
                "motion config",
                "max_joint_speed must be > 0 and beta_range >= 0",
            ));
        }
        Ok(())
    }
}

/// Ground-truth world motion of one body.
#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    /// `[frame][joint - 1]`
    pub theta_b: Vec<Vec<Vec3>>,
    /// World orientation of the body, axis-angle.
    pub r_world: Vec<Vec3>,
    /// World position of the root.
    pub t_world: Vec<Vec3>,
    pub beta: Vec<f64>,
}

impl Motion {
    pub fn len(&self) -> usize {
        self.theta_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta_b.is_empty()
    }
}

/// Angular range of each joint's keyframe rotations. Leaf joints carry no
/// bone below them and stay at rest.
pub fn joint_limit(model: &BodyModel, j: usize) -> f64 {
    if model.descendants(j).is_empty() {
        return 0.0;
    }
    let name = model.joint_names()[j].as_str();
    match name.trim_start_matches("l_").trim_start_matches("r_") {
        "spine" => 0.3,
        "thorax" => 0.2,
        "neck" => 0.3,
        "shoulder" | "elbow" => 0.8,
        "hip" | "knee" => 0.6,
        _ => 0.5,
    }
}

fn sample_in_ball(rng: &mut ChaCha8Rng, radius: f64) -> UnitQuaternion<f64> {
    let dir = Vec3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    let u: f64 = rng.random();
    let n = dir.norm();
    if n == 0.0 || radius == 0.0 {
        return UnitQuaternion::identity();
    }
    UnitQuaternion::from_scaled_axis(dir / n * radius * u.cbrt())
}

/// Geodesic interpolation `from * exp(s * log(from^-1 * to))`.
fn geodesic(from: &UnitQuaternion<f64>, to: &UnitQuaternion<f64>, s: f64) -> UnitQuaternion<f64> {
    let rel = from.inverse() * to;
    from * UnitQuaternion::from_scaled_axis(rel.scaled_axis() * s)
}

/// Samples a smooth world motion.
///
/// Keyframes are placed every `keyframe_spacing` frames and interpolated
/// along geodesics; consecutive keyframes are pulled together so that no
/// joint turns faster than `max_joint_speed` per frame.
pub fn sample_motion(model: &BodyModel, cfg: &MotionConfig) -> Result<Motion> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let n = cfg.frame_count;
    let s = cfg.keyframe_spacing;
    let keys = (n - 1).div_ceil(s) + 1;
    let step_budget = cfg.max_joint_speed * s as f64 * (1.0 - 1e-9);
    let nj = model.joint_count();

    let beta: Vec<f64> = (0..model.shape_dim())
        .map(|_| {
            if cfg.beta_range > 0.0 {
                rng.random_range(-cfg.beta_range..=cfg.beta_range)
            } else {
                0.0
            }
        })
        .collect();

    let mut joint_keys: Vec<Vec<UnitQuaternion<f64>>> = vec![Vec::with_capacity(keys); nj - 1];
    for k in 0..keys {
        for j in 1..nj {
            let mut q = sample_in_ball(&mut rng, joint_limit(model, j));
            if k > 0 {
                let prev = joint_keys[j - 1][k - 1];
                let angle = prev.angle_to(&q);
                if angle > step_budget {
                    q = geodesic(&prev, &q, step_budget / angle);
                }
            }
            joint_keys[j - 1].push(q);
        }
    }

    let mut yaw_keys = Vec::with_capacity(keys);
    let mut root_keys: Vec<Vec3> = Vec::with_capacity(keys);
    for k in 0..keys {
        if k == 0 {
            yaw_keys.push(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
            root_keys.push(Vec3::zeros());
        } else {
            let dyaw: f64 = rng.random_range(-1.0..1.0) * 0.5 * step_budget;
            yaw_keys.push(yaw_keys[k - 1] + dyaw);
            let drift = ROOT_DRIFT_SPEED * s as f64;
            let mut p = root_keys[k - 1];
            p.x = (p.x + rng.random_range(-drift..drift)).clamp(-ROOT_DRIFT_LIMIT, ROOT_DRIFT_LIMIT);
            p.z = (p.z + rng.random_range(-drift..drift)).clamp(-ROOT_DRIFT_LIMIT, ROOT_DRIFT_LIMIT);
            root_keys.push(p);
        }
    }

    let mut theta_b = Vec::with_capacity(n);
    let mut r_world = Vec::with_capacity(n);
    let mut t_world = Vec::with_capacity(n);
    for t in 0..n {
        let k = t / s;
        let frac = (t - k * s) as f64 / s as f64;
        let k1 = (k + 1).min(keys - 1);
        theta_b.push(
            joint_keys
                .iter()
                .map(|qs| geodesic(&qs[k], &qs[k1], frac).scaled_axis())
                .collect(),
        );
        let yaw = yaw_keys[k] + (yaw_keys[k1] - yaw_keys[k]) * frac;
        r_world.push(Vec3::new(0.0, yaw, 0.0));
        t_world.push(root_keys[k] + (root_keys[k1] - root_keys[k]) * frac);
    }

    Ok(Motion {
        theta_b,
        r_world,
        t_world,
        beta,
    })
}
