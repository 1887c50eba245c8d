//! Multi-shot articulated body recovery at desk scale.
//!
//! The crate simulates multi-shot observations of a moving articulated body,
//! recovers per-frame pose by minimizing a reprojection energy with
//! smoothness imposed in the body's canonical frame, evaluates the result
//! with cross-shot reprojection metrics, and trains single-frame and
//! masked-attention temporal regressors on the recovered pseudo ground truth.
//!
//! Module map:
//!
//! - [`body_model`]: skeleton, forward kinematics, rotations, Jacobians.
//! - [`camera`]: pinhole projection and visibility.
//! - [`scene_sim`]: motion, shot schedules, detections, tracklets, dataset IO.
//! - [`objectives`]: fitting energy terms and their gradients.
//! - [`solver`]: sequence initialization and quasi-Newton minimization.
//! - [`metrics`]: PCK, cross-shot PCK, MPJPE, PA-MPJPE.
//! - [`neural`]: hand-written encoder, transformer, conv baseline, training.
//! - [`experiments`]: seeded comparison protocols and report emission.

pub mod body_model;
pub mod camera;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod metrics;
pub mod neural;
pub mod objectives;
pub mod rng;
pub mod scene_sim;
pub mod solver;

pub use error::{Error, Result};

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
