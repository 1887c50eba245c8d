//! Articulated skeleton with forward kinematics and analytic Jacobians.
//!
//! Coordinates follow the camera convention: x right, y down, z forward.
//! The rest pose faces the camera (front along -z) with the head at -y.
//!
//! A joint's rotation moves its descendants only. Joint positions in the body
//! frame are
//!
//! ```text
//! P[root] = 0
//! P[j]    = P[p] + G[p] * (rest_offset[j] + sum_k beta[k] * shape_basis[j][k])
//! G[j]    = G[p] * R(theta[j])        (G[root] = I)
//! ```
//!
//! and the camera frame applies `X = R(r_gl) * P + t_gl`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

/// Magnitude below which [`rodrigues`] switches to its Taylor expansion.
pub const RODRIGUES_TAYLOR: f64 = 1e-8;
const DERIVATIVE_TAYLOR: f64 = 1e-5;

pub const DEFAULT_JOINT_COUNT: usize = 17;
pub const DEFAULT_SHAPE_DIM: usize = 2;

/// Joint indices of the default skeleton.
pub mod joints {
    pub const PELVIS: usize = 0;
    pub const SPINE: usize = 1;
    pub const THORAX: usize = 2;
    pub const NECK: usize = 3;
    pub const HEAD: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_SHOULDER: usize = 8;
    pub const R_ELBOW: usize = 9;
    pub const R_WRIST: usize = 10;
    pub const L_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const L_ANKLE: usize = 13;
    pub const R_HIP: usize = 14;
    pub const R_KNEE: usize = 15;
    pub const R_ANKLE: usize = 16;

    /// Knees and ankles: the joints a close-up framing cuts off.
    pub const LOWER_LEGS: [usize; 4] = [L_KNEE, L_ANKLE, R_KNEE, R_ANKLE];
    pub const LEGS: [usize; 6] = [L_HIP, L_KNEE, L_ANKLE, R_HIP, R_KNEE, R_ANKLE];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BodyModelDoc", into = "BodyModelDoc")]
pub struct BodyModel {
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<Vec3>,
    /// `[joint][shape_dim]`
    shape_basis: Vec<Vec<Vec3>>,
    joint_names: Vec<String>,
    /// Joints strictly below each joint, in increasing index order.
    descendants: Vec<Vec<usize>>,
    /// Ancestors of each joint from the root down, excluding the root and the joint.
    chains: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BodyModelDoc {
    joint_count: usize,
    parents: Vec<i64>,
    rest_offsets: Vec<[f64; 3]>,
    shape_basis: Vec<Vec<[f64; 3]>>,
    joint_names: Vec<String>,
}

impl TryFrom<BodyModelDoc> for BodyModel {
    type Error = Error;

    fn try_from(doc: BodyModelDoc) -> Result<Self> {
        if doc.parents.len() != doc.joint_count {
            return Err(Error::Dimension {
                what: "parents",
                expected: doc.joint_count,
                actual: doc.parents.len(),
            });
        }
        let parents = doc
            .parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        BodyModel::new(
            parents,
            doc.rest_offsets.iter().map(|v| Vec3::from(*v)).collect(),
            doc.shape_basis
                .iter()
                .map(|row| row.iter().map(|v| Vec3::from(*v)).collect())
                .collect(),
            doc.joint_names,
        )
    }
}

impl From<BodyModel> for BodyModelDoc {
    fn from(m: BodyModel) -> Self {
        BodyModelDoc {
            joint_count: m.joint_count(),
            parents: m
                .parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            rest_offsets: m.rest_offsets.iter().map(|v| [v.x, v.y, v.z]).collect(),
            shape_basis: m
                .shape_basis
                .iter()
                .map(|row| row.iter().map(|v| [v.x, v.y, v.z]).collect())
                .collect(),
            joint_names: m.joint_names,
        }
    }
}

impl Default for BodyModel {
    fn default() -> Self {
        Self::standard()
    }
}

impl BodyModel {
    pub fn new(
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vec3>,
        shape_basis: Vec<Vec<Vec3>>,
        joint_names: Vec<String>,
    ) -> Result<Self> {
        let j = parents.len();
        if j == 0 {
            return Err(Error::invalid("body model", "no joints"));
        }
        for (what, n) in [
            ("rest_offsets", rest_offsets.len()),
            ("shape_basis", shape_basis.len()),
            ("joint_names", joint_names.len()),
        ] {
            if n != j {
                return Err(Error::Dimension {
                    what,
                    expected: j,
                    actual: n,
                });
            }
        }
        if parents[0].is_some() || parents.iter().filter(|p| p.is_none()).count() != 1 {
            return Err(Error::invalid(
                "body model",
                "joint 0 must be the single root",
            ));
        }
        for (k, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < k => {}
                _ => {
                    return Err(Error::invalid(
                        "body model",
                        format!("parent of joint {k} must precede it"),
                    ))
                }
            }
        }
        if rest_offsets[0] != Vec3::zeros() {
            return Err(Error::invalid("body model", "root rest offset must be zero"));
        }
        let b = shape_basis[0].len();
        if let Some((k, row)) = shape_basis.iter().enumerate().find(|(_, r)| r.len() != b) {
            return Err(Error::invalid(
                "body model",
                format!("shape basis row {k} has {} dims, expected {b}", row.len()),
            ));
        }
        if rest_offsets
            .iter()
            .chain(shape_basis.iter().flatten())
            .any(|v| !v.iter().all(|c| c.is_finite()))
        {
            return Err(Error::invalid("body model", "non-finite offsets"));
        }

        let mut chains: Vec<Vec<usize>> = vec![Vec::new(); j];
        for k in 1..j {
            let p = parents[k].unwrap();
            let mut chain = chains[p].clone();
            if p != 0 {
                chain.push(p);
            }
            chains[k] = chain;
        }
        let mut descendants = vec![Vec::new(); j];
        for k in 1..j {
            let mut a = parents[k];
            while let Some(p) = a {
                descendants[p].push(k);
                a = parents[p];
            }
        }

        Ok(BodyModel {
            parents,
            rest_offsets,
            shape_basis,
            joint_names,
            descendants,
            chains,
        })
    }

    /// The 17-joint skeleton used throughout the crate. Shape dimension 0 is
    /// a global scale, dimension 1 trades limb length against torso length.
    pub fn standard() -> Self {
        use joints::*;
        let spec: [(&str, Option<usize>, [f64; 3]); DEFAULT_JOINT_COUNT] = [
            ("pelvis", None, [0.0, 0.0, 0.0]),
            ("spine", Some(PELVIS), [0.0, -0.20, 0.0]),
            ("thorax", Some(SPINE), [0.0, -0.25, 0.0]),
            ("neck", Some(THORAX), [0.0, -0.15, 0.0]),
            ("head", Some(NECK), [0.0, -0.15, 0.0]),
            ("l_shoulder", Some(THORAX), [0.18, -0.08, 0.0]),
            ("l_elbow", Some(L_SHOULDER), [0.05, 0.27, 0.0]),
            ("l_wrist", Some(L_ELBOW), [0.02, 0.25, 0.0]),
            ("r_shoulder", Some(THORAX), [-0.18, -0.08, 0.0]),
            ("r_elbow", Some(R_SHOULDER), [-0.05, 0.27, 0.0]),
            ("r_wrist", Some(R_ELBOW), [-0.02, 0.25, 0.0]),
            ("l_hip", Some(PELVIS), [0.10, 0.05, 0.0]),
            ("l_knee", Some(L_HIP), [0.0, 0.42, 0.0]),
            ("l_ankle", Some(L_KNEE), [0.0, 0.40, 0.0]),
            ("r_hip", Some(PELVIS), [-0.10, 0.05, 0.0]),
            ("r_knee", Some(R_HIP), [0.0, 0.42, 0.0]),
            ("r_ankle", Some(R_KNEE), [0.0, 0.40, 0.0]),
        ];
        let limbs = [
            L_ELBOW, L_WRIST, R_ELBOW, R_WRIST, L_KNEE, L_ANKLE, R_KNEE, R_ANKLE,
        ];
        let torso = [SPINE, THORAX, NECK, HEAD];
        let offsets: Vec<Vec3> = spec.iter().map(|s| Vec3::from(s.2)).collect();
        let basis = offsets
            .iter()
            .enumerate()
            .map(|(k, o)| {
                let ratio = if limbs.contains(&k) {
                    0.08
                } else if torso.contains(&k) {
                    -0.08
                } else {
                    0.0
                };
                vec![o * 0.1, o * ratio]
            })
            .collect();
        BodyModel::new(
            spec.iter().map(|s| s.1).collect(),
            offsets,
            basis,
            spec.iter().map(|s| s.0.to_string()).collect(),
        )
        .expect("standard skeleton is well formed")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis[0].len()
    }

    /// Length of the per-frame parameter block `(r_gl, t_gl, theta_b)`.
    pub fn frame_dim(&self) -> usize {
        6 + 3 * (self.joint_count() - 1)
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_offsets(&self) -> &[Vec3] {
        &self.rest_offsets
    }

    pub fn shape_basis(&self) -> &[Vec<Vec3>] {
        &self.shape_basis
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    /// Joints strictly below `j`.
    pub fn descendants(&self, j: usize) -> &[usize] {
        &self.descendants[j]
    }

    /// Non-root joints (bones) as `(parent, child)` pairs.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..self.joint_count()).map(move |k| (self.parents[k].unwrap(), k))
    }

    /// Bone vector of joint `j` (from its parent) for shape `beta`, in the
    /// parent's rotated frame.
    pub fn bone_offset(&self, j: usize, beta: &[f64]) -> Vec3 {
        let mut o = self.rest_offsets[j];
        for (b, basis) in beta.iter().zip(&self.shape_basis[j]) {
            o += basis * *b;
        }
        o
    }

    fn check_pose(&self, theta_b: &[Vec3], beta: &[f64]) -> Result<()> {
        if theta_b.len() != self.joint_count() - 1 {
            return Err(Error::Dimension {
                what: "theta_b",
                expected: self.joint_count() - 1,
                actual: theta_b.len(),
            });
        }
        if beta.len() != self.shape_dim() {
            return Err(Error::Dimension {
                what: "beta",
                expected: self.shape_dim(),
                actual: beta.len(),
            });
        }
        Ok(())
    }

    fn chain_state(&self, theta_b: &[Vec3], beta: &[f64]) -> ChainState {
        let j = self.joint_count();
        let mut local = vec![Mat3::identity(); j];
        let mut global = vec![Mat3::identity(); j];
        let mut pos = vec![Vec3::zeros(); j];
        for k in 1..j {
            let p = self.parents[k].unwrap();
            local[k] = rodrigues(&theta_b[k - 1]);
            global[k] = global[p] * local[k];
            pos[k] = pos[p] + global[p] * self.bone_offset(k, beta);
        }
        ChainState { local, global, pos }
    }
}

struct ChainState {
    local: Vec<Mat3>,
    global: Vec<Mat3>,
    pos: Vec<Vec3>,
}

/// Per-frame rigid and articulated pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameParams {
    /// Global orientation, axis-angle, radians.
    pub r_gl: Vec3,
    /// Root translation in the frame's camera coordinates, meters.
    pub t_gl: Vec3,
    /// Body pose, one axis-angle per non-root joint.
    pub theta_b: Vec<Vec3>,
}

impl FrameParams {
    /// Rest pose at the given root translation.
    pub fn rest(model: &BodyModel, t_gl: Vec3) -> Self {
        FrameParams {
            r_gl: Vec3::zeros(),
            t_gl,
            theta_b: vec![Vec3::zeros(); model.joint_count() - 1],
        }
    }

    /// Flat layout `[r_gl, t_gl, theta_b...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(6 + 3 * self.theta_b.len());
        self.write_to(&mut v);
        v
    }

    pub fn write_to(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.r_gl.as_slice());
        out.extend_from_slice(self.t_gl.as_slice());
        for th in &self.theta_b {
            out.extend_from_slice(th.as_slice());
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 6 || (v.len() - 6) % 3 != 0 {
            return Err(Error::invalid(
                "frame parameter vector",
                format!("length {} is not 6 + 3k", v.len()),
            ));
        }
        Ok(FrameParams {
            r_gl: Vec3::new(v[0], v[1], v[2]),
            t_gl: Vec3::new(v[3], v[4], v[5]),
            theta_b: v[6..]
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub beta: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros(dim: usize) -> Self {
        ShapeParams {
            beta: vec![0.0; dim],
        }
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from axis-angle to a rotation matrix.
pub fn rodrigues(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let k = skew(w);
    if theta < RODRIGUES_TAYLOR {
        return Mat3::identity() + k + k * k * 0.5;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Mat3::identity() + k * a + k * k * b
}

/// Partial derivatives of [`rodrigues`] with respect to each component of `w`.
pub fn rodrigues_derivatives(w: &Vec3) -> [Mat3; 3] {
    let theta2 = w.norm_squared();
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    if theta2.sqrt() < DERIVATIVE_TAYLOR {
        let kw = skew(w);
        return basis.map(|e| {
            let ke = skew(&e);
            ke + (ke * kw + kw * ke) * 0.5
        });
    }
    // Gallego & Yezzi: dR/dw_i = (w_i [w] + [w x (I - R) e_i]) R / |w|^2
    let r = rodrigues(w);
    let kw = skew(w);
    let i_minus_r = Mat3::identity() - r;
    let mut out = [Mat3::zeros(); 3];
    for (i, e) in basis.iter().enumerate() {
        let v = w.cross(&(i_minus_r * e));
        out[i] = (kw * w[i] + skew(&v)) * r / theta2;
    }
    out
}

/// Rotation matrix to axis-angle, angle in `[0, pi]`.
pub fn log_rotation(r: &Mat3) -> Vec3 {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    rot.scaled_axis()
}

/// Geodesic angle between two rotations given as axis-angle vectors.
pub fn geodesic_angle(a: &Vec3, b: &Vec3) -> f64 {
    let ra = rodrigues(a);
    let rb = rodrigues(b);
    log_rotation(&(ra.transpose() * rb)).norm()
}

/// Body-frame joints for pose `theta_b` and shape `beta`; root at the origin.
pub fn forward_kinematics(model: &BodyModel, theta_b: &[Vec3], beta: &[f64]) -> Result<Vec<Vec3>> {
    model.check_pose(theta_b, beta)?;
    Ok(model.chain_state(theta_b, beta).pos)
}

/// Rigidly places body-frame joints: `X = R(r_gl) X_b + t_gl`.
pub fn pose_joints(x_b: &[Vec3], r_gl: &Vec3, t_gl: &Vec3) -> Vec<Vec3> {
    let r = rodrigues(r_gl);
    x_b.iter().map(|p| r * p + t_gl).collect()
}

/// Undoes the global orientation: `X_can = R(r_gl)^T (X - X[root])`.
pub fn canonicalize(x: &[Vec3], r_gl: &Vec3) -> Vec<Vec3> {
    let rt = rodrigues(r_gl).transpose();
    let root = x[0];
    x.iter().map(|p| rt * (p - root)).collect()
}

/// Camera-frame joints for a full frame parameter set.
pub fn frame_joints(model: &BodyModel, frame: &FrameParams, beta: &[f64]) -> Result<Vec<Vec3>> {
    let xb = forward_kinematics(model, &frame.theta_b, beta)?;
    Ok(pose_joints(&xb, &frame.r_gl, &frame.t_gl))
}

/// Body-frame joints and their Jacobian with respect to `(theta_b, beta)`.
///
/// The Jacobian has `3J` rows (joint-major, xyz-minor) and `3(J-1) + B`
/// columns.
pub fn body_jacobian(
    model: &BodyModel,
    theta_b: &[Vec3],
    beta: &[f64],
) -> Result<(Vec<Vec3>, DMatrix<f64>)> {
    model.check_pose(theta_b, beta)?;
    let j = model.joint_count();
    let nb = model.shape_dim();
    let st = model.chain_state(theta_b, beta);
    let mut jac = DMatrix::zeros(3 * j, 3 * (j - 1) + nb);

    for jj in 1..j {
        let desc = model.descendants(jj);
        if desc.is_empty() {
            continue;
        }
        let gp = st.global[model.parents[jj].unwrap()];
        let dr = rodrigues_derivatives(&theta_b[jj - 1]);
        let back = st.local[jj].transpose() * gp.transpose();
        for (i, d) in dr.iter().enumerate() {
            let m = gp * d * back;
            let col = 3 * (jj - 1) + i;
            for &k in desc {
                let v = m * (st.pos[k] - st.pos[jj]);
                jac.fixed_view_mut::<3, 1>(3 * k, col).copy_from(&v);
            }
        }
    }

    for k in 1..j {
        for b in 0..nb {
            let mut v = Vec3::zeros();
            for &a in model.chains[k].iter().chain(std::iter::once(&k)) {
                let gp = st.global[model.parents[a].unwrap()];
                v += gp * model.shape_basis[a][b];
            }
            jac.fixed_view_mut::<3, 1>(3 * k, 3 * (j - 1) + b)
                .copy_from(&v);
        }
    }
    Ok((st.pos, jac))
}

/// Camera-frame joints and the Jacobian of `X` with respect to
/// `(r_gl, t_gl, theta_b, beta)`, shape `3J x (6 + 3(J-1) + B)`.
pub fn fk_jacobian(
    model: &BodyModel,
    frame: &FrameParams,
    beta: &[f64],
) -> Result<(Vec<Vec3>, DMatrix<f64>)> {
    let (xb, jb) = body_jacobian(model, &frame.theta_b, beta)?;
    let j = model.joint_count();
    let r = rodrigues(&frame.r_gl);
    let dr = rodrigues_derivatives(&frame.r_gl);
    let mut jac = DMatrix::zeros(3 * j, 6 + jb.ncols());
    let mut x = Vec::with_capacity(j);
    for k in 0..j {
        x.push(r * xb[k] + frame.t_gl);
        for (i, d) in dr.iter().enumerate() {
            jac.fixed_view_mut::<3, 1>(3 * k, i).copy_from(&(d * xb[k]));
        }
        jac.fixed_view_mut::<3, 3>(3 * k, 3)
            .copy_from(&Mat3::identity());
        let rows = r * jb.fixed_rows::<3>(3 * k);
        jac.view_mut((3 * k, 6), (3, jb.ncols())).copy_from(&rows);
    }
    Ok((x, jac))
}
