//! Rigid transforms, rotation parameterizations and forward kinematics over
//! a tree-structured skeleton.
//!
//! World convention: right-handed, +Z up, floor at z = 0. Bodies face +X in
//! the bind pose, with +Y to their left.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Number of shape coefficients carried per pose.
pub const SHAPE_DIM: usize = 10;

pub type Shape = [f64; SHAPE_DIM];

/// Rigid transform `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3 {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Mat3::identity(), translation)
    }

    pub fn from_axis_angle(axis_angle: &Vec3, translation: Vec3) -> Self {
        Self::new(exp_so3(axis_angle), translation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3 {
        let rt = self.rotation.transpose();
        Se3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Orthonormality and determinant check at the given tolerance.
    pub fn is_valid(&self, tol: f64) -> bool {
        let should_be_identity = self.rotation.transpose() * self.rotation;
        let ortho = (should_be_identity - Mat3::identity()).abs().max() <= tol;
        ortho
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }
}

pub fn se3_compose(a: &Se3, b: &Se3) -> Se3 {
    a.compose(b)
}

pub fn se3_inverse(a: &Se3) -> Se3 {
    a.inverse()
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < 1e-16 {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Mat3::identity() + a * k + b * k * k
}

/// Axis-angle of a rotation matrix (angle in [0, π]).
pub fn log_so3(r: &Mat3) -> Vec3 {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

pub fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Angle of the relative rotation `aᵀ b`, in radians.
pub fn geodesic_distance(a: &Mat3, b: &Mat3) -> f64 {
    let rel = a.transpose() * b;
    // atan2 form stays accurate for tiny angles, where acos of the trace does not.
    let skew_part = Vec3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin_term = 0.5 * skew_part.norm();
    let cos_term = 0.5 * (rel.trace() - 1.0);
    sin_term.atan2(cos_term)
}

/// First two columns of `r`, column-major: `(r00, r10, r20, r01, r11, r21)`.
pub fn rot_to_6d(r: &Mat3) -> [f64; 6] {
    [
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]
}

/// Gram–Schmidt decode of a 6D rotation code.
pub fn rot_from_6d(v: &[f64]) -> Result<Mat3> {
    if v.len() != 6 {
        return Err(Error::Shape(format!("6D rotation needs 6 values, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("non-finite 6D rotation".into()));
    }
    let a1 = Vec3::new(v[0], v[1], v[2]);
    let a2 = Vec3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if n1 < 1e-12 {
        return Err(Error::Degenerate("zero first column in 6D rotation".into()));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if n2 < 1e-9 * a2.norm().max(1e-300) || n2 < 1e-12 {
        return Err(Error::Degenerate(
            "parallel or zero columns in 6D rotation".into(),
        ));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Mat3::from_columns(&[b1, b2, b3]))
}

/// Kinematic tree with joints stored in topological order (root first).
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub id: String,
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub bind_offsets: Vec<Vec3>,
    pub head_index: usize,
    pub pelvis_index: usize,
    pub foot_indices: Vec<usize>,
    pub hand_indices: Vec<usize>,
}

impl Skeleton {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        bind_offsets: Vec<Vec3>,
        head_index: usize,
        pelvis_index: usize,
        foot_indices: Vec<usize>,
        hand_indices: Vec<usize>,
    ) -> Result<Self> {
        let skel = Self {
            id: id.into(),
            joint_names,
            parents,
            bind_offsets,
            head_index,
            pelvis_index,
            foot_indices,
            hand_indices,
        };
        skel.validate()?;
        Ok(skel)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.parents.len();
        if n == 0 {
            return Err(Error::Contract("skeleton has no joints".into()));
        }
        if self.joint_names.len() != n || self.bind_offsets.len() != n {
            return Err(Error::Contract(format!(
                "skeleton arrays disagree: {} names, {} parents, {} offsets",
                self.joint_names.len(),
                n,
                self.bind_offsets.len()
            )));
        }
        if self.parents[0].is_some() {
            return Err(Error::Contract("joint 0 must be the root".into()));
        }
        for (i, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                None => return Err(Error::Contract(format!("joint {i} is a second root"))),
                Some(p) if *p >= i => {
                    return Err(Error::Contract(format!(
                        "joint {i} has parent {p}; parents must precede children"
                    )))
                }
                _ => {}
            }
        }
        let in_range = |idx: usize| idx < n;
        if !in_range(self.head_index) || !in_range(self.pelvis_index) {
            return Err(Error::Contract("head/pelvis index out of range".into()));
        }
        for &f in self.foot_indices.iter().chain(&self.hand_indices) {
            if !in_range(f) {
                return Err(Error::Contract(format!("role index {f} out of range")));
            }
        }
        if n >= 2 {
            if self.head_index == 0 {
                return Err(Error::Contract("head must not be the root".into()));
            }
            if self.foot_indices.iter().any(|&f| f == 0 || f == self.head_index) {
                return Err(Error::Contract(
                    "feet must be distinct from the root and the head".into(),
                ));
            }
        }
        if self.bind_offsets.iter().any(|o| o.iter().any(|v| !v.is_finite())) {
            return Err(Error::Contract("non-finite bind offset".into()));
        }
        Ok(())
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_feet(&self) -> usize {
        self.foot_indices.len()
    }

    /// Isotropic limb-length factor derived from the first shape coefficient.
    pub fn limb_scale(shape: &Shape) -> f64 {
        1.0 + 0.1 * shape[0]
    }

    /// Joints from the root down to `joint`, root first.
    pub fn chain_to(&self, joint: usize) -> Vec<usize> {
        let mut chain = vec![joint];
        let mut cur = joint;
        while let Some(p) = self.parents[cur] {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }

    /// Five-joint serial chain used in tests.
    pub fn chain5() -> Self {
        let names = ["base", "link1", "link2", "link3", "tip"];
        Self::new(
            "chain5",
            names.iter().map(|s| s.to_string()).collect(),
            vec![None, Some(0), Some(1), Some(2), Some(3)],
            vec![
                Vec3::zeros(),
                Vec3::new(0.0, 0.0, 0.3),
                Vec3::new(0.2, 0.0, 0.3),
                Vec3::new(0.0, 0.1, 0.3),
                Vec3::new(0.1, 0.0, 0.2),
            ],
            4,
            0,
            vec![1],
            vec![3],
        )
        .expect("chain5 is valid")
    }

    /// Pelvis-rooted body with 21 articulated joints (ankles, toes, wrists, head).
    pub fn humanoid22() -> Self {
        let spec: [(&str, Option<usize>, [f64; 3]); 22] = [
            ("pelvis", None, [0.0, 0.0, 0.0]),
            ("left_hip", Some(0), [0.0, 0.09, -0.08]),
            ("right_hip", Some(0), [0.0, -0.09, -0.08]),
            ("spine1", Some(0), [0.0, 0.0, 0.12]),
            ("left_knee", Some(1), [0.0, 0.0, -0.42]),
            ("right_knee", Some(2), [0.0, 0.0, -0.42]),
            ("spine2", Some(3), [0.0, 0.0, 0.14]),
            ("left_ankle", Some(4), [0.0, 0.0, -0.40]),
            ("right_ankle", Some(5), [0.0, 0.0, -0.40]),
            ("spine3", Some(6), [0.0, 0.0, 0.06]),
            ("left_foot", Some(7), [0.13, 0.0, -0.02]),
            ("right_foot", Some(8), [0.13, 0.0, -0.02]),
            ("neck", Some(9), [0.0, 0.0, 0.21]),
            ("left_collar", Some(9), [0.0, 0.07, 0.15]),
            ("right_collar", Some(9), [0.0, -0.07, 0.15]),
            ("head", Some(12), [0.02, 0.0, 0.10]),
            ("left_shoulder", Some(13), [0.0, 0.11, 0.02]),
            ("right_shoulder", Some(14), [0.0, -0.11, 0.02]),
            ("left_elbow", Some(16), [0.0, 0.27, 0.0]),
            ("right_elbow", Some(17), [0.0, -0.27, 0.0]),
            ("left_wrist", Some(18), [0.0, 0.25, 0.0]),
            ("right_wrist", Some(19), [0.0, -0.25, 0.0]),
        ];
        Self::new(
            "humanoid22",
            spec.iter().map(|s| s.0.to_string()).collect(),
            spec.iter().map(|s| s.1).collect(),
            spec.iter().map(|s| Vec3::new(s.2[0], s.2[1], s.2[2])).collect(),
            15,
            0,
            vec![7, 8, 10, 11],
            vec![20, 21],
        )
        .expect("humanoid22 is valid")
    }

    pub fn by_id(id: &str) -> Option<Self> {
        match id {
            "chain5" => Some(Self::chain5()),
            "humanoid22" => Some(Self::humanoid22()),
            _ => None,
        }
    }
}

/// Root transform, local joint angles and shape for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    pub root_rotation: Vec3,
    pub root_translation: Vec3,
    /// One axis-angle per non-root joint, in joint order.
    pub joint_angles: Vec<Vec3>,
    pub shape: Shape,
}

impl PoseParams {
    pub fn zero(skel: &Skeleton) -> Self {
        Self {
            root_rotation: Vec3::zeros(),
            root_translation: Vec3::zeros(),
            joint_angles: vec![Vec3::zeros(); skel.num_joints() - 1],
            shape: [0.0; SHAPE_DIM],
        }
    }

    pub fn check(&self, skel: &Skeleton) -> Result<()> {
        if self.joint_angles.len() + 1 != skel.num_joints() {
            return Err(Error::Contract(format!(
                "pose has {} joint angles, skeleton '{}' expects {}",
                self.joint_angles.len(),
                skel.id,
                skel.num_joints() - 1
            )));
        }
        let finite = self.root_rotation.iter().all(|v| v.is_finite())
            && self.root_translation.iter().all(|v| v.is_finite())
            && self.joint_angles.iter().flat_map(|a| a.iter()).all(|v| v.is_finite())
            && self.shape.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Contract("pose contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn root(&self) -> Se3 {
        Se3::from_axis_angle(&self.root_rotation, self.root_translation)
    }

    /// Flattened `[root_rotation, root_translation, joint_angles...]` (shape excluded).
    pub fn pose_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(6 + 3 * self.joint_angles.len());
        v.extend(self.root_rotation.iter());
        v.extend(self.root_translation.iter());
        for a in &self.joint_angles {
            v.extend(a.iter());
        }
        v
    }

    pub fn set_pose_vector(&mut self, v: &[f64]) {
        self.root_rotation = Vec3::new(v[0], v[1], v[2]);
        self.root_translation = Vec3::new(v[3], v[4], v[5]);
        for (j, a) in self.joint_angles.iter_mut().enumerate() {
            *a = Vec3::new(v[6 + 3 * j], v[7 + 3 * j], v[8 + 3 * j]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<PoseParams>,
    pub fps: f64,
    pub skeleton_id: String,
}

impl MotionSequence {
    pub fn new(frames: Vec<PoseParams>, fps: f64, skeleton_id: impl Into<String>) -> Result<Self> {
        let m = Self {
            frames,
            fps,
            skeleton_id: skeleton_id.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Contract("motion has no frames".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Contract(format!("fps must be positive, got {}", self.fps)));
        }
        let shape = self.frames[0].shape;
        if self.frames.iter().any(|f| f.shape != shape) {
            return Err(Error::Contract("frames do not share one shape vector".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.frames[0].shape
    }

    /// Applies a rigid transform to every root, i.e. moves the whole motion.
    pub fn transformed(&self, g: &Se3) -> Self {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let root = g.compose(&f.root());
                PoseParams {
                    root_rotation: log_so3(&root.rotation),
                    root_translation: root.translation,
                    joint_angles: f.joint_angles.clone(),
                    shape: f.shape,
                }
            })
            .collect();
        Self {
            frames,
            fps: self.fps,
            skeleton_id: self.skeleton_id.clone(),
        }
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn window(&self, start: usize, end: usize) -> Self {
        Self {
            frames: self.frames[start..end].to_vec(),
            fps: self.fps,
            skeleton_id: self.skeleton_id.clone(),
        }
    }
}

/// Global joint transforms from a root transform, per-joint local rotations
/// (index 0 unused) and a limb-length scale.
pub fn fk_from_rotations(skel: &Skeleton, root: &Se3, local: &[Mat3], scale: f64) -> Vec<Se3> {
    let n = skel.num_joints();
    let mut out = Vec::with_capacity(n);
    out.push(*root);
    for j in 1..n {
        let parent = out[skel.parents[j].expect("non-root joint has a parent")];
        let local_tf = Se3::new(local[j], skel.bind_offsets[j] * scale);
        out.push(parent.compose(&local_tf));
    }
    out
}

pub fn forward_kinematics(skel: &Skeleton, pose: &PoseParams) -> Result<Vec<Se3>> {
    pose.check(skel)?;
    let mut local = Vec::with_capacity(skel.num_joints());
    local.push(Mat3::identity());
    local.extend(pose.joint_angles.iter().map(exp_so3));
    Ok(fk_from_rotations(
        skel,
        &pose.root(),
        &local,
        Skeleton::limb_scale(&pose.shape),
    ))
}

pub fn joint_positions(transforms: &[Se3]) -> Vec<Vec3> {
    transforms.iter().map(|t| t.translation).collect()
}

/// Joint positions for every frame of a motion.
pub fn motion_positions(skel: &Skeleton, motion: &MotionSequence) -> Result<Vec<Vec<Vec3>>> {
    motion
        .frames
        .iter()
        .map(|f| forward_kinematics(skel, f).map(|t| joint_positions(&t)))
        .collect()
}
