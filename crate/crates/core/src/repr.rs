//! Head-centric canonicalized motion features.
//!
//! Every frame is expressed relative to a floor-projected, yaw-only frame
//! derived from the head transform. The planar trajectory is carried as a
//! residual between consecutive canonical frames, so the feature sequence
//! is invariant to where the motion happens on the floor and which way it
//! faces. Per-frame row layout:
//!
//! | block        | width    | content                                         |
//! |--------------|----------|-------------------------------------------------|
//! | residual     | 4        | `cos Δψ, sin Δψ, Δx, Δy` of `c_{i-1}⁻¹ ∘ c_i`   |
//! | head height  | 1        | head `z` above the floor                        |
//! | head rot     | 6        | canonicalized head rotation (6D)                |
//! | joint rots   | 6(J−1)   | canonicalized global rotations, head excluded   |
//! | joint pos    | 3J       | canonicalized joint positions                   |
//! | contacts     | F        | foot contact labels                             |
//! | shape        | 10       | shape coefficients                              |

use std::f64::consts::FRAC_PI_2;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{
    fk_from_rotations, forward_kinematics, log_so3, rot_from_6d, rot_to_6d, rot_z, Mat3,
    MotionSequence, PoseParams, Se3, Shape, Skeleton, Vec3, SHAPE_DIM,
};
use crate::tensor::Mat;

/// Yaw-only frame on the floor plane.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CanonicalFrame {
    pub yaw: f64,
    pub xy: [f64; 2],
}

impl CanonicalFrame {
    pub fn new(yaw: f64, x: f64, y: f64) -> Self {
        Self { yaw, xy: [x, y] }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn to_se3(&self) -> Se3 {
        Se3::new(rot_z(self.yaw), Vec3::new(self.xy[0], self.xy[1], 0.0))
    }

    /// `self ∘ other` for planar rigid transforms.
    pub fn compose(&self, other: &CanonicalFrame) -> CanonicalFrame {
        let (s, c) = self.yaw.sin_cos();
        CanonicalFrame {
            yaw: self.yaw + other.yaw,
            xy: [
                c * other.xy[0] - s * other.xy[1] + self.xy[0],
                s * other.xy[0] + c * other.xy[1] + self.xy[1],
            ],
        }
    }

    pub fn inverse(&self) -> CanonicalFrame {
        let (s, c) = self.yaw.sin_cos();
        CanonicalFrame {
            yaw: -self.yaw,
            xy: [
                -(c * self.xy[0] + s * self.xy[1]),
                -(-s * self.xy[0] + c * self.xy[1]),
            ],
        }
    }

    /// Expresses a world-space transform in this frame: `self⁻¹ ∘ t`.
    ///
    /// Written out explicitly so a point lying exactly on the frame's vertical
    /// axis maps to exactly `(0, 0, z)`.
    pub fn localize(&self, t: &Se3) -> Se3 {
        let rz_t = rot_z(self.yaw).transpose();
        let d = Vec3::new(t.translation.x - self.xy[0], t.translation.y - self.xy[1], t.translation.z);
        Se3::new(rz_t * t.rotation, rz_t * d)
    }

    pub fn localize_point(&self, p: &Vec3) -> Vec3 {
        let rz_t = rot_z(self.yaw).transpose();
        rz_t * Vec3::new(p.x - self.xy[0], p.y - self.xy[1], p.z)
    }
}

/// World placement of the first decoded frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecodeAnchor(pub CanonicalFrame);

/// Floor-projection norm below which the forward axis is treated as vertical.
pub fn degenerate_yaw_threshold() -> f64 {
    1f64.to_radians().sin()
}

/// Canonical frame of a head transform: yaw of the forward (+X) axis
/// projected on the floor, and the head's floor position.
pub fn canonicalize_frame(head: &Se3) -> Result<CanonicalFrame> {
    let fwd = head.rotation.column(0);
    if fwd.x.hypot(fwd.y) < degenerate_yaw_threshold() {
        return Err(Error::Degenerate(
            "head forward axis within 1 degree of vertical".into(),
        ));
    }
    Ok(CanonicalFrame::new(
        fwd.y.atan2(fwd.x),
        head.translation.x,
        head.translation.y,
    ))
}

/// Canonicalization with the documented fallbacks: the previous frame's yaw
/// when available, otherwise the lateral (+Y) axis.
pub fn canonicalize_with_fallback(head: &Se3, previous_yaw: Option<f64>) -> Result<CanonicalFrame> {
    match canonicalize_frame(head) {
        Ok(c) => Ok(c),
        Err(_) => {
            let (x, y) = (head.translation.x, head.translation.y);
            if let Some(yaw) = previous_yaw {
                return Ok(CanonicalFrame::new(yaw, x, y));
            }
            let lat = head.rotation.column(1);
            if lat.x.hypot(lat.y) < degenerate_yaw_threshold() {
                return Err(Error::Degenerate(
                    "head forward and lateral axes both vertical".into(),
                ));
            }
            Ok(CanonicalFrame::new(lat.y.atan2(lat.x) - FRAC_PI_2, x, y))
        }
    }
}

/// Height and speed thresholds of the foot-contact rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactThresholds {
    /// meters
    pub height: f64,
    /// meters per second
    pub speed: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        Self {
            height: 0.05,
            speed: 0.15,
        }
    }
}

/// A foot joint is in contact when it is below the height threshold and
/// slower than the speed threshold. Frame 0 borrows frame 1's speed.
pub fn foot_contact_labels(
    positions: &[Vec<Vec3>],
    fps: f64,
    foot_indices: &[usize],
    thresholds: &ContactThresholds,
) -> Vec<Vec<bool>> {
    let n = positions.len();
    let speed = |i: usize, f: usize| -> f64 {
        if n < 2 {
            return 0.0;
        }
        let i = i.max(1);
        (positions[i][f] - positions[i - 1][f]).norm() * fps
    };
    (0..n)
        .map(|i| {
            foot_indices
                .iter()
                .map(|&f| positions[i][f].z < thresholds.height && speed(i, f) < thresholds.speed)
                .collect()
        })
        .collect()
}

/// Column layout of a feature row for a given skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub num_joints: usize,
    pub num_feet: usize,
}

impl FeatureLayout {
    pub const RESIDUAL: Range<usize> = 0..4;
    pub const HEAD_HEIGHT: usize = 4;
    pub const HEAD_ROT: Range<usize> = 5..11;

    pub fn for_skeleton(skel: &Skeleton) -> Self {
        Self {
            num_joints: skel.num_joints(),
            num_feet: skel.num_feet(),
        }
    }

    pub fn width(&self) -> usize {
        4 + 1 + 6 + 6 * (self.num_joints - 1) + 3 * self.num_joints + self.num_feet + SHAPE_DIM
    }

    pub fn joint_rot(&self) -> Range<usize> {
        11..11 + 6 * (self.num_joints - 1)
    }

    pub fn joint_pos(&self) -> Range<usize> {
        let s = self.joint_rot().end;
        s..s + 3 * self.num_joints
    }

    pub fn contacts(&self) -> Range<usize> {
        let s = self.joint_pos().end;
        s..s + self.num_feet
    }

    pub fn shape(&self) -> Range<usize> {
        let s = self.contacts().end;
        s..s + SHAPE_DIM
    }
}

/// Feature width `D` for a skeleton.
pub fn feature_width(skel: &Skeleton) -> usize {
    FeatureLayout::for_skeleton(skel).width()
}

/// `N x D` feature matrix plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCentricFeatures {
    pub layout: FeatureLayout,
    pub values: Mat,
}

impl HeadCentricFeatures {
    pub fn new(layout: FeatureLayout, values: Mat) -> Result<Self> {
        if values.cols() != layout.width() {
            return Err(Error::Shape(format!(
                "feature width {} does not match layout width {}",
                values.cols(),
                layout.width()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn num_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn joint_positions(&self, frame: usize) -> Vec<Vec3> {
        let r = &self.values.row(frame)[self.layout.joint_pos()];
        r.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
    }

    pub fn contacts(&self, frame: usize) -> &[f64] {
        &self.values.row(frame)[self.layout.contacts()]
    }
}

/// Joints other than the head, in index order; these own the joint-rotation block.
pub(crate) fn non_head_joints(skel: &Skeleton) -> impl Iterator<Item = usize> + '_ {
    (0..skel.num_joints()).filter(move |&j| j != skel.head_index)
}

/// Canonical frames of every frame's head, with fallbacks applied.
pub fn canonical_frames(heads: &[Se3]) -> Result<Vec<CanonicalFrame>> {
    let mut out: Vec<CanonicalFrame> = Vec::with_capacity(heads.len());
    for h in heads {
        let prev = out.last().map(|c| c.yaw);
        out.push(canonicalize_with_fallback(h, prev)?);
    }
    Ok(out)
}

pub(crate) fn residual_row(prev: &CanonicalFrame, cur: &CanonicalFrame) -> [f64; 4] {
    let r = prev.inverse().compose(cur);
    [r.yaw.cos(), r.yaw.sin(), r.xy[0], r.xy[1]]
}

pub fn encode(
    motion: &MotionSequence,
    skel: &Skeleton,
    thresholds: &ContactThresholds,
) -> Result<HeadCentricFeatures> {
    motion.validate()?;
    let layout = FeatureLayout::for_skeleton(skel);
    let globals: Vec<Vec<Se3>> = motion
        .frames
        .iter()
        .map(|f| forward_kinematics(skel, f))
        .collect::<Result<_>>()?;
    let heads: Vec<Se3> = globals.iter().map(|g| g[skel.head_index]).collect();
    let frames = canonical_frames(&heads)?;
    let positions: Vec<Vec<Vec3>> = globals
        .iter()
        .map(|g| g.iter().map(|t| t.translation).collect())
        .collect();
    let contacts = foot_contact_labels(&positions, motion.fps, &skel.foot_indices, thresholds);

    let mut values = Mat::zeros(motion.len(), layout.width());
    for (i, g) in globals.iter().enumerate() {
        let c = &frames[i];
        let row = values.row_mut(i);
        let res = if i == 0 {
            [1.0, 0.0, 0.0, 0.0]
        } else {
            residual_row(&frames[i - 1], c)
        };
        row[FeatureLayout::RESIDUAL].copy_from_slice(&res);
        let head = c.localize(&g[skel.head_index]);
        row[FeatureLayout::HEAD_HEIGHT] = head.translation.z;
        row[FeatureLayout::HEAD_ROT].copy_from_slice(&rot_to_6d(&head.rotation));
        let rot_start = layout.joint_rot().start;
        for (k, j) in non_head_joints(skel).enumerate() {
            let local = c.localize(&g[j]);
            row[rot_start + 6 * k..rot_start + 6 * k + 6].copy_from_slice(&rot_to_6d(&local.rotation));
        }
        let pos_start = layout.joint_pos().start;
        for (j, t) in g.iter().enumerate() {
            let p = c.localize_point(&t.translation);
            row[pos_start + 3 * j..pos_start + 3 * j + 3].copy_from_slice(p.as_slice());
        }
        let cstart = layout.contacts().start;
        for (k, &flag) in contacts[i].iter().enumerate() {
            row[cstart + k] = if flag { 1.0 } else { 0.0 };
        }
        row[layout.shape()].copy_from_slice(&motion.frames[i].shape);
    }
    HeadCentricFeatures::new(layout, values)
}

/// Projects raw (possibly denoised) features back onto the valid set:
/// unit residual heading, orthonormal 6D rotations, binary contacts.
pub fn sanitize(features: &HeadCentricFeatures) -> Result<HeadCentricFeatures> {
    let layout = features.layout;
    if !features.values.all_finite() {
        return Err(Error::Degenerate("non-finite features".into()));
    }
    let mut out = features.values.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let (c, s) = (row[0], row[1]);
        let n = c.hypot(s);
        if n > 1e-12 {
            row[0] = c / n;
            row[1] = s / n;
        } else {
            row[0] = 1.0;
            row[1] = 0.0;
        }
        let mut fix_rot = |r: Range<usize>| {
            let m = rot_from_6d(&row[r.clone()]).unwrap_or_else(|_| Mat3::identity());
            row[r].copy_from_slice(&rot_to_6d(&m));
        };
        fix_rot(FeatureLayout::HEAD_ROT);
        let start = layout.joint_rot().start;
        for k in 0..layout.num_joints - 1 {
            fix_rot(start + 6 * k..start + 6 * k + 6);
        }
        for c in layout.contacts() {
            row[c] = if row[c] >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    HeadCentricFeatures::new(layout, out)
}

#[derive(Debug, Clone)]
pub struct DecodedMotion {
    /// Per frame, per joint global transforms.
    pub transforms: Vec<Vec<Se3>>,
    pub motion: MotionSequence,
    pub canonical: Vec<CanonicalFrame>,
}

impl DecodedMotion {
    pub fn positions(&self) -> Vec<Vec<Vec3>> {
        self.transforms
            .iter()
            .map(|f| f.iter().map(|t| t.translation).collect())
            .collect()
    }

    pub fn heads(&self, skel: &Skeleton) -> Vec<Se3> {
        self.transforms.iter().map(|f| f[skel.head_index]).collect()
    }
}

/// Inverse of [`encode`]. Rotations plus forward kinematics are authoritative;
/// the position block is ignored. The sequence shape is the mean of the
/// per-frame shape rows unless `shape_override` is given.
pub fn decode(
    features: &HeadCentricFeatures,
    anchor: &DecodeAnchor,
    skel: &Skeleton,
    fps: f64,
    shape_override: Option<Shape>,
) -> Result<DecodedMotion> {
    let layout = FeatureLayout::for_skeleton(skel);
    if features.layout != layout {
        return Err(Error::Shape(format!(
            "features built for {} joints / {} feet, skeleton '{}' has {} / {}",
            features.layout.num_joints,
            features.layout.num_feet,
            skel.id,
            layout.num_joints,
            layout.num_feet
        )));
    }
    let n = features.num_frames();
    if n == 0 {
        return Err(Error::Contract("no frames to decode".into()));
    }
    let clean = sanitize(features)?;
    let v = &clean.values;

    let shape = shape_override.unwrap_or_else(|| mean_shape(v, &layout));
    let scale = Skeleton::limb_scale(&shape);

    let mut canonical = Vec::with_capacity(n);
    let mut transforms = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let row = v.row(i);
        let c = if i == 0 {
            anchor.0
        } else {
            let res = CanonicalFrame::new(row[1].atan2(row[0]), row[2], row[3]);
            canonical.last().map(|p: &CanonicalFrame| p.compose(&res)).unwrap()
        };
        let cse3 = c.to_se3();

        let mut global_rot = vec![Mat3::identity(); skel.num_joints()];
        global_rot[skel.head_index] = cse3.rotation * rot_from_6d(&row[FeatureLayout::HEAD_ROT])?;
        let rs = layout.joint_rot().start;
        for (k, j) in non_head_joints(skel).enumerate() {
            global_rot[j] = cse3.rotation * rot_from_6d(&row[rs + 6 * k..rs + 6 * k + 6])?;
        }
        let mut local = vec![Mat3::identity(); skel.num_joints()];
        for j in 1..skel.num_joints() {
            let p = skel.parents[j].unwrap();
            local[j] = global_rot[p].transpose() * global_rot[j];
        }
        // Head position is exactly (0, 0, h) in the canonical frame; walk the
        // chain back down to find the root.
        let head_world = cse3.transform_point(&Vec3::new(0.0, 0.0, row[FeatureLayout::HEAD_HEIGHT]));
        let mut root_pos = head_world;
        for &j in skel.chain_to(skel.head_index).iter().skip(1) {
            let p = skel.parents[j].unwrap();
            root_pos -= global_rot[p] * (skel.bind_offsets[j] * scale);
        }
        let root = Se3::new(global_rot[0], root_pos);
        let tfs = fk_from_rotations(skel, &root, &local, scale);

        frames.push(PoseParams {
            root_rotation: log_so3(&root.rotation),
            root_translation: root.translation,
            joint_angles: local[1..].iter().map(log_so3).collect(),
            shape,
        });
        transforms.push(tfs);
        canonical.push(c);
    }
    Ok(DecodedMotion {
        transforms,
        motion: MotionSequence::new(frames, fps, skel.id.clone())?,
        canonical,
    })
}

/// Mean of the shape block over all frames.
pub fn mean_shape(values: &Mat, layout: &FeatureLayout) -> Shape {
    let mut shape = [0.0; SHAPE_DIM];
    let range = layout.shape();
    for i in 0..values.rows() {
        for (s, v) in shape.iter_mut().zip(&values.row(i)[range.clone()]) {
            *s += v;
        }
    }
    for s in &mut shape {
        *s /= values.rows() as f64;
    }
    shape
}

/// Anchor that reproduces the placement of a motion whose first head pose is `head`.
pub fn anchor_from_head(head: &Se3) -> Result<DecodeAnchor> {
    Ok(DecodeAnchor(canonicalize_with_fallback(head, None)?))
}

/// Device poses re-expressed in the canonical frame of the first pose:
/// `N x 9` rows of `[rot6d, translation]`.
pub fn trajectory_tokens(traj: &[Se3]) -> Result<Mat> {
    if traj.is_empty() {
        return Ok(Mat::zeros(0, 9));
    }
    let c0 = canonicalize_with_fallback(&traj[0], None)?;
    let mut m = Mat::zeros(traj.len(), 9);
    for (i, t) in traj.iter().enumerate() {
        let l = c0.localize(t);
        let row = m.row_mut(i);
        row[..6].copy_from_slice(&rot_to_6d(&l.rotation));
        row[6..].copy_from_slice(l.translation.as_slice());
    }
    Ok(m)
}
