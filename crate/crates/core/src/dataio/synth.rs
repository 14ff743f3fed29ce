//! Procedural takes for five activity families.
//!
//! Each frame is built from targets (pelvis placement, ankle positions and
//! yaws, upper-body angles); legs are solved with two-link IK so planted
//! ankles sit exactly on their footholds. Feet stay flat.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::denoiser::synthetic_encoder;
use crate::error::{Error, Result};
use crate::se3::{
    exp_so3, forward_kinematics, log_so3, rot_x, rot_y, rot_z, Mat3, MotionSequence, PoseParams,
    Se3, Shape, Skeleton, Vec3, SHAPE_DIM,
};
use crate::tensor::Mat;

pub const TAKE_FPS: f64 = 10.0;
pub const MIN_TAKE_SECONDS: f64 = 8.0;
pub const IMAGE_DIM: usize = 64;

const ANKLE_HEIGHT: f64 = 0.04;
const L_HIP: usize = 1;
const R_HIP: usize = 2;
const SPINE: [usize; 3] = [3, 6, 9];
const NECK: usize = 12;
const HEAD: usize = 15;
const L_SHOULDER: usize = 16;
const R_SHOULDER: usize = 17;
const L_ELBOW: usize = 18;
const R_ELBOW: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activity {
    WalkLine,
    WalkCircle,
    SquatReach,
    Kick,
    ShootArc,
}

impl Activity {
    pub const ALL: [Activity; 5] = [
        Activity::WalkLine,
        Activity::WalkCircle,
        Activity::SquatReach,
        Activity::Kick,
        Activity::ShootArc,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown activity id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Activity::WalkLine => "walk-line",
            Activity::WalkCircle => "walk-circle",
            Activity::SquatReach => "squat-reach",
            Activity::Kick => "kick",
            Activity::ShootArc => "shoot-arc",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::Contract(format!("unknown activity '{name}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TakeRequest {
    pub scene_id: u32,
    pub activity: Activity,
    /// seconds
    pub duration: f64,
    pub seed: u64,
    /// Walking speed in m/s; drawn from the seed when absent.
    pub speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTake {
    pub scene_id: u32,
    pub activity: Activity,
    pub seed: u64,
    pub motion: MotionSequence,
    /// Device poses; the device frame is the head frame.
    pub trajectory: Vec<Se3>,
    /// `N x IMAGE_DIM` synthetic image features.
    pub features: Mat,
    /// Per frame, per foot joint (skeleton foot order): the generator held
    /// this joint fixed over the step ending at the frame.
    pub intended_plants: Vec<Vec<bool>>,
}

impl SyntheticTake {
    pub fn len(&self) -> usize {
        self.motion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motion.is_empty()
    }
}

pub fn generate_take(
    scene_id: u32,
    activity_id: u32,
    duration: f64,
    seed: u64,
    skel: &Skeleton,
) -> Result<SyntheticTake> {
    generate_take_with(
        &TakeRequest {
            scene_id,
            activity: Activity::from_id(activity_id)?,
            duration,
            seed,
            speed: None,
        },
        skel,
    )
}

/// Head transform composed with a fixed device calibration, per frame.
pub fn derive_device_trajectory(
    motion: &MotionSequence,
    skel: &Skeleton,
    calibration: &Se3,
) -> Result<Vec<Se3>> {
    motion
        .frames
        .iter()
        .map(|f| forward_kinematics(skel, f).map(|g| g[skel.head_index].compose(calibration)))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct FootState {
    ankle: Vec3,
    yaw: f64,
    /// Identifier of the foothold when locked on one.
    plant: Option<i64>,
}

#[derive(Debug, Clone)]
struct Targets {
    pelvis_xy: [f64; 2],
    pelvis_z: f64,
    root: Mat3,
    feet: [FootState; 2],
    /// Local rotations for upper-body joints, indexed by joint.
    upper: Vec<(usize, Mat3)>,
}

#[derive(Debug, Clone, Copy)]
struct Path {
    origin: [f64; 2],
    yaw0: f64,
    speed: f64,
    yaw_rate: f64,
}

impl Path {
    fn at(&self, t: f64) -> ([f64; 2], f64) {
        let yaw = self.yaw0 + self.yaw_rate * t;
        let (dx, dy) = if self.yaw_rate.abs() < 1e-9 {
            (self.speed * t * self.yaw0.cos(), self.speed * t * self.yaw0.sin())
        } else {
            let r = self.speed / self.yaw_rate;
            (r * (yaw.sin() - self.yaw0.sin()), -r * (yaw.cos() - self.yaw0.cos()))
        };
        ([self.origin[0] + dx, self.origin[1] + dy], yaw)
    }
}

fn lateral(yaw: f64) -> [f64; 2] {
    [-yaw.sin(), yaw.cos()]
}

fn forward(yaw: f64) -> [f64; 2] {
    [yaw.cos(), yaw.sin()]
}

fn blend_rot(a: &Mat3, b: &Mat3, w: f64) -> Mat3 {
    exp_so3(&(log_so3(a) * (1.0 - w) + log_so3(b) * w))
}

/// Look-around and posture parameters shared by all activities.
#[derive(Debug, Clone, Copy)]
struct Style {
    look_amp: f64,
    look_period: f64,
    look_phase: f64,
    pitch: f64,
    elbow: f64,
}

impl Style {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            look_amp: rng.random_range(0.1..0.35),
            look_period: rng.random_range(3.0..6.0),
            look_phase: rng.random_range(0.0..TAU),
            pitch: rng.random_range(0.05..0.25),
            elbow: rng.random_range(0.2..0.5),
        }
    }

    fn head(&self, t: f64, extra_pitch: f64) -> Vec<(usize, Mat3)> {
        let yaw = self.look_amp * (TAU * t / self.look_period + self.look_phase).sin();
        let pitch = self.pitch + 0.05 * (TAU * t / (0.7 * self.look_period)).sin() + extra_pitch;
        let half = rot_z(0.5 * yaw) * rot_y(0.5 * pitch);
        vec![(NECK, half), (HEAD, half)]
    }

    /// Shoulder and elbow rotations for arms hanging with a fore/aft swing.
    fn arms(&self, swing_left: f64, swing_right: f64) -> Vec<(usize, Mat3)> {
        vec![
            (L_SHOULDER, rot_y(swing_left) * rot_x(-1.25)),
            (R_SHOULDER, rot_y(swing_right) * rot_x(1.25)),
            (L_ELBOW, rot_z(-self.elbow)),
            (R_ELBOW, rot_z(self.elbow)),
        ]
    }
}

/// Schedules are counted in whole frames so every swing frame sits at a
/// fixed fraction of its swing.
trait Program {
    fn targets(&self, frame: i64) -> Targets;
}

fn seconds(frame: i64) -> f64 {
    frame as f64 / TAKE_FPS
}

struct Walk {
    path: Path,
    scale: f64,
    cycle: i64,
    swing: i64,
    offsets: [i64; 2],
    width: f64,
    lift: f64,
    arm_swing: f64,
    style: Style,
}

impl Walk {
    fn foothold(&self, side: usize, m: i64) -> FootState {
        let start = m * self.cycle + self.offsets[side] + self.swing;
        let (xy, yaw) = self.path.at(seconds(start) + 0.5 * seconds(self.cycle - self.swing));
        let n = lateral(yaw);
        let sign = if side == 0 { 1.0 } else { -1.0 };
        FootState {
            ankle: Vec3::new(
                xy[0] + sign * self.width * n[0],
                xy[1] + sign * self.width * n[1],
                ANKLE_HEIGHT * self.scale,
            ),
            yaw: yaw + sign * 0.05,
            plant: Some(m),
        }
    }

    fn foot(&self, side: usize, frame: i64) -> FootState {
        let u = frame - self.offsets[side];
        let m = u.div_euclid(self.cycle);
        let tau = u.rem_euclid(self.cycle);
        if tau > 0 && tau < self.swing {
            let s = tau as f64 / self.swing as f64;
            let a = self.foothold(side, m - 1);
            let b = self.foothold(side, m);
            let mut ankle = a.ankle * (1.0 - s) + b.ankle * s;
            ankle.z += self.lift * (PI * s).sin();
            FootState {
                ankle,
                yaw: a.yaw * (1.0 - s) + b.yaw * s,
                plant: None,
            }
        } else if tau == 0 {
            self.foothold(side, m - 1)
        } else {
            self.foothold(side, m)
        }
    }
}

impl Program for Walk {
    fn targets(&self, frame: i64) -> Targets {
        let t = seconds(frame);
        let (xy, yaw) = self.path.at(t);
        let phase = TAU * (frame - self.offsets[0]) as f64 / self.cycle as f64;
        let n = lateral(yaw);
        let sway = 0.02 * self.scale * phase.cos();
        let mut upper = self.style.head(t, 0.0);
        upper.extend(self.style.arms(self.arm_swing * phase.sin(), -self.arm_swing * phase.sin()));
        upper.push((SPINE[1], rot_z(-0.05 * phase.sin())));
        Targets {
            pelvis_xy: [xy[0] + sway * n[0], xy[1] + sway * n[1]],
            pelvis_z: 0.91 * self.scale,
            root: rot_z(yaw + 0.06 * phase.sin()),
            feet: [self.foot(0, frame), self.foot(1, frame)],
            upper,
        }
    }
}

/// Both feet fixed in place for the whole take.
fn planted_pair(origin: [f64; 2], yaw: f64, width: f64, scale: f64) -> [FootState; 2] {
    let n = lateral(yaw);
    let mk = |sign: f64| FootState {
        ankle: Vec3::new(
            origin[0] + sign * width * n[0],
            origin[1] + sign * width * n[1],
            ANKLE_HEIGHT * scale,
        ),
        yaw: yaw + sign * 0.1,
        plant: Some(0),
    };
    [mk(1.0), mk(-1.0)]
}

struct SquatReach {
    origin: [f64; 2],
    yaw: f64,
    scale: f64,
    width: f64,
    period: f64,
    phase: f64,
    depth: f64,
    style: Style,
}

impl Program for SquatReach {
    fn targets(&self, frame: i64) -> Targets {
        let t = seconds(frame);
        let d = 0.5 * (1.0 - (TAU * t / self.period + self.phase).cos());
        let f = forward(self.yaw);
        let back = 0.12 * self.scale * d;
        let mut upper = self.style.head(t, -0.3 * d);
        upper.extend(self.style.arms(0.0, 0.0));
        upper[3] = (R_SHOULDER, blend_rot(&rot_x(1.25), &rot_z(1.45), d));
        upper.push((SPINE[0], rot_y(0.15 * d)));
        Targets {
            pelvis_xy: [self.origin[0] - back * f[0], self.origin[1] - back * f[1]],
            pelvis_z: 0.91 * self.scale - self.depth * d,
            root: rot_z(self.yaw) * rot_y(0.35 * d),
            feet: planted_pair(self.origin, self.yaw, self.width, self.scale),
            upper,
        }
    }
}

struct Kick {
    origin: [f64; 2],
    yaw: f64,
    scale: f64,
    period: i64,
    duration: i64,
    offset: i64,
    reach: f64,
    lift: f64,
    style: Style,
}

impl Kick {
    fn kick_phase(&self, frame: i64) -> (i64, i64) {
        let u = frame - self.offset;
        (u.div_euclid(self.period), u.rem_euclid(self.period))
    }
}

impl Program for Kick {
    fn targets(&self, frame: i64) -> Targets {
        let t = seconds(frame);
        let [left, rest] = planted_pair(self.origin, self.yaw, 0.1 * self.scale, self.scale);
        let (m, tau) = self.kick_phase(frame);
        let f = forward(self.yaw);
        let (right, s) = if tau > 0 && tau < self.duration {
            let s = tau as f64 / self.duration as f64;
            let along = self.reach * (PI * s).sin() - 0.15 * self.scale * (TAU * s).sin();
            let ankle = rest.ankle
                + Vec3::new(f[0] * along, f[1] * along, self.lift * (PI * s).sin());
            (
                FootState {
                    ankle,
                    yaw: rest.yaw,
                    plant: None,
                },
                s,
            )
        } else {
            let id = if tau == 0 { m - 1 } else { m };
            (FootState { plant: Some(id), ..rest }, 0.0)
        };
        let n = lateral(self.yaw);
        let shift = 0.03 * self.scale;
        let bump = (PI * s).sin();
        let mut upper = self.style.head(t, 0.1 * bump);
        upper.extend(self.style.arms(0.3 * bump, -0.3 * bump));
        upper[2] = (L_SHOULDER, rot_y(0.3 * bump) * rot_x(-0.9));
        upper[3] = (R_SHOULDER, rot_y(-0.3 * bump) * rot_x(0.9));
        Targets {
            pelvis_xy: [self.origin[0] + shift * n[0], self.origin[1] + shift * n[1]],
            pelvis_z: 0.91 * self.scale,
            root: rot_z(self.yaw) * rot_y(-0.15 * bump),
            feet: [left, right],
            upper,
        }
    }
}

struct ShootArc {
    origin: [f64; 2],
    yaw: f64,
    scale: f64,
    width: f64,
    period: f64,
    offset: f64,
    dip: f64,
    style: Style,
}

impl Program for ShootArc {
    fn targets(&self, frame: i64) -> Targets {
        let t = seconds(frame);
        let u = (t - self.offset).rem_euclid(self.period) / self.period;
        let dip = if u < 0.45 { (PI * u / 0.45).sin().powi(2) } else { 0.0 };
        let raise = if (0.25..0.85).contains(&u) {
            (PI * (u - 0.25) / 0.6).sin().powi(2)
        } else {
            0.0
        };
        let mut upper = self.style.head(t, -0.35 * raise);
        upper.extend(self.style.arms(0.0, 0.0));
        upper[2] = (
            L_SHOULDER,
            blend_rot(&rot_x(-1.25), &(rot_z(-0.6) * rot_x(1.3)), raise),
        );
        upper[3] = (
            R_SHOULDER,
            blend_rot(&rot_x(1.25), &(rot_z(0.6) * rot_x(-1.3)), raise),
        );
        Targets {
            pelvis_xy: self.origin,
            pelvis_z: 0.91 * self.scale - self.dip * dip,
            root: rot_z(self.yaw) * rot_y(0.1 * dip),
            feet: planted_pair(self.origin, self.yaw, self.width, self.scale),
            upper,
        }
    }
}

/// Thigh and shank global rotations placing the ankle at `target`, knee
/// bending toward `fwd`. Unreachable targets are clamped to full extension.
fn leg_ik(hip: &Vec3, target: &Vec3, fwd: &Vec3, l1: f64, l2: f64) -> (Mat3, Mat3) {
    let d = target - hip;
    let dist = d.norm().clamp((l1 - l2).abs() + 1e-9, (l1 + l2) * (1.0 - 1e-12));
    let u = d / d.norm();
    let mut w = fwd - u * fwd.dot(&u);
    if w.norm() < 1e-9 {
        w = u.cross(&Vec3::z()).cross(&u);
    }
    let w = w.normalize();
    let cos_a = ((l1 * l1 + dist * dist - l2 * l2) / (2.0 * l1 * dist)).clamp(-1.0, 1.0);
    let sin_a = (1.0 - cos_a * cos_a).sqrt();
    let knee = hip + (u * cos_a + w * sin_a) * l1;
    let ankle = hip + u * dist;
    let frame = |down: Vec3| {
        let z = -down.normalize();
        let x = (w - z * w.dot(&z)).normalize();
        let y = z.cross(&x);
        Mat3::from_columns(&[x, y, z])
    };
    (frame(knee - hip), frame(ankle - knee))
}

fn solve_pose(skel: &Skeleton, targets: &Targets, shape: &Shape) -> PoseParams {
    let scale = Skeleton::limb_scale(shape);
    let l1 = skel.bind_offsets[4].norm() * scale;
    let l2 = skel.bind_offsets[7].norm() * scale;
    let reach = 0.995 * (l1 + l2);
    let r = targets.root;
    let hips = [L_HIP, R_HIP];

    let mut z = targets.pelvis_z;
    for (k, &hip) in hips.iter().enumerate() {
        let off = r * (skel.bind_offsets[hip] * scale);
        let a = targets.feet[k].ankle;
        let dx = targets.pelvis_xy[0] + off.x - a.x;
        let dy = targets.pelvis_xy[1] + off.y - a.y;
        let rh2 = dx * dx + dy * dy;
        if rh2 < reach * reach {
            z = z.min(a.z - off.z + (reach * reach - rh2).sqrt());
        }
    }
    let root_pos = Vec3::new(targets.pelvis_xy[0], targets.pelvis_xy[1], z);

    let mut local = vec![Mat3::identity(); skel.num_joints()];
    for &(j, m) in &targets.upper {
        local[j] = m;
    }
    for (k, &hip) in hips.iter().enumerate() {
        let knee = skel.foot_indices[k] - 3;
        let ankle = skel.foot_indices[k];
        let foot = &targets.feet[k];
        let hip_pos = root_pos + r * (skel.bind_offsets[hip] * scale);
        let fwd = Vec3::new(foot.yaw.cos(), foot.yaw.sin(), 0.0);
        let (thigh, shank) = leg_ik(&hip_pos, &foot.ankle, &fwd, l1, l2);
        local[hip] = r.transpose() * thigh;
        local[knee] = thigh.transpose() * shank;
        local[ankle] = shank.transpose() * rot_z(foot.yaw);
    }
    PoseParams {
        root_rotation: log_so3(&r),
        root_translation: root_pos,
        joint_angles: local[1..].iter().map(log_so3).collect(),
        shape: *shape,
    }
}

fn check_humanoid(skel: &Skeleton) -> Result<()> {
    let expected = Skeleton::humanoid22();
    if skel.parents != expected.parents || skel.foot_indices != expected.foot_indices {
        return Err(Error::Contract(format!(
            "synthetic takes need the humanoid22 topology, got '{}'",
            skel.id
        )));
    }
    Ok(())
}

fn take_rng(req: &TakeRequest) -> ChaCha8Rng {
    let mix = req
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((req.scene_id as u64) << 32)
        .wrapping_add(req.activity.id() as u64 + 1);
    ChaCha8Rng::seed_from_u64(mix)
}

pub fn generate_take_with(req: &TakeRequest, skel: &Skeleton) -> Result<SyntheticTake> {
    check_humanoid(skel)?;
    if !(req.duration >= MIN_TAKE_SECONDS) {
        return Err(Error::Contract(format!(
            "takes must last at least {MIN_TAKE_SECONDS} s, got {}",
            req.duration
        )));
    }
    let mut rng = take_rng(req);
    let normal = Normal::new(0.0, 0.5).unwrap();
    let mut shape: Shape = [0.0; SHAPE_DIM];
    for s in &mut shape {
        *s = normal.sample(&mut rng);
    }
    shape[0] = shape[0].clamp(-1.0, 1.0);
    let scale = Skeleton::limb_scale(&shape);
    let origin: [f64; 2] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    let yaw = rng.random_range(-PI..PI);
    let style = Style::draw(&mut rng);

    let program: Box<dyn Program> = match req.activity {
        Activity::WalkLine | Activity::WalkCircle => {
            let speed = req.speed.unwrap_or_else(|| rng.random_range(0.8..1.3));
            if !(speed > 0.0) {
                return Err(Error::Contract(format!("walking speed must be positive, got {speed}")));
            }
            let step = rng.random_range(0.34..0.42) * scale;
            let cycle = ((2.0 * step / speed * TAKE_FPS).round() as i64).max(4);
            let swing = ((0.4 * cycle as f64).round() as i64).max(2);
            let yaw_rate = if req.activity == Activity::WalkCircle {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.random_range(0.25..0.5)
            } else {
                0.0
            };
            let phase = rng.random_range(0..cycle);
            Box::new(Walk {
                path: Path {
                    origin,
                    yaw0: yaw,
                    speed,
                    yaw_rate,
                },
                scale,
                cycle,
                swing,
                offsets: [phase, phase + cycle / 2],
                width: rng.random_range(0.09..0.12) * scale,
                lift: rng.random_range(0.06..0.09) * scale,
                arm_swing: rng.random_range(0.2..0.4),
                style,
            })
        }
        Activity::SquatReach => Box::new(SquatReach {
            origin,
            yaw,
            scale,
            width: rng.random_range(0.1..0.14) * scale,
            period: rng.random_range(2.5..4.0),
            phase: rng.random_range(0.0..TAU),
            depth: rng.random_range(0.2..0.32) * scale,
            style,
        }),
        Activity::Kick => {
            let period = rng.random_range(20..30);
            Box::new(Kick {
                origin,
                yaw,
                scale,
                period,
                duration: rng.random_range(5..8),
                offset: rng.random_range(0..period),
                reach: rng.random_range(0.35..0.5) * scale,
                lift: rng.random_range(0.2..0.28) * scale,
                style,
            })
        }
        Activity::ShootArc => {
            let period = rng.random_range(2.2..3.2);
            Box::new(ShootArc {
                origin,
                yaw,
                scale,
                width: 0.11 * scale,
                period,
                offset: rng.random_range(0.0..period),
                dip: rng.random_range(0.08..0.15) * scale,
                style,
            })
        }
    };

    let n = (req.duration * TAKE_FPS).round() as usize;
    let mut frames = Vec::with_capacity(n);
    let mut locks: Vec<[Option<i64>; 2]> = Vec::with_capacity(n);
    for i in 0..n {
        let tg = program.targets(i as i64);
        locks.push([tg.feet[0].plant, tg.feet[1].plant]);
        frames.push(solve_pose(skel, &tg, &shape));
    }
    let motion = MotionSequence::new(frames, TAKE_FPS, skel.id.clone())?;
    let trajectory = derive_device_trajectory(&motion, skel, &Se3::identity())?;
    let mut features = Mat::zeros(n, IMAGE_DIM);
    for (i, head) in trajectory.iter().enumerate() {
        features
            .row_mut(i)
            .copy_from_slice(&synthetic_encoder(req.scene_id, req.activity.id(), head, IMAGE_DIM));
    }
    // Frame 0 has no predecessor; like the contact rule it borrows frame 1.
    let intended_plants = (0..n)
        .map(|i| {
            let (a, b) = if n < 2 { (0, 0) } else { (i.max(1) - 1, i.max(1)) };
            skel.foot_indices
                .iter()
                .enumerate()
                .map(|(k, _)| {
                    let side = k % 2;
                    matches!((locks[a][side], locks[b][side]), (Some(p), Some(q)) if p == q)
                })
                .collect()
        })
        .collect();
    Ok(SyntheticTake {
        scene_id: req.scene_id,
        activity: req.activity,
        seed: req.seed,
        motion,
        trajectory,
        features,
        intended_plants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repr::{decode, encode, foot_contact_labels, ContactThresholds, DecodeAnchor, anchor_from_head};
    use crate::se3::motion_positions;

    fn skel() -> Skeleton {
        Skeleton::humanoid22()
    }

    #[test]
    fn walk_line_covers_expected_distance() {
        let req = TakeRequest {
            scene_id: 0,
            activity: Activity::WalkLine,
            duration: 10.0,
            seed: 3,
            speed: Some(1.0),
        };
        let take = generate_take_with(&req, &skel()).unwrap();
        assert_eq!(take.len(), 100);
        let a = take.trajectory[0].translation;
        let b = take.trajectory[99].translation;
        let dist = ((b - a).xy()).norm();
        let expected = 99.0 / TAKE_FPS;
        assert!((dist - expected).abs() < 0.05 * expected, "{dist}");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_take(1, 3, 8.0, 11, &skel()).unwrap();
        let b = generate_take(1, 3, 8.0, 11, &skel()).unwrap();
        assert_eq!(a, b);
        let c = generate_take(1, 3, 8.0, 12, &skel()).unwrap();
        assert_ne!(a.motion, c.motion);
    }

    #[test]
    fn bad_requests() {
        assert!(generate_take(0, 9, 8.0, 0, &skel()).is_err());
        assert!(generate_take(0, 0, 7.9, 0, &skel()).is_err());
        assert!(generate_take(0, 0, 8.0, 0, &Skeleton::chain5()).is_err());
        assert!(Activity::from_name("dance").is_err());
        for a in Activity::ALL {
            assert_eq!(Activity::from_name(a.name()).unwrap(), a);
            assert_eq!(Activity::from_id(a.id()).unwrap(), a);
        }
    }

    #[test]
    fn every_activity_is_self_consistent() {
        let s = skel();
        for a in Activity::ALL {
            for seed in 0..3 {
                let take = generate_take(seed as u32, a.id(), 10.0, seed, &s).unwrap();
                assert_eq!(take.trajectory.len(), take.len());
                let pos = motion_positions(&s, &take.motion).unwrap();

                // Planted joints do not move.
                for i in 1..take.len() {
                    for (k, &f) in s.foot_indices.iter().enumerate() {
                        if take.intended_plants[i][k] {
                            let slide = (pos[i][f] - pos[i - 1][f]).norm();
                            assert!(slide < 1e-3, "{} frame {i} foot {k}: {slide}", a.name());
                        }
                    }
                }

                let labels = foot_contact_labels(&pos, take.motion.fps, &s.foot_indices, &ContactThresholds::default());
                let total = labels.len() * s.foot_indices.len();
                let agree: usize = labels
                    .iter()
                    .zip(&take.intended_plants)
                    .map(|(l, p)| l.iter().zip(p).filter(|(x, y)| x == y).count())
                    .sum();
                assert!(agree as f64 >= 0.99 * total as f64, "{}: {agree}/{total}", a.name());

                let feats = encode(&take.motion, &s, &ContactThresholds::default()).unwrap();
                let anchor: DecodeAnchor = anchor_from_head(&take.trajectory[0]).unwrap();
                let dec = decode(&feats, &anchor, &s, take.motion.fps, None).unwrap();
                let dp = dec.positions();
                for i in 0..take.len() {
                    for j in 0..s.num_joints() {
                        assert!((dp[i][j] - pos[i][j]).norm() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn calibration_offset_is_rotated() {
        let s = skel();
        let take = generate_take(0, 1, 8.0, 5, &s).unwrap();
        let off = Se3::from_translation(Vec3::new(0.05, 0.0, 0.0));
        let dev = derive_device_trajectory(&take.motion, &s, &off).unwrap();
        let id = derive_device_trajectory(&take.motion, &s, &Se3::identity()).unwrap();
        assert_eq!(id, take.trajectory);
        for (d, h) in dev.iter().zip(&id) {
            let expected = h.rotation * Vec3::new(0.05, 0.0, 0.0);
            assert!(((d.translation - h.translation) - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn heads_stay_upright() {
        let s = skel();
        for a in Activity::ALL {
            let take = generate_take(2, a.id(), 8.0, 9, &s).unwrap();
            for h in &take.trajectory {
                assert!(h.translation.z > 1.0 && h.translation.z < 2.0);
                assert!(h.rotation.column(0).z.abs() < 0.9);
            }
        }
    }
}
