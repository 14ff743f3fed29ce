//! Multi-view robust fitting of skeleton parameters to 2D keypoints,
//! sequence refinement with a temporal penalty, and jitter filtering.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{
    exp_so3, fk_from_rotations, log_so3, skew, Mat3, MotionSequence, PoseParams, Se3, Shape,
    Skeleton, Vec3, SHAPE_DIM,
};

/// Pinhole camera; the extrinsic maps world points into the camera frame
/// (x right, y down, z along the optical axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraView {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, axis-angle.
    pub rotation: [f64; 3],
    /// World-to-camera translation, meters.
    pub translation: [f64; 3],
}

impl CameraView {
    pub fn new(name: impl Into<String>, fx: f64, fy: f64, cx: f64, cy: f64, extrinsic: &Se3) -> Result<Self> {
        let w = log_so3(&extrinsic.rotation);
        let v = Self {
            name: name.into(),
            fx,
            fy,
            cx,
            cy,
            rotation: [w.x, w.y, w.z],
            translation: [extrinsic.translation.x, extrinsic.translation.y, extrinsic.translation.z],
        };
        v.validate()?;
        Ok(v)
    }

    pub fn extrinsic(&self) -> Se3 {
        Se3::from_axis_angle(&Vec3::from(self.rotation), Vec3::from(self.translation))
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .chain(&self.rotation)
            .chain(&self.translation)
            .all(|v| v.is_finite());
        if !finite || !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(Error::Contract(format!(
                "camera '{}' needs finite values and positive focal lengths",
                self.name
            )));
        }
        Ok(())
    }
}

/// Smallest camera-frame depth accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-6;

pub fn project(view: &CameraView, p: &Vec3) -> Result<[f64; 2]> {
    let c = view.extrinsic().transform_point(p);
    if c.z <= MIN_DEPTH {
        return Err(Error::Degenerate(format!("point behind camera '{}'", view.name)));
    }
    Ok([view.fx * c.x / c.z + view.cx, view.fy * c.y / c.z + view.cy])
}

pub fn geman_mcclure(residual: f64, rho: f64) -> f64 {
    let r2 = residual * residual;
    r2 / (r2 + rho * rho)
}

/// `n` cameras on a circle of `radius` around the origin at `height`,
/// all looking at `(0, 0, height)`. 1280x960 images, 1000 px focal length.
pub fn synthetic_rig(n: usize, radius: f64, height: f64) -> Vec<CameraView> {
    (0..n)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / n as f64 + 0.3;
            let pos = Vec3::new(radius * a.cos(), radius * a.sin(), height);
            let z = (Vec3::new(0.0, 0.0, height) - pos).normalize();
            let x = z.cross(&Vec3::z()).normalize();
            let y = z.cross(&x);
            let r = Mat3::from_columns(&[x, y, z]).transpose();
            CameraView::new(format!("cam{k}"), 1000.0, 1000.0, 640.0, 480.0, &Se3::new(r, -(r * pos)))
                .expect("synthetic camera is valid")
        })
        .collect()
}

/// Keypoints of one frame: per view, per joint pixel and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameKeypoints {
    pub points: Vec<Vec<[f64; 2]>>,
    pub confidence: Vec<Vec<f64>>,
}

/// Per view, per frame, per joint observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2D {
    pub points: Vec<Vec<Vec<[f64; 2]>>>,
    pub confidence: Vec<Vec<Vec<f64>>>,
}

impl Keypoints2D {
    pub fn num_views(&self) -> usize {
        self.points.len()
    }

    pub fn num_frames(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        let n = self.num_frames();
        if self.confidence.len() != self.points.len() {
            return Err(Error::Shape("confidence and points disagree on views".into()));
        }
        for (pv, cv) in self.points.iter().zip(&self.confidence) {
            if pv.len() != n || cv.len() != n {
                return Err(Error::Shape("views disagree on frame count".into()));
            }
            for (pf, cf) in pv.iter().zip(cv) {
                if pf.len() != joints || cf.len() != joints {
                    return Err(Error::Shape(format!("expected {joints} keypoints per frame")));
                }
                for (p, &c) in pf.iter().zip(cf) {
                    if !(0.0..=1.0).contains(&c) {
                        return Err(Error::Contract(format!("confidence {c} outside [0, 1]")));
                    }
                    if c > 0.0 && !(p[0].is_finite() && p[1].is_finite()) {
                        return Err(Error::Contract("non-finite keypoint with positive confidence".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn frame(&self, i: usize) -> FrameKeypoints {
        FrameKeypoints {
            points: self.points.iter().map(|v| v[i].clone()).collect(),
            confidence: self.confidence.iter().map(|v| v[i].clone()).collect(),
        }
    }
}

/// Projects joint positions into every view with optional pixel noise and
/// a fraction of gross outliers of a fixed magnitude.
pub fn synthesize_keypoints(
    views: &[CameraView],
    positions: &[Vec<Vec3>],
    noise_px: f64,
    outlier_fraction: f64,
    outlier_px: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Keypoints2D> {
    let normal = Normal::new(0.0, noise_px.max(0.0)).map_err(|e| Error::Contract(e.to_string()))?;
    let mut points = Vec::with_capacity(views.len());
    let mut confidence = Vec::with_capacity(views.len());
    for v in views {
        let mut pv = Vec::with_capacity(positions.len());
        let mut cv = Vec::with_capacity(positions.len());
        for frame in positions {
            let mut pf = Vec::with_capacity(frame.len());
            let mut cf = Vec::with_capacity(frame.len());
            for p in frame {
                match project(v, p) {
                    Ok(mut px) => {
                        px[0] += normal.sample(rng);
                        px[1] += normal.sample(rng);
                        if rng.random::<f64>() < outlier_fraction {
                            let a = rng.random_range(0.0..std::f64::consts::TAU);
                            px[0] += outlier_px * a.cos();
                            px[1] += outlier_px * a.sin();
                        }
                        pf.push(px);
                        cf.push(1.0);
                    }
                    Err(_) => {
                        pf.push([0.0, 0.0]);
                        cf.push(0.0);
                    }
                }
            }
            pv.push(pf);
            cv.push(cf);
        }
        points.push(pv);
        confidence.push(cv);
    }
    Ok(Keypoints2D { points, confidence })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitWeights {
    pub lambda_theta: f64,
    pub lambda_beta: f64,
    pub lambda_2d: f64,
    pub lambda_smooth: f64,
    /// Geman-McClure scale, pixels.
    pub rho: f64,
    /// Geman-McClure when true, plain `r²/ρ²` otherwise.
    pub robust: bool,
}

impl Default for FitWeights {
    fn default() -> Self {
        Self {
            lambda_theta: 1e-3,
            lambda_beta: 1e-2,
            lambda_2d: 1.0,
            lambda_smooth: 1.0,
            rho: 10.0,
            robust: true,
        }
    }
}

impl FitWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_theta, self.lambda_beta, self.lambda_2d, self.lambda_smooth];
        if w.iter().any(|v| !(*v >= 0.0)) || !(self.rho > 0.0) {
            return Err(Error::Config("fit weights must be non-negative and rho positive".into()));
        }
        Ok(())
    }
}

/// Flattened parameters: root rotation, root translation, joint angles, shape.
pub fn params_to_vec(pose: &PoseParams) -> Vec<f64> {
    let mut v = pose.pose_vector();
    v.extend_from_slice(&pose.shape);
    v
}

pub fn vec_to_params(x: &[f64], skel: &Skeleton) -> PoseParams {
    let mut p = PoseParams::zero(skel);
    let n = 3 * (skel.num_joints() + 1);
    p.set_pose_vector(&x[..n]);
    p.shape.copy_from_slice(&x[n..n + SHAPE_DIM]);
    p
}

/// Derivative of the exponential map with respect to each axis-angle component.
fn exp_derivatives(w: &Vec3, r: &Mat3) -> [Mat3; 3] {
    let theta2 = w.norm_squared();
    let mut out = [Mat3::zeros(); 3];
    for (k, d) in out.iter_mut().enumerate() {
        let e = Vec3::ith(k, 1.0);
        *d = if theta2 < 1e-16 {
            skew(&e)
        } else {
            (skew(w) * w[k] + skew(&w.cross(&((Mat3::identity() - r) * e)))) * r / theta2
        };
    }
    out
}

fn frob(a: &Mat3, b: &Mat3) -> f64 {
    a.component_mul(b).sum()
}

/// Forward kinematics on a parameter vector with enough state kept for the
/// reverse pass.
struct FkTape {
    angles: Vec<Vec3>,
    local: Vec<Mat3>,
    globals: Vec<Se3>,
    scale: f64,
}

impl FkTape {
    fn new(skel: &Skeleton, x: &[f64]) -> Self {
        let j = skel.num_joints();
        let angles: Vec<Vec3> = (0..j)
            .map(|k| {
                let o = if k == 0 { 0 } else { 3 + 3 * k };
                Vec3::new(x[o], x[o + 1], x[o + 2])
            })
            .collect();
        let local: Vec<Mat3> = angles.iter().map(exp_so3).collect();
        let scale = Skeleton::limb_scale(&x[3 * (j + 1)..3 * (j + 1) + SHAPE_DIM].try_into().unwrap());
        let root = Se3::new(local[0], Vec3::new(x[3], x[4], x[5]));
        let globals = fk_from_rotations(skel, &root, &local, scale);
        Self {
            angles,
            local,
            globals,
            scale,
        }
    }

    fn positions(&self) -> Vec<Vec3> {
        self.globals.iter().map(|g| g.translation).collect()
    }

    /// Accumulates `dE/dx` given `dE/dp_j` for every joint.
    fn backward(&self, skel: &Skeleton, gpos: &[Vec3], grad: &mut [f64]) {
        let j = skel.num_joints();
        let mut gp = gpos.to_vec();
        let mut gg = vec![Mat3::zeros(); j];
        let mut gscale = 0.0;
        for k in (1..j).rev() {
            let q = skel.parents[k].unwrap();
            let gq = self.globals[q].rotation;
            let off = skel.bind_offsets[k];
            let gpk = gp[k];
            gp[q] += gpk;
            gg[q] += gpk * (off * self.scale).transpose();
            gscale += gpk.dot(&(gq * off));
            let ggk = gg[k];
            gg[q] += ggk * self.local[k].transpose();
            let gr = gq.transpose() * ggk;
            let d = exp_derivatives(&self.angles[k], &self.local[k]);
            for a in 0..3 {
                grad[3 + 3 * k + a] += frob(&gr, &d[a]);
            }
        }
        let d = exp_derivatives(&self.angles[0], &self.local[0]);
        for a in 0..3 {
            grad[a] += frob(&gg[0], &d[a]);
            grad[3 + a] += gp[0][a];
        }
        grad[3 * (j + 1)] += 0.1 * gscale;
    }
}

/// Weighted reprojection term of one frame; adds its gradient into `grad`.
fn reprojection(
    skel: &Skeleton,
    views: &[CameraView],
    kps: &FrameKeypoints,
    weights: &FitWeights,
    x: &[f64],
    grad: &mut [f64],
) -> Result<f64> {
    let tape = FkTape::new(skel, x);
    let pos = tape.positions();
    let mut gpos = vec![Vec3::zeros(); pos.len()];
    let mut e = 0.0;
    let mut used = 0usize;
    let rho2 = weights.rho * weights.rho;
    for (v, view) in views.iter().enumerate() {
        let ext = view.extrinsic();
        for (j, p) in pos.iter().enumerate() {
            let c = kps.confidence[v][j];
            if c <= 0.0 {
                continue;
            }
            let pc = ext.transform_point(p);
            if pc.z <= MIN_DEPTH {
                continue;
            }
            used += 1;
            let u = view.fx * pc.x / pc.z + view.cx;
            let w = view.fy * pc.y / pc.z + view.cy;
            let r = [u - kps.points[v][j][0], w - kps.points[v][j][1]];
            let n2 = r[0] * r[0] + r[1] * r[1];
            let (val, dn2) = if weights.robust {
                (n2 / (n2 + rho2), rho2 / ((n2 + rho2) * (n2 + rho2)))
            } else {
                (n2 / rho2, 1.0 / rho2)
            };
            let s = weights.lambda_2d * c;
            e += s * val;
            let gr = [2.0 * s * dn2 * r[0], 2.0 * s * dn2 * r[1]];
            let gpc = Vec3::new(
                gr[0] * view.fx / pc.z,
                gr[1] * view.fy / pc.z,
                -(gr[0] * view.fx * pc.x + gr[1] * view.fy * pc.y) / (pc.z * pc.z),
            );
            gpos[j] += ext.rotation.transpose() * gpc;
        }
    }
    if used == 0 {
        return Err(Error::Degenerate("no joint is visible in any view".into()));
    }
    tape.backward(skel, &gpos, grad);
    Ok(e)
}

/// Energy of one frame's parameters and its gradient.
pub fn fitting_energy(
    pose: &PoseParams,
    views: &[CameraView],
    kps: &FrameKeypoints,
    weights: &FitWeights,
    skel: &Skeleton,
) -> Result<(f64, Vec<f64>)> {
    pose.check(skel)?;
    energy_vec(&params_to_vec(pose), views, kps, weights, skel)
}

fn energy_vec(
    x: &[f64],
    views: &[CameraView],
    kps: &FrameKeypoints,
    weights: &FitWeights,
    skel: &Skeleton,
) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; x.len()];
    let mut e = reprojection(skel, views, kps, weights, x, &mut g)?;
    let n = 3 * (skel.num_joints() + 1);
    for k in 6..n {
        e += weights.lambda_theta * x[k] * x[k];
        g[k] += 2.0 * weights.lambda_theta * x[k];
    }
    for k in n..n + SHAPE_DIM {
        e += weights.lambda_beta * x[k] * x[k];
        g[k] += 2.0 * weights.lambda_beta * x[k];
    }
    Ok((e, g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with Armijo backtracking.
pub fn lbfgs(
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: Vec<f64>,
    opts: &LbfgsOptions,
) -> Result<LbfgsResult> {
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            detail: "objective is not finite at the initial point".into(),
        });
    }
    let mut history = vec![fx];
    let mut mem: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        if dot(&g, &g).sqrt() < opts.gradient_tolerance {
            converged = true;
            break;
        }
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let gn = dot(&g, &g).sqrt();
            q.iter_mut().for_each(|v| *v *= 1e-2 / gn.max(1e-2));
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v * 1e-2).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            if let Ok((fnew, gnew)) = f(&xn) {
                if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            mem.push((s, y, 1.0 / sy));
            if mem.len() > opts.memory {
                mem.remove(0);
            }
        }
        x = xn;
        fx = fnew;
        g = gnew;
        history.push(fx);
        iterations += 1;
    }
    if !converged && dot(&g, &g).sqrt() < opts.gradient_tolerance {
        converged = true;
    }
    Ok(LbfgsResult {
        x,
        value: fx,
        iterations,
        converged,
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub pose: PoseParams,
    pub energy: f64,
    pub iterations: usize,
    /// Gradient tolerance reached; otherwise the best iterate is returned.
    pub converged: bool,
}

pub fn perframe_fit(
    views: &[CameraView],
    kps: &FrameKeypoints,
    init: &PoseParams,
    weights: &FitWeights,
    skel: &Skeleton,
) -> Result<FitResult> {
    weights.validate()?;
    init.check(skel)?;
    let res = lbfgs(
        |x| energy_vec(x, views, kps, weights, skel),
        params_to_vec(init),
        &LbfgsOptions::default(),
    )?;
    Ok(FitResult {
        pose: vec_to_params(&res.x, skel),
        energy: res.value,
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// Mean squared frame-to-frame change of the pose parameters (shape excluded).
pub fn parameter_jitter(motion: &MotionSequence) -> f64 {
    let v: Vec<Vec<f64>> = motion.frames.iter().map(PoseParams::pose_vector).collect();
    let n = v.len().saturating_sub(1).max(1);
    v.windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFit {
    pub motion: MotionSequence,
    pub energy: f64,
    pub converged: bool,
}

/// Joint refinement of all frames with the shape fixed to the per-frame mean
/// and a squared-difference penalty between consecutive frames.
pub fn sequence_fit(
    per_frame: &[PoseParams],
    views: &[CameraView],
    kps: &Keypoints2D,
    weights: &FitWeights,
    skel: &Skeleton,
    fps: f64,
    max_iterations: usize,
) -> Result<SequenceFit> {
    weights.validate()?;
    let n = per_frame.len();
    if n < 2 {
        return Err(Error::Contract("sequence fitting needs at least two frames".into()));
    }
    if kps.num_frames() != n {
        return Err(Error::Shape(format!(
            "{} keypoint frames for {n} poses",
            kps.num_frames()
        )));
    }
    let mut beta: Shape = [0.0; SHAPE_DIM];
    for p in per_frame {
        p.check(skel)?;
        for (b, v) in beta.iter_mut().zip(&p.shape) {
            *b += v / n as f64;
        }
    }
    let dim = 3 * (skel.num_joints() + 1);
    let frames: Vec<FrameKeypoints> = (0..n).map(|i| kps.frame(i)).collect();
    let x0: Vec<f64> = per_frame.iter().flat_map(PoseParams::pose_vector).collect();

    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; x.len()];
        let mut e = 0.0;
        let mut full = vec![0.0; dim + SHAPE_DIM];
        full[dim..].copy_from_slice(&beta);
        for (i, fk) in frames.iter().enumerate() {
            full[..dim].copy_from_slice(&x[i * dim..(i + 1) * dim]);
            let mut gf = vec![0.0; dim + SHAPE_DIM];
            e += reprojection(skel, views, fk, weights, &full, &mut gf)?;
            for k in 0..dim {
                g[i * dim + k] += gf[k];
            }
            for k in 6..dim {
                let v = x[i * dim + k];
                e += weights.lambda_theta * v * v;
                g[i * dim + k] += 2.0 * weights.lambda_theta * v;
            }
        }
        for i in 0..n - 1 {
            for k in 0..dim {
                let d = x[(i + 1) * dim + k] - x[i * dim + k];
                e += weights.lambda_smooth * d * d;
                g[(i + 1) * dim + k] += 2.0 * weights.lambda_smooth * d;
                g[i * dim + k] -= 2.0 * weights.lambda_smooth * d;
            }
        }
        Ok((e, g))
    };
    let res = lbfgs(
        objective,
        x0,
        &LbfgsOptions {
            max_iterations,
            ..Default::default()
        },
    )?;
    let poses = (0..n)
        .map(|i| {
            let mut p = PoseParams::zero(skel);
            p.set_pose_vector(&res.x[i * dim..(i + 1) * dim]);
            p.shape = beta;
            p
        })
        .collect();
    Ok(SequenceFit {
        motion: MotionSequence::new(poses, fps, skel.id.clone())?,
        energy: res.value,
        converged: res.converged,
    })
}

/// Frames to keep after removing fast-joint glitches.
///
/// A step `i-1 -> i` is fast when some joint moves faster than
/// `speed_threshold`. Two consecutive fast steps mark the frame between
/// them (an isolated spike); any other fast step marks the frame it
/// arrives at. Unmarked runs of at least `min_seconds` are kept as
/// half-open ranges.
pub fn filter_segments(
    motion: &MotionSequence,
    skel: &Skeleton,
    speed_threshold: f64,
    min_seconds: f64,
) -> Result<Vec<Range<usize>>> {
    let n = motion.len();
    if n < 2 {
        return Err(Error::Contract("filtering needs at least two frames".into()));
    }
    let pos = crate::se3::motion_positions(skel, motion)?;
    let fast: Vec<bool> = (0..n)
        .map(|i| {
            i > 0
                && pos[i]
                    .iter()
                    .zip(&pos[i - 1])
                    .any(|(a, b)| (a - b).norm() * motion.fps > speed_threshold)
        })
        .collect();
    let mut marked = vec![false; n];
    let mut i = 1;
    while i < n {
        if fast[i] {
            marked[i] = true;
            if i + 1 < n && fast[i + 1] {
                i += 1;
            }
        }
        i += 1;
    }
    let min_len = ((min_seconds * motion.fps).round() as usize).max(1);
    let mut out = Vec::new();
    let mut start = None;
    for k in 0..=n {
        let keep = k < n && !marked[k];
        match (keep, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                if k - s >= min_len {
                    out.push(s..k);
                }
                start = None;
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Mean joint position error between two poses.
pub fn pose_joint_error(a: &PoseParams, b: &PoseParams, skel: &Skeleton) -> Result<f64> {
    let pa = crate::se3::forward_kinematics(skel, a)?;
    let pb = crate::se3::forward_kinematics(skel, b)?;
    Ok(pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| (x.translation - y.translation).norm())
        .sum::<f64>()
        / pa.len() as f64)
}
