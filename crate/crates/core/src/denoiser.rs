//! Transformer-decoder denoiser.
//!
//! Motion tokens are `f_X(x_t) + f_T(traj) + positional + timestep`; each
//! decoder layer runs self-attention over motion tokens, cross-attention
//! into the projected per-frame image tokens, then a feed-forward block
//! (pre-norm, residual). Unobserved conditioning rows are replaced by the
//! learnable mask tokens before any projection, so their input values can
//! never influence the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoise;
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamId, ParamStore, Tape, Var};
use crate::se3::{Se3, Vec3};
use crate::tensor::Mat;

/// Width of one trajectory token: 6D rotation plus translation.
pub const TRAJ_DIM: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Feed-forward expansion factor.
    pub ffn_mult: usize,
    /// Motion feature width `D`.
    pub feature_dim: usize,
    /// Image feature width.
    pub image_dim: usize,
    pub max_frames: usize,
}

impl DenoiserConfig {
    /// 12 decoder layers, 768 wide.
    pub fn full_scale(feature_dim: usize, image_dim: usize) -> Self {
        Self {
            layers: 12,
            width: 768,
            heads: 12,
            ffn_mult: 4,
            feature_dim,
            image_dim,
            max_frames: 80,
        }
    }

    /// Two layers, 64 wide, 4 heads.
    pub fn toy(feature_dim: usize, image_dim: usize) -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            ffn_mult: 4,
            feature_dim,
            image_dim,
            max_frames: 80,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.layers,
            self.width,
            self.heads,
            self.ffn_mult,
            self.feature_dim,
            self.image_dim,
            self.max_frames,
        ]
        .iter()
        .all(|&v| v > 0);
        if !all_positive {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !self.width.is_multiple_of(2) {
            return Err(Error::Config("width must be even for the timestep embedding".into()));
        }
        Ok(())
    }
}

/// Per-frame conditioning with observation masks (`true` = observed).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub traj: Mat,
    pub img: Mat,
    pub traj_mask: Vec<bool>,
    pub img_mask: Vec<bool>,
}

impl ConditioningBundle {
    pub fn new(traj: Mat, img: Mat, traj_mask: Vec<bool>, img_mask: Vec<bool>) -> Result<Self> {
        let c = Self {
            traj,
            img,
            traj_mask,
            img_mask,
        };
        c.validate()?;
        Ok(c)
    }

    /// Everything observed (reconstruction).
    pub fn full(traj: Mat, img: Mat) -> Result<Self> {
        let n = traj.rows();
        Self::new(traj, img, vec![true; n], vec![true; n])
    }

    /// Only the first image observed (generation).
    pub fn generation(first_image: &[f64], frames: usize) -> Self {
        let mut img = Mat::zeros(frames, first_image.len());
        let mut img_mask = vec![false; frames];
        if frames > 0 {
            img.row_mut(0).copy_from_slice(first_image);
            img_mask[0] = true;
        }
        Self {
            traj: Mat::zeros(frames, TRAJ_DIM),
            img,
            traj_mask: vec![false; frames],
            img_mask,
        }
    }

    /// First `observed` frames of both modalities visible, the rest masked.
    pub fn prefix(traj: &Mat, img: &Mat, observed: usize, frames: usize) -> Result<Self> {
        if traj.rows() < observed || img.rows() < observed {
            return Err(Error::Shape("prefix longer than supplied conditioning".into()));
        }
        let mut t = Mat::zeros(frames, TRAJ_DIM);
        let mut im = Mat::zeros(frames, img.cols());
        for i in 0..observed {
            t.row_mut(i).copy_from_slice(traj.row(i));
            im.row_mut(i).copy_from_slice(img.row(i));
        }
        let mask: Vec<bool> = (0..frames).map(|i| i < observed).collect();
        Self::new(t, im, mask.clone(), mask)
    }

    pub fn frames(&self) -> usize {
        self.traj.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.traj.rows();
        if self.traj.cols() != TRAJ_DIM {
            return Err(Error::Shape(format!(
                "trajectory tokens must be {TRAJ_DIM} wide, got {}",
                self.traj.cols()
            )));
        }
        if self.img.rows() != n || self.traj_mask.len() != n || self.img_mask.len() != n {
            return Err(Error::Shape(format!(
                "conditioning lengths disagree: traj {n}, img {}, masks {}/{}",
                self.img.rows(),
                self.traj_mask.len(),
                self.img_mask.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln_self: (ParamId, ParamId),
    self_qkv: [(ParamId, ParamId); 3],
    self_out: (ParamId, ParamId),
    ln_cross: (ParamId, ParamId),
    cross_qkv: [(ParamId, ParamId); 3],
    cross_out: (ParamId, ParamId),
    ln_ffn: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Ids {
    f_x: (ParamId, ParamId),
    f_t: (ParamId, ParamId),
    f_i1: (ParamId, ParamId),
    f_i2: (ParamId, ParamId),
    traj_mask: ParamId,
    img_mask: ParamId,
    pos: ParamId,
    img_pos: ParamId,
    time1: (ParamId, ParamId),
    time2: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    ln_final: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

/// Configuration plus every learnable parameter of the denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserWeights {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    ids: Ids,
}

fn linear_params(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> (ParamId, ParamId) {
    let w = store.add_normal(format!("{name}.weight"), fan_in, fan_out, std, rng);
    let b = store.add(format!("{name}.bias"), Mat::zeros(1, fan_out), false);
    (w, b)
}

fn norm_params(store: &mut ParamStore, name: &str, width: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.gain"), Mat::filled(1, width, 1.0), false);
    let b = store.add(format!("{name}.bias"), Mat::zeros(1, width), false);
    (g, b)
}

impl DenoiserWeights {
    /// Seeded initialization; parameter values are `f32`-representable.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let w = config.width;
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let f_x = linear_params(&mut s, "f_x", config.feature_dim, w, inv(config.feature_dim), &mut rng);
        let f_t = linear_params(&mut s, "f_t", TRAJ_DIM, w, inv(TRAJ_DIM), &mut rng);
        let f_i1 = linear_params(&mut s, "f_i.0", config.image_dim, w, inv(config.image_dim), &mut rng);
        let f_i2 = linear_params(&mut s, "f_i.1", w, w, inv(w), &mut rng);
        let traj_mask = s.add_normal("traj_mask_token", 1, TRAJ_DIM, 1.0, &mut rng);
        let img_mask = s.add_normal(
            "img_mask_token",
            1,
            config.image_dim,
            inv(config.image_dim),
            &mut rng,
        );
        let pos = s.add_normal("pos_embed", config.max_frames, w, 0.1, &mut rng);
        let img_pos = s.add_normal("img_pos_embed", config.max_frames, w, 0.1, &mut rng);
        let time1 = linear_params(&mut s, "time.0", w, w, inv(w), &mut rng);
        let time2 = linear_params(&mut s, "time.1", w, w, inv(w), &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        let hidden = w * config.ffn_mult;
        for l in 0..config.layers {
            let p = format!("layers.{l}");
            let proj_std = inv(w) / (2.0 * config.layers as f64).sqrt();
            layers.push(LayerIds {
                ln_self: norm_params(&mut s, &format!("{p}.ln_self"), w),
                self_qkv: [
                    linear_params(&mut s, &format!("{p}.self.q"), w, w, inv(w), &mut rng),
                    linear_params(&mut s, &format!("{p}.self.k"), w, w, inv(w), &mut rng),
                    linear_params(&mut s, &format!("{p}.self.v"), w, w, inv(w), &mut rng),
                ],
                self_out: linear_params(&mut s, &format!("{p}.self.out"), w, w, proj_std, &mut rng),
                ln_cross: norm_params(&mut s, &format!("{p}.ln_cross"), w),
                cross_qkv: [
                    linear_params(&mut s, &format!("{p}.cross.q"), w, w, inv(w), &mut rng),
                    linear_params(&mut s, &format!("{p}.cross.k"), w, w, inv(w), &mut rng),
                    linear_params(&mut s, &format!("{p}.cross.v"), w, w, inv(w), &mut rng),
                ],
                cross_out: linear_params(&mut s, &format!("{p}.cross.out"), w, w, proj_std, &mut rng),
                ln_ffn: norm_params(&mut s, &format!("{p}.ln_ffn"), w),
                ffn_in: linear_params(&mut s, &format!("{p}.ffn.in"), w, hidden, inv(w), &mut rng),
                ffn_out: linear_params(&mut s, &format!("{p}.ffn.out"), hidden, w, inv(hidden) / (2.0 * config.layers as f64).sqrt(), &mut rng),
            });
        }
        let ln_final = norm_params(&mut s, "ln_final", w);
        let out = linear_params(&mut s, "out", w, config.feature_dim, 0.02, &mut rng);
        s.quantize_f32();
        Ok(Self {
            config,
            params: s,
            ids: Ids {
                f_x,
                f_t,
                f_i1,
                f_i2,
                traj_mask,
                img_mask,
                pos,
                img_pos,
                time1,
                time2,
                layers,
                ln_final,
                out,
            },
        })
    }

    pub fn traj_mask_token(&self) -> &Mat {
        self.params.get(self.ids.traj_mask)
    }

    pub fn img_mask_token(&self) -> &Mat {
        self.params.get(self.ids.img_mask)
    }

    pub fn check_inputs(&self, x_t: &Mat, cond: &ConditioningBundle) -> Result<()> {
        cond.validate()?;
        let n = x_t.rows();
        if n == 0 || n > self.config.max_frames {
            return Err(Error::Shape(format!(
                "{n} frames outside [1, {}]",
                self.config.max_frames
            )));
        }
        if x_t.cols() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "motion width {} != configured {}",
                x_t.cols(),
                self.config.feature_dim
            )));
        }
        if cond.frames() != n {
            return Err(Error::Shape(format!(
                "conditioning has {} frames, motion has {n}",
                cond.frames()
            )));
        }
        if cond.img.cols() != self.config.image_dim {
            return Err(Error::Shape(format!(
                "image width {} != configured {}",
                cond.img.cols(),
                self.config.image_dim
            )));
        }
        Ok(())
    }

    fn attention(&self, tape: &mut Tape, q_in: Var, kv_in: Var, qkv: &[(ParamId, ParamId); 3], out: (ParamId, ParamId)) -> Var {
        let heads = self.config.heads;
        let dh = self.config.width / heads;
        let q = tape.linear(q_in, qkv[0].0, qkv[0].1);
        let k = tape.linear(kv_in, qkv[1].0, qkv[1].1);
        let v = tape.linear(kv_in, qkv[2].0, qkv[2].1);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let p = tape.softmax_rows(scores);
            outs.push(tape.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        tape.linear(cat, out.0, out.1)
    }

    /// Records one forward pass and returns the predicted clean motion node.
    pub fn forward_tape(&self, tape: &mut Tape, x_t: &Mat, t: usize, cond: &ConditioningBundle) -> Var {
        let n = x_t.rows();
        let ids = &self.ids;

        let x = tape.constant(x_t.clone());
        let mut h = tape.linear(x, ids.f_x.0, ids.f_x.1);

        let traj = tape.constant(cond.traj.clone());
        let t_tok = tape.param(ids.traj_mask);
        let traj = tape.fill_rows(traj, &cond.traj_mask, t_tok);
        let ht = tape.linear(traj, ids.f_t.0, ids.f_t.1);
        h = tape.add(h, ht);

        let pos = tape.param(ids.pos);
        let pos = tape.slice_rows(pos, 0, n);
        h = tape.add(h, pos);

        let temb = tape.constant(timestep_embedding(t, self.config.width));
        let temb = tape.linear(temb, ids.time1.0, ids.time1.1);
        let temb = tape.silu(temb);
        let temb = tape.linear(temb, ids.time2.0, ids.time2.1);
        h = tape.add_row(h, temb);

        let img = tape.constant(cond.img.clone());
        let i_tok = tape.param(ids.img_mask);
        let img = tape.fill_rows(img, &cond.img_mask, i_tok);
        let mem = tape.linear(img, ids.f_i1.0, ids.f_i1.1);
        let mem = tape.gelu(mem);
        let mem = tape.linear(mem, ids.f_i2.0, ids.f_i2.1);
        let img_pos = tape.param(ids.img_pos);
        let img_pos = tape.slice_rows(img_pos, 0, n);
        let mem = tape.add(mem, img_pos);

        for l in &ids.layers {
            let a = tape.layer_norm(h, l.ln_self.0, l.ln_self.1);
            let a = self.attention(tape, a, a, &l.self_qkv, l.self_out);
            h = tape.add(h, a);
            let a = tape.layer_norm(h, l.ln_cross.0, l.ln_cross.1);
            let a = self.attention(tape, a, mem, &l.cross_qkv, l.cross_out);
            h = tape.add(h, a);
            let a = tape.layer_norm(h, l.ln_ffn.0, l.ln_ffn.1);
            let a = tape.linear(a, l.ffn_in.0, l.ffn_in.1);
            let a = tape.gelu(a);
            let a = tape.linear(a, l.ffn_out.0, l.ffn_out.1);
            h = tape.add(h, a);
        }
        let h = tape.layer_norm(h, ids.ln_final.0, ids.ln_final.1);
        tape.linear(h, ids.out.0, ids.out.1)
    }

    /// Predicted clean motion for a noisy input.
    pub fn forward(&self, x_t: &Mat, t: usize, cond: &ConditioningBundle) -> Result<Mat> {
        self.check_inputs(x_t, cond)?;
        let mut tape = Tape::new(&self.params);
        let out = self.forward_tape(&mut tape, x_t, t, cond);
        Ok(tape.value(out).clone())
    }

    /// Denoising loss against `x0` and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        x0: &Mat,
        x_t: &Mat,
        t: usize,
        cond: &ConditioningBundle,
    ) -> Result<(f64, Grads)> {
        self.check_inputs(x_t, cond)?;
        let mut tape = Tape::new(&self.params);
        let out = self.forward_tape(&mut tape, x_t, t, cond);
        let loss = tape.mse(out, x0);
        Ok((tape.value(loss).get(0, 0), tape.backward(loss)))
    }
}

impl Denoise for DenoiserWeights {
    type Cond = ConditioningBundle;

    fn predict(&self, x_t: &Mat, t: usize, cond: &ConditioningBundle) -> Result<Mat> {
        self.forward(x_t, t, cond)
    }
}

/// Conditioning arrays after mask substitution, as the network sees them.
pub fn apply_masks(cond: &ConditioningBundle, weights: &DenoiserWeights) -> Result<(Mat, Mat)> {
    cond.validate()?;
    let fill = |m: &Mat, mask: &[bool], token: &Mat| {
        let mut out = m.clone();
        for (i, &k) in mask.iter().enumerate() {
            if !k {
                out.row_mut(i).copy_from_slice(token.row(0));
            }
        }
        out
    };
    Ok((
        fill(&cond.traj, &cond.traj_mask, weights.traj_mask_token()),
        fill(&cond.img, &cond.img_mask, weights.img_mask_token()),
    ))
}

/// Sinusoidal embedding of a diffusion step, `1 x width`.
pub fn timestep_embedding(t: usize, width: usize) -> Mat {
    let half = width / 2;
    let mut row = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        row[i] = a.sin();
        row[half + i] = a.cos();
    }
    Mat::row_vector(&row)
}

/// What an image encoder is asked to describe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageQuery {
    pub scene_id: u32,
    pub activity_id: u32,
    pub frame: usize,
    pub head_pose: Se3,
}

/// Maps an image reference to a fixed-width feature vector; deterministic.
pub trait ImageEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, query: &ImageQuery) -> Vec<f64>;
}

/// Stand-in encoder: a unit vector per (scene, activity) rotated by a fixed
/// orthogonal map that depends on the head's yaw/pitch bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticEncoder {
    pub dim: usize,
}

impl Default for SyntheticEncoder {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

fn seeded_unit_vector(tag: u64, id: u64, dim: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Eight yaw buckets and three pitch buckets of the head's forward axis.
pub fn view_bucket(head: &Se3) -> (usize, usize) {
    let f = head.rotation.column(0);
    let yaw = f.y.atan2(f.x);
    let yaw_bucket = (((yaw + std::f64::consts::PI) / std::f64::consts::TAU * 8.0).floor() as i64).rem_euclid(8) as usize;
    let pitch = f.z.clamp(-1.0, 1.0).asin();
    let pitch_bucket = if pitch < -0.2 {
        0
    } else if pitch > 0.2 {
        2
    } else {
        1
    };
    (yaw_bucket, pitch_bucket)
}

pub fn synthetic_encoder(scene_id: u32, activity_id: u32, head_pose: &Se3, dim: usize) -> Vec<f64> {
    let act = seeded_unit_vector(0xAC, activity_id as u64, dim);
    let scene = seeded_unit_vector(0x5C, scene_id as u64, dim);
    let mut v: Vec<f64> = act.iter().zip(&scene).map(|(a, s)| a + 0.5 * s).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    let (yb, pb) = view_bucket(head_pose);
    let base_angle = 0.6 * (yb as f64 / 8.0 + pb as f64 / 6.0);
    for k in 0..dim / 2 {
        let angle = base_angle * ((k % 3) + 1) as f64 / 3.0;
        let (s, c) = angle.sin_cos();
        let (a, b) = (v[2 * k], v[2 * k + 1]);
        v[2 * k] = c * a - s * b;
        v[2 * k + 1] = s * a + c * b;
    }
    v
}

impl ImageEncoder for SyntheticEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, q: &ImageQuery) -> Vec<f64> {
        synthetic_encoder(q.scene_id, q.activity_id, &q.head_pose, self.dim)
    }
}

/// Serves precomputed per-frame features by frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedFeatureReader {
    pub features: Mat,
}

impl ImageEncoder for CachedFeatureReader {
    fn dim(&self) -> usize {
        self.features.cols()
    }

    fn encode(&self, q: &ImageQuery) -> Vec<f64> {
        self.features.row(q.frame.min(self.features.rows() - 1)).to_vec()
    }
}

/// Identity head pose at standing height, for callers without a pose.
pub fn default_head_pose() -> Se3 {
    Se3::from_translation(Vec3::new(0.0, 0.0, 1.6))
}
