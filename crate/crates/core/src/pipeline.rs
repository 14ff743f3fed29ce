//! Unified training with stochastic task masking, checkpoints, and the
//! reconstruct / forecast / generate entry points.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{read_container, write_container, Array, ClipRef, Container, SyntheticTake};
use crate::denoiser::{ConditioningBundle, DenoiserConfig, DenoiserWeights, TRAJ_DIM};
use crate::diffusion::{q_sample, repaint_forecast, sample, standard_normal, NoiseSchedule, SamplerOptions};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Grads};
use crate::repr::{
    anchor_from_head, canonical_frames, decode, encode, mean_shape, residual_row, trajectory_tokens,
    ContactThresholds, DecodeAnchor, DecodedMotion, FeatureLayout, HeadCentricFeatures,
};
use crate::se3::{rot_to_6d, Se3, Skeleton};
use crate::tensor::Mat;

/// Smallest per-channel standard deviation used for normalization.
pub const NORM_STD_FLOOR: f64 = 1e-3;

/// Extra scale on the trajectory residual and head-height channels.
pub const TRAJECTORY_GAIN: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    /// First epoch trained at `lr_final`.
    pub lr_decay_epoch: usize,
    pub weight_decay: f64,
    /// Probability of a reconstruction batch element; the rest are generation.
    pub mask_prob: f64,
    pub t_max: usize,
    pub seed: u64,
    /// Hard cap on optimizer steps, after the epoch budget.
    pub max_steps: Option<usize>,
    /// Also train with prefix-conditioned masks (`C = {T_1:n, I_1:n}`).
    pub prefix_training: bool,
    pub prefix_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 350,
            batch_size: 64,
            lr: 3e-5,
            lr_final: 3e-6,
            lr_decay_epoch: 300,
            weight_decay: 0.01,
            mask_prob: 0.5,
            t_max: 1000,
            seed: 0,
            max_steps: None,
            prefix_training: false,
            prefix_frames: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.t_max == 0 {
            return bad("epochs, batch_size and t_max must be positive");
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0 && self.lr.is_finite() && self.lr_final.is_finite()) {
            return bad("learning rates must be positive and finite");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad("mask_prob must lie in [0, 1]");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive when set");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.lr_decay_epoch {
            self.lr
        } else {
            self.lr_final
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Reconstruction,
    Generation,
    Forecast,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskMasks {
    pub kind: TaskKind,
    pub traj: Vec<bool>,
    pub img: Vec<bool>,
}

impl TaskMasks {
    pub fn reconstruction(n: usize) -> Self {
        Self {
            kind: TaskKind::Reconstruction,
            traj: vec![true; n],
            img: vec![true; n],
        }
    }

    pub fn generation(n: usize) -> Self {
        let mut img = vec![false; n];
        if n > 0 {
            img[0] = true;
        }
        Self {
            kind: TaskKind::Generation,
            traj: vec![false; n],
            img,
        }
    }

    /// Observed prefix of `observed` frames, as used when forecasting.
    pub fn prefix(n: usize, observed: usize) -> Self {
        let m: Vec<bool> = (0..n).map(|i| i < observed).collect();
        Self {
            kind: TaskKind::Forecast,
            traj: m.clone(),
            img: m,
        }
    }
}

/// Reconstruction masks with probability `mask_prob`, generation masks otherwise.
pub fn sample_task_masks<R: Rng + ?Sized>(n: usize, mask_prob: f64, rng: &mut R) -> Result<TaskMasks> {
    if n == 0 {
        return Err(Error::Contract("task masks need at least one frame".into()));
    }
    let u: f64 = rng.random();
    Ok(if u < mask_prob {
        TaskMasks::reconstruction(n)
    } else {
        TaskMasks::generation(n)
    })
}

fn sample_training_masks(n: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TaskMasks> {
    let masks = sample_task_masks(n, cfg.mask_prob, rng)?;
    if cfg.prefix_training && masks.kind == TaskKind::Generation && rng.random::<bool>() {
        return Ok(TaskMasks::prefix(n, cfg.prefix_frames.min(n)));
    }
    Ok(masks)
}

/// One training window.
#[derive(Debug, Clone)]
pub struct TrainingClip {
    /// Raw (unnormalized) head-centric features.
    pub features: Mat,
    pub traj: Vec<Se3>,
    pub traj_tokens: Mat,
    pub img: Mat,
    pub scene_id: u32,
    pub activity_id: u32,
}

impl TrainingClip {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub layout: FeatureLayout,
    pub skeleton_id: String,
    pub fps: f64,
    pub clips: Vec<TrainingClip>,
}

impl Dataset {
    /// Cuts the referenced windows out of `takes` and encodes each one
    /// relative to its own first frame.
    pub fn from_takes(takes: &[SyntheticTake], refs: &[ClipRef], skel: &Skeleton) -> Result<Self> {
        let first = takes
            .first()
            .ok_or_else(|| Error::Contract("no takes to build a dataset from".into()))?;
        let fps = first.motion.fps;
        let mut clips = Vec::with_capacity(refs.len());
        for r in refs {
            let take = takes
                .get(r.take)
                .ok_or_else(|| Error::Contract(format!("clip refers to missing take {}", r.take)))?;
            if take.motion.fps != fps {
                return Err(Error::Contract("takes have different frame rates".into()));
            }
            let end = r.start + r.len;
            if end > take.len() || r.len == 0 {
                return Err(Error::Contract(format!("clip {r:?} exceeds its take")));
            }
            let motion = take.motion.window(r.start, end);
            let features = encode(&motion, skel, &ContactThresholds::default())?;
            let traj = take.trajectory[r.start..end].to_vec();
            clips.push(TrainingClip {
                features: features.values,
                traj_tokens: trajectory_tokens(&traj)?,
                traj,
                img: take.features.slice_rows(r.start, r.len),
                scene_id: take.scene_id,
                activity_id: take.activity.id(),
            });
        }
        let ds = Self {
            layout: FeatureLayout::for_skeleton(skel),
            skeleton_id: skel.id.clone(),
            fps,
            clips,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .clips
            .first()
            .ok_or_else(|| Error::Contract("dataset is empty".into()))?;
        let d = self.layout.width();
        let di = first.img.cols();
        for (k, c) in self.clips.iter().enumerate() {
            let n = c.frames();
            if c.features.cols() != d || c.img.cols() != di {
                return Err(Error::Shape(format!("clip {k} has inconsistent feature widths")));
            }
            if n == 0 || c.img.rows() != n || c.traj_tokens.rows() != n || c.traj.len() != n {
                return Err(Error::Shape(format!("clip {k} has inconsistent frame counts")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.layout.width()
    }

    pub fn image_dim(&self) -> usize {
        self.clips.first().map_or(0, |c| c.img.cols())
    }
}

/// Per-channel standardization of the motion features and of the
/// trajectory tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub traj_mean: Vec<f64>,
    pub traj_std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            traj_mean: vec![0.0; TRAJ_DIM],
            traj_std: vec![1.0; TRAJ_DIM],
        }
    }

    /// Statistics over every frame of every clip, rounded to `f32`.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        Self::fit_weighted(ds, TRAJECTORY_GAIN)
    }

    /// As [`Normalizer::fit`], with the residual and head-height channels
    /// scaled up by `traj_gain` so the denoising loss weighs them more.
    pub fn fit_weighted(ds: &Dataset, traj_gain: f64) -> Result<Self> {
        ds.validate()?;
        let count: usize = ds.clips.iter().map(TrainingClip::frames).sum();
        let (mean, std) = column_stats(ds.clips.iter().map(|c| &c.features), ds.feature_dim(), count);
        let (traj_mean, traj_std) = column_stats(ds.clips.iter().map(|c| &c.traj_tokens), TRAJ_DIM, count);
        let std = std
            .iter()
            .enumerate()
            .map(|(j, &sd)| {
                let g = if j <= FeatureLayout::HEAD_HEIGHT { traj_gain } else { 1.0 };
                (sd / g) as f32 as f64
            })
            .collect();
        Ok(Self {
            mean,
            std,
            traj_mean,
            traj_std,
        })
    }

    pub fn normalize(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - self.mean[j]) / self.std[j])
    }

    pub fn denormalize(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) * self.std[j] + self.mean[j])
    }

    pub fn normalize_traj(&self, tokens: &Mat) -> Mat {
        Mat::from_fn(tokens.rows(), tokens.cols(), |i, j| {
            (tokens.get(i, j) - self.traj_mean[j]) / self.traj_std[j]
        })
    }
}

/// Column mean and floored std over the rows of `mats`, rounded to `f32`.
fn column_stats<'a>(mats: impl Iterator<Item = &'a Mat> + Clone, d: usize, count: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for m in mats.clone() {
        for row in m.iter_rows() {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v / count as f64;
            }
        }
    }
    let mut var = vec![0.0; d];
    for m in mats {
        for row in m.iter_rows() {
            for ((s, v), a) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - a) * (v - a) / count as f64;
            }
        }
    }
    (
        mean.iter().map(|&m| m as f32 as f64).collect(),
        var.iter().map(|&v| v.sqrt().max(NORM_STD_FLOOR) as f32 as f64).collect(),
    )
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub weights: DenoiserWeights,
    pub train: TrainConfig,
    pub optimizer: AdamW,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub norm: Normalizer,
    pub layout: FeatureLayout,
    pub skeleton_id: String,
    pub fps: f64,
    pub dataset_len: usize,
    /// Mean batch loss of every step.
    pub step_losses: Vec<f64>,
}

impl Checkpoint {
    /// Fresh weights and normalization statistics for `ds`.
    pub fn init(ds: &Dataset, model: DenoiserConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        ds.validate()?;
        if model.feature_dim != ds.feature_dim() || model.image_dim != ds.image_dim() {
            return Err(Error::Shape(format!(
                "model expects widths ({}, {}), dataset has ({}, {})",
                model.feature_dim,
                model.image_dim,
                ds.feature_dim(),
                ds.image_dim()
            )));
        }
        if let Some(c) = ds.clips.iter().find(|c| c.frames() > model.max_frames) {
            return Err(Error::Shape(format!(
                "clip of {} frames exceeds max_frames {}",
                c.frames(),
                model.max_frames
            )));
        }
        let weights = DenoiserWeights::new(model, train.seed)?;
        let optimizer = AdamW::new(&weights.params, train.weight_decay);
        Ok(Self {
            optimizer,
            weights,
            norm: Normalizer::fit(ds)?,
            layout: ds.layout,
            skeleton_id: ds.skeleton_id.clone(),
            fps: ds.fps,
            dataset_len: ds.len(),
            step: 0,
            step_losses: Vec::new(),
            train,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.train.t_max)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset_len.div_ceil(self.train.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let by_epoch = self.train.epochs * self.steps_per_epoch();
        self.train.max_steps.map_or(by_epoch, |m| m.min(by_epoch))
    }

    /// Mean step loss of each epoch seen so far (the last may be partial).
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.step_losses
            .chunks(self.steps_per_epoch())
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(self.skeleton_id.clone(), self.fps, 0);
        for (k, p) in self.weights.params.iter().enumerate() {
            c.insert_mat(format!("param/{}", p.name), &p.value);
            c.insert_mat(format!("adam_m/{}", p.name), &self.optimizer.m[k]);
            c.insert_mat(format!("adam_v/{}", p.name), &self.optimizer.v[k]);
        }
        c.insert("norm_mean", Array::from_f64(vec![self.norm.mean.len()], &self.norm.mean)?);
        c.insert("norm_std", Array::from_f64(vec![self.norm.std.len()], &self.norm.std)?);
        c.insert("traj_mean", Array::from_f64(vec![TRAJ_DIM], &self.norm.traj_mean)?);
        c.insert("traj_std", Array::from_f64(vec![TRAJ_DIM], &self.norm.traj_std)?);
        let meta = [
            ("kind", "checkpoint".to_string()),
            ("model", to_json(&self.weights.config)?),
            ("train", to_json(&self.train)?),
            ("layout", to_json(&self.layout)?),
            ("step", self.step.to_string()),
            ("adam_step", self.optimizer.step.to_string()),
            ("dataset_len", self.dataset_len.to_string()),
            ("feature_dim", self.layout.width().to_string()),
            ("step_losses", to_json(&self.step_losses)?),
        ];
        for (k, v) in meta {
            c.meta.insert(k.into(), v);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind")? != "checkpoint" {
            return Err(Error::Format("container is not a checkpoint".into()));
        }
        fn parse<T: serde::de::DeserializeOwned>(c: &Container, k: &str) -> Result<T> {
            serde_json::from_str(c.meta(k)?).map_err(|e| Error::Format(format!("meta '{k}': {e}")))
        }
        let model: DenoiserConfig = parse(c, "model")?;
        let train: TrainConfig = parse(c, "train")?;
        train.validate()?;
        let layout: FeatureLayout = parse(c, "layout")?;
        if layout.width() != model.feature_dim {
            return Err(Error::SizeMismatch("checkpoint layout and model width disagree".into()));
        }
        let mut weights = DenoiserWeights::new(model, 0)?;
        let collect = |prefix: &str| -> Result<BTreeMap<String, Mat>> {
            let mut out = BTreeMap::new();
            for (k, a) in &c.arrays {
                if let Some(name) = k.strip_prefix(prefix) {
                    out.insert(name.to_string(), a.to_mat()?);
                }
            }
            Ok(out)
        };
        weights.params.load_named(&collect("param/")?)?;
        let mut optimizer = AdamW::new(&weights.params, train.weight_decay);
        optimizer.step = parse(c, "adam_step")?;
        let (m, v) = (collect("adam_m/")?, collect("adam_v/")?);
        for (k, p) in weights.params.iter().enumerate() {
            for (dst, src, what) in [(&mut optimizer.m[k], &m, "adam_m"), (&mut optimizer.v[k], &v, "adam_v")] {
                let val = src
                    .get(&p.name)
                    .ok_or_else(|| Error::Format(format!("missing {what}/{}", p.name)))?;
                if val.shape() != p.value.shape() {
                    return Err(Error::SizeMismatch(format!("{what}/{} has the wrong shape", p.name)));
                }
                *dst = val.clone();
            }
        }
        let vecf = |k: &str| -> Result<Vec<f64>> { Ok(c.mat(k)?.into_data()) };
        let norm = Normalizer {
            mean: vecf("norm_mean")?,
            std: vecf("norm_std")?,
            traj_mean: vecf("traj_mean")?,
            traj_std: vecf("traj_std")?,
        };
        if norm.mean.len() != layout.width() || norm.std.len() != layout.width() {
            return Err(Error::SizeMismatch("normalization statistics have the wrong width".into()));
        }
        if norm.traj_mean.len() != TRAJ_DIM || norm.traj_std.len() != TRAJ_DIM {
            return Err(Error::SizeMismatch("trajectory statistics have the wrong width".into()));
        }
        Ok(Self {
            weights,
            optimizer,
            norm,
            layout,
            skeleton_id: c.skeleton_id.clone(),
            fps: c.fps,
            step: parse(c, "step")?,
            dataset_len: parse(c, "dataset_len")?,
            step_losses: parse(c, "step_losses")?,
            train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(&self.to_container()?, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        ds.validate()?;
        if ds.len() != self.dataset_len || ds.layout != self.layout || ds.image_dim() != self.weights.config.image_dim {
            return Err(Error::Contract("dataset does not match the checkpoint it resumes".into()));
        }
        Ok(())
    }

    fn check_skeleton(&self, skel: &Skeleton) -> Result<()> {
        if skel.id != self.skeleton_id || FeatureLayout::for_skeleton(skel) != self.layout {
            return Err(Error::Shape(format!(
                "checkpoint was trained on skeleton '{}', got '{}'",
                self.skeleton_id, skel.id
            )));
        }
        Ok(())
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

/// Training stopped early; `last_good` is the state before the failing
/// step, absent when no state could be built.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Box<Checkpoint>>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.last_good {
            Some(c) => write!(f, "{} (last good step {})", self.error, c.step),
            None => write!(f, "{}", self.error),
        }
    }
}

impl std::error::Error for TrainFailure {}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + step as u64);
    rng
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mean loss and gradients of one batch.
fn batch_loss(
    ckpt: &Checkpoint,
    ds: &Dataset,
    schedule: &NoiseSchedule,
    step: usize,
) -> Result<(f64, Grads)> {
    let spe = ckpt.steps_per_epoch();
    let (epoch, b) = (step / spe, step % spe);
    let order = epoch_order(ckpt.train.seed, epoch, ds.len());
    let bs = ckpt.train.batch_size;
    let members = &order[b * bs..((b + 1) * bs).min(order.len())];
    let mut rng = step_rng(ckpt.train.seed, step);
    let mut total = Grads::zeros_like(&ckpt.weights.params);
    let mut loss = 0.0;
    for &k in members {
        let clip = &ds.clips[k];
        let n = clip.frames();
        let t = rng.random_range(1..=ckpt.train.t_max);
        let masks = sample_training_masks(n, &ckpt.train, &mut rng)?;
        let noise = standard_normal(&mut rng, n, ckpt.layout.width());
        let x0 = ckpt.norm.normalize(&clip.features);
        let x_t = q_sample(schedule, &x0, t, &noise)?;
        let cond = ConditioningBundle::new(
            ckpt.norm.normalize_traj(&clip.traj_tokens),
            clip.img.clone(),
            masks.traj,
            masks.img,
        )?;
        let (l, g) = ckpt.weights.loss_and_grads(&x0, &x_t, t, &cond)?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / members.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Runs optimizer steps until `until` (capped by the configured budget).
/// Deterministic in the seed: stopping and resuming from a saved checkpoint
/// gives the same trajectory bit for bit.
pub fn train_steps(
    ckpt: &mut Checkpoint,
    ds: &Dataset,
    until: Option<usize>,
) -> std::result::Result<(), TrainFailure> {
    let fail = |ckpt: &Checkpoint, error| TrainFailure {
        error,
        last_good: Some(Box::new(ckpt.clone())),
    };
    ckpt.check_dataset(ds).map_err(|e| fail(ckpt, e))?;
    let schedule = ckpt.schedule().map_err(|e| fail(ckpt, e))?;
    let end = until.map_or(ckpt.total_steps(), |u| u.min(ckpt.total_steps()));
    while ckpt.step < end {
        let step = ckpt.step;
        let (loss, grads) = batch_loss(ckpt, ds, &schedule, step).map_err(|e| fail(ckpt, e))?;
        if !loss.is_finite() || !grads.global_norm().is_finite() {
            return Err(fail(
                ckpt,
                Error::Numerical {
                    step,
                    detail: format!("training loss {loss}"),
                },
            ));
        }
        let lr = ckpt.train.lr_at_epoch(step / ckpt.steps_per_epoch());
        ckpt.optimizer.update(&mut ckpt.weights.params, &grads, lr, true);
        ckpt.step += 1;
        ckpt.step_losses.push(loss);
        log::debug!("step {step} loss {loss:.6} lr {lr:e}");
    }
    Ok(())
}

/// Full training run from fresh weights.
pub fn train(
    ds: &Dataset,
    model: DenoiserConfig,
    cfg: &TrainConfig,
) -> std::result::Result<Checkpoint, TrainFailure> {
    let mut ckpt = Checkpoint::init(ds, model, cfg.clone()).map_err(|error| TrainFailure {
        error,
        last_good: None,
    })?;
    train_steps(&mut ckpt, ds, None)?;
    Ok(ckpt)
}

/// A decoded model output together with its feature rows.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Denormalized, sanitized features.
    pub features: HeadCentricFeatures,
    /// Raw sampler output in normalized space.
    pub normalized: Mat,
    pub decoded: DecodedMotion,
}

impl Prediction {
    pub fn motion(&self) -> &crate::se3::MotionSequence {
        &self.decoded.motion
    }
}

fn finish(
    ckpt: &Checkpoint,
    skel: &Skeleton,
    normalized: Mat,
    anchor: &DecodeAnchor,
    shape: Option<crate::se3::Shape>,
) -> Result<Prediction> {
    let raw = HeadCentricFeatures::new(ckpt.layout, ckpt.norm.denormalize(&normalized))?;
    let features = crate::repr::sanitize(&raw)?;
    let decoded = decode(&features, anchor, skel, ckpt.fps, shape)?;
    Ok(Prediction {
        features,
        normalized,
        decoded,
    })
}

fn check_frames(ckpt: &Checkpoint, n: usize) -> Result<()> {
    if n == 0 || n > ckpt.weights.config.max_frames {
        return Err(Error::Shape(format!(
            "{n} frames outside [1, {}]",
            ckpt.weights.config.max_frames
        )));
    }
    Ok(())
}

fn anchor_for(traj: &[Se3]) -> Result<DecodeAnchor> {
    match traj.first() {
        Some(h) => anchor_from_head(h),
        None => Ok(DecodeAnchor::default()),
    }
}

/// Motion for a full device trajectory and its image features.
pub fn reconstruct(
    ckpt: &Checkpoint,
    skel: &Skeleton,
    traj: &[Se3],
    img: &Mat,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<Prediction> {
    ckpt.check_skeleton(skel)?;
    if traj.len() != img.rows() {
        return Err(Error::Shape(format!(
            "{} trajectory poses but {} image rows",
            traj.len(),
            img.rows()
        )));
    }
    check_frames(ckpt, traj.len())?;
    let cond = ConditioningBundle::full(ckpt.norm.normalize_traj(&trajectory_tokens(traj)?), img.clone())?;
    let x = sample(&ckpt.weights, &ckpt.schedule()?, &cond, traj.len(), ckpt.layout.width(), seed, opts)?;
    finish(ckpt, skel, x, &anchor_for(traj)?, None)
}

/// Seed of the completion stage of a forecast.
pub fn forecast_stage2_seed(seed: u64) -> u64 {
    seed ^ 0xf0ec_a57f_0000_0001
}

/// Reconstructs the observed prefix, then completes it to `total` frames by
/// repaint with prefix-only conditioning. The prefix of the result equals
/// the stage-one reconstruction exactly.
pub fn forecast(
    ckpt: &Checkpoint,
    skel: &Skeleton,
    traj_prefix: &[Se3],
    img_prefix: &Mat,
    total: usize,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<Prediction> {
    ckpt.check_skeleton(skel)?;
    let n = traj_prefix.len();
    if img_prefix.rows() != n {
        return Err(Error::Shape(format!("{n} trajectory poses but {} image rows", img_prefix.rows())));
    }
    if n >= total {
        return Err(Error::Contract(format!("observed {n} frames leaves nothing to forecast in {total}")));
    }
    check_frames(ckpt, total)?;
    let d = ckpt.layout.width();
    let (known, shape) = if n > 0 {
        let stage1 = reconstruct(ckpt, skel, traj_prefix, img_prefix, seed, opts)?;
        let shape = mean_shape(&stage1.features.values, &ckpt.layout);
        (stage1.normalized, Some(shape))
    } else {
        (Mat::zeros(0, d), None)
    };
    let mut traj = Mat::zeros(total, TRAJ_DIM);
    let mut img = Mat::zeros(total, ckpt.weights.config.image_dim);
    if n > 0 {
        let tokens = ckpt.norm.normalize_traj(&trajectory_tokens(traj_prefix)?);
        for i in 0..n {
            traj.row_mut(i).copy_from_slice(tokens.row(i));
            img.row_mut(i).copy_from_slice(img_prefix.row(i));
        }
    }
    let m = TaskMasks::prefix(total, n);
    let cond = ConditioningBundle::new(traj, img, m.traj, m.img)?;
    let x = repaint_forecast(
        &ckpt.weights,
        &ckpt.schedule()?,
        &known,
        total,
        &cond,
        forecast_stage2_seed(seed),
        opts,
    )?;
    finish(ckpt, skel, x, &anchor_for(traj_prefix)?, shape)
}

/// Motion sampled from a single scene image feature, placed at the origin.
pub fn generate(
    ckpt: &Checkpoint,
    skel: &Skeleton,
    first_image: &[f64],
    frames: usize,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<Prediction> {
    ckpt.check_skeleton(skel)?;
    check_frames(ckpt, frames)?;
    if first_image.len() != ckpt.weights.config.image_dim {
        return Err(Error::Shape(format!(
            "image feature has {} values, model expects {}",
            first_image.len(),
            ckpt.weights.config.image_dim
        )));
    }
    let cond = ConditioningBundle::generation(first_image, frames);
    let x = sample(&ckpt.weights, &ckpt.schedule()?, &cond, frames, ckpt.layout.width(), seed, opts)?;
    finish(ckpt, skel, x, &DecodeAnchor::default(), None)
}

/// Constant reference predictor: the training-mean feature vector at every
/// frame, placed by the first device pose. It ignores the rest of the
/// conditioning.
pub fn mean_pose_baseline(ckpt: &Checkpoint, skel: &Skeleton, traj: &[Se3]) -> Result<Prediction> {
    ckpt.check_skeleton(skel)?;
    if traj.is_empty() {
        return Err(Error::Contract("baseline needs at least one pose".into()));
    }
    let values = Mat::from_fn(traj.len(), ckpt.layout.width(), |_, j| ckpt.norm.mean[j]);
    finish(ckpt, skel, ckpt.norm.normalize(&values), &anchor_for(traj)?, None)
}

/// Stronger reference: the training-mean body pose carried along the
/// observed head trajectory (residuals, head height and head orientation
/// come from the device poses).
pub fn tracked_mean_pose_baseline(ckpt: &Checkpoint, skel: &Skeleton, traj: &[Se3]) -> Result<Prediction> {
    ckpt.check_skeleton(skel)?;
    if traj.is_empty() {
        return Err(Error::Contract("baseline needs at least one pose".into()));
    }
    let frames = canonical_frames(traj)?;
    let mut values = Mat::from_fn(traj.len(), ckpt.layout.width(), |_, j| ckpt.norm.mean[j]);
    for (i, c) in frames.iter().enumerate() {
        let row = values.row_mut(i);
        let res = if i == 0 {
            [1.0, 0.0, 0.0, 0.0]
        } else {
            residual_row(&frames[i - 1], c)
        };
        row[FeatureLayout::RESIDUAL].copy_from_slice(&res);
        let head = c.localize(&traj[i]);
        row[FeatureLayout::HEAD_HEIGHT] = head.translation.z;
        row[FeatureLayout::HEAD_ROT].copy_from_slice(&rot_to_6d(&head.rotation));
    }
    let normalized = ckpt.norm.normalize(&values);
    finish(ckpt, skel, normalized, &anchor_for(traj)?, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_take, window_dataset, TakeSplit, WindowConfig};
    use rand::RngCore;

    struct Fixed(u64);

    impl RngCore for Fixed {
        fn next_u32(&mut self) -> u32 {
            self.0 as u32
        }
        fn next_u64(&mut self) -> u64 {
            self.0
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(self.0 as u8);
        }
    }

    #[test]
    fn masks_follow_the_draw() {
        let low = sample_task_masks(5, 0.5, &mut Fixed(0)).unwrap();
        assert_eq!(low, TaskMasks::reconstruction(5));
        let high = sample_task_masks(5, 0.5, &mut Fixed(u64::MAX)).unwrap();
        assert_eq!(high.traj, vec![false; 5]);
        assert_eq!(high.img, vec![true, false, false, false, false]);
        assert!(sample_task_masks(0, 0.5, &mut Fixed(0)).is_err());
    }

    #[test]
    fn mask_frequency_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let recon = (0..n)
            .filter(|_| sample_task_masks(4, 0.5, &mut rng).unwrap().kind == TaskKind::Reconstruction)
            .count();
        let frac = recon as f64 / n as f64;
        // 4 sigma of a fair binomial over 10k draws is 0.02.
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn config_toml_and_validation() {
        let c = TrainConfig::from_toml("epochs = 3\nbatch_size = 4\nlr = 1e-3\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.lr_final, 3e-6);
        let err = TrainConfig::from_toml("epoch = 3\n").unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
        assert!(TrainConfig::from_toml("mask_prob = 1.5\n").is_err());
        let d = TrainConfig::default();
        assert_eq!((d.epochs, d.batch_size, d.lr, d.lr_final, d.weight_decay, d.mask_prob), (350, 64, 3e-5, 3e-6, 0.01, 0.5));
        assert_eq!(d.lr_at_epoch(299), 3e-5);
        assert_eq!(d.lr_at_epoch(300), 3e-6);
    }

    pub(crate) fn small_dataset(takes: usize, frames: usize) -> (Dataset, Skeleton) {
        let skel = Skeleton::humanoid22();
        let ts: Vec<_> = (0..takes)
            .map(|i| generate_take(i as u32, (i % 5) as u32, 8.0, 40 + i as u64, &skel).unwrap())
            .collect();
        let refs: Vec<ClipRef> = (0..takes).map(|take| ClipRef { take, start: 0, len: frames }).collect();
        (Dataset::from_takes(&ts, &refs, &skel).unwrap(), skel)
    }

    fn tiny_model(ds: &Dataset) -> DenoiserConfig {
        DenoiserConfig {
            layers: 1,
            width: 16,
            heads: 2,
            ffn_mult: 2,
            feature_dim: ds.feature_dim(),
            image_dim: ds.image_dim(),
            max_frames: 16,
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 2,
            lr: 1e-3,
            lr_final: 1e-4,
            lr_decay_epoch: 3,
            t_max: 100,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dataset_windows_match_takes() {
        let skel = Skeleton::humanoid22();
        let takes: Vec<_> = (0..3).map(|i| generate_take(0, i, 12.0, i as u64, &skel).unwrap()).collect();
        let lengths: Vec<usize> = takes.iter().map(SyntheticTake::len).collect();
        let idx = window_dataset(&lengths, 10.0, &WindowConfig::default(), &TakeSplit::all_train(3)).unwrap();
        let ds = Dataset::from_takes(&takes, &idx.train, &skel).unwrap();
        assert_eq!(ds.len(), 9);
        assert_eq!(ds.feature_dim(), 217);
        assert!(ds.clips.iter().all(|c| c.frames() == 80));
        let norm = Normalizer::fit(&ds).unwrap();
        let x = &ds.clips[4].features;
        assert!(norm.denormalize(&norm.normalize(x)).max_abs_diff(x) < 1e-9);
    }

    #[test]
    fn training_is_resumable_bit_exactly() {
        let (ds, _) = small_dataset(5, 8);
        let model = tiny_model(&ds);
        let cfg = tiny_train();
        let full = train(&ds, model, &cfg).unwrap();
        assert_eq!(full.step, 12);
        assert_eq!(full.epoch_losses().len(), 4);
        assert!(full.step_losses.iter().all(|l| l.is_finite()));

        let mut part = Checkpoint::init(&ds, model, cfg.clone()).unwrap();
        train_steps(&mut part, &ds, Some(7)).unwrap();
        let bytes = part.to_container().unwrap().to_bytes().unwrap();
        let mut resumed = Checkpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        train_steps(&mut resumed, &ds, None).unwrap();
        assert_eq!(resumed.step_losses, full.step_losses);
        assert_eq!(resumed.weights.params, full.weights.params);
        assert_eq!(
            resumed.to_container().unwrap().to_bytes().unwrap(),
            full.to_container().unwrap().to_bytes().unwrap()
        );
    }

    #[test]
    fn nan_aborts_with_last_good_state() {
        let (ds, _) = small_dataset(4, 8);
        let model = tiny_model(&ds);
        let mut ckpt = Checkpoint::init(&ds, model, tiny_train()).unwrap();
        train_steps(&mut ckpt, &ds, Some(2)).unwrap();
        let good = ckpt.weights.params.clone();
        let mut bad = ds.clone();
        for c in &mut bad.clips {
            c.img.set(0, 0, f64::NAN);
        }
        let err = train_steps(&mut ckpt, &bad, None).unwrap_err();
        assert!(matches!(err.error, Error::Numerical { step: 2, .. }), "{}", err.error);
        let last = err.last_good.unwrap();
        assert_eq!(last.step, 2);
        assert_eq!(last.weights.params, good);
    }

    #[test]
    fn resume_rejects_other_dataset() {
        let (ds, _) = small_dataset(4, 8);
        let (other, _) = small_dataset(3, 8);
        let mut ckpt = Checkpoint::init(&ds, tiny_model(&ds), tiny_train()).unwrap();
        assert!(train_steps(&mut ckpt, &other, None).is_err());
    }

    #[test]
    fn inference_contracts() {
        let (ds, skel) = small_dataset(4, 8);
        let ckpt = Checkpoint::init(&ds, tiny_model(&ds), tiny_train()).unwrap();
        let opts = SamplerOptions {
            steps: Some(10),
            zero_variance: false,
        };
        let clip = &ds.clips[1];
        let a = reconstruct(&ckpt, &skel, &clip.traj, &clip.img, 3, &opts).unwrap();
        let b = reconstruct(&ckpt, &skel, &clip.traj, &clip.img, 3, &opts).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.motion().len(), 8);
        assert!(reconstruct(&ckpt, &skel, &clip.traj[..5], &clip.img, 3, &opts).is_err());
        let one = reconstruct(&ckpt, &skel, &clip.traj[..1], &clip.img.slice_rows(0, 1), 3, &opts).unwrap();
        assert_eq!(one.motion().len(), 1);

        let g1 = generate(&ckpt, &skel, clip.img.row(0), 8, 4, &opts).unwrap();
        let g2 = generate(&ckpt, &skel, clip.img.row(0), 8, 4, &opts).unwrap();
        assert_eq!(g1.features, g2.features);
        for f in &g1.decoded.transforms {
            for t in f {
                assert!(t.is_valid(1e-9));
            }
        }
        assert!(generate(&ckpt, &skel, &clip.img.row(0)[..3], 8, 4, &opts).is_err());
        assert!(generate(&ckpt, &skel, clip.img.row(0), 17, 4, &opts).is_err());

        let f = forecast(&ckpt, &skel, &clip.traj[..3], &clip.img.slice_rows(0, 3), 8, 3, &opts).unwrap();
        let stage1 = reconstruct(&ckpt, &skel, &clip.traj[..3], &clip.img.slice_rows(0, 3), 3, &opts).unwrap();
        for i in 0..3 {
            assert_eq!(f.normalized.row(i), stage1.normalized.row(i));
            assert_eq!(f.features.values.row(i), stage1.features.values.row(i));
            assert_eq!(f.motion().frames[i], stage1.motion().frames[i]);
        }
        assert!(forecast(&ckpt, &skel, &clip.traj, &clip.img, 8, 3, &opts).is_err());
        let blind = forecast(&ckpt, &skel, &[], &Mat::zeros(0, ds.image_dim()), 8, 3, &opts).unwrap();
        assert_eq!(blind.motion().len(), 8);

        let constant = mean_pose_baseline(&ckpt, &skel, &clip.traj).unwrap();
        assert!(constant.normalized.iter_rows().all(|r| r == constant.normalized.row(0)));
        let h0 = constant.decoded.heads(&skel)[0].translation;
        assert!((h0.xy() - clip.traj[0].translation.xy()).norm() < 1e-6);
        let base = tracked_mean_pose_baseline(&ckpt, &skel, &clip.traj).unwrap();
        let heads = base.decoded.heads(&skel);
        for (h, t) in heads.iter().zip(&clip.traj) {
            assert!((h.translation - t.translation).norm() < 1e-6);
        }
        assert!(reconstruct(&ckpt, &Skeleton::chain5(), &clip.traj, &clip.img, 3, &opts).is_err());
    }
}
