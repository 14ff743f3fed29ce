//! Subcommand implementations. Each returns the paths it wrote.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use egomotion::dataio::{
    feature_cache, keypoints_from_container, keypoints_to_container, motion_from_container, motion_to_container,
    read_cached_features, read_container, read_rig, read_skeleton, take_from_container, take_stem,
    take_to_container, window_dataset, write_container, write_rig, write_skeleton, Activity, Array, Container,
    SyntheticTake, TakeSplit, WindowConfig, TAKE_FPS,
};
use egomotion::denoiser::{DenoiserConfig, SyntheticEncoder};
use egomotion::diffusion::SamplerOptions;
use egomotion::fitting::{
    filter_segments, geman_mcclure, parameter_jitter, perframe_fit, project, sequence_fit, synthesize_keypoints,
    synthetic_rig, FitWeights,
};
use egomotion::metrics::{evaluate, train_proxy_encoder, EvalClip, ProxyConfig, ProxyMotionEncoder};
use egomotion::pipeline::{self, Checkpoint, Dataset, Prediction, TrainConfig};
use egomotion::repr::{encode, ContactThresholds};
use egomotion::se3::{forward_kinematics, motion_positions, MotionSequence, Skeleton, Vec3};
use egomotion::Error;

use crate::manifest::Manifest;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or request (exit 1).
    Usage(String),
    /// Unreadable, malformed or mismatched inputs (exit 2).
    Data(String),
    /// Non-finite values or optimizer failure (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Self::Usage(e.to_string()),
            Error::Numerical { .. } => Self::Numerical(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create '{}': {e}", dir.display())))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read '{}': {e}", path.display())))
}

fn skeleton_for(id: &str) -> CliResult<Skeleton> {
    Skeleton::by_id(id).ok_or_else(|| CliError::Data(format!("unknown skeleton '{id}'")))
}

fn sampler(steps: Option<usize>) -> SamplerOptions {
    SamplerOptions {
        steps,
        zero_variance: false,
    }
}

// synth

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Number of scenes (ids 0..scenes).
    #[arg(long, default_value_t = 2)]
    pub scenes: u32,
    /// Number of activities, taken in catalogue order.
    #[arg(long, default_value_t = 5)]
    pub activities: usize,
    /// Takes per (scene, activity).
    #[arg(long, default_value_t = 1)]
    pub takes: u64,
    /// Take length in seconds.
    #[arg(long, default_value_t = 22.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(a: &SynthArgs) -> CliResult<Vec<PathBuf>> {
    if a.activities == 0 || a.activities > Activity::ALL.len() {
        return Err(usage(format!("--activities must be in 1..={}", Activity::ALL.len())));
    }
    if a.takes == 0 || a.takes > 1000 || a.scenes == 0 {
        return Err(usage("--scenes must be positive and --takes in 1..=1000"));
    }
    log::info!("synth seed {}", a.seed);
    let skel = Skeleton::humanoid22();
    let takes_dir = a.out.join("takes");
    create_dir(&takes_dir)?;
    let mut takes = Vec::new();
    for scene in 0..a.scenes {
        for act in &Activity::ALL[..a.activities] {
            for k in 0..a.takes {
                let seed = a.seed * 1000 + k;
                takes.push(egomotion::dataio::generate_take(scene, act.id(), a.duration, seed, &skel)?);
            }
        }
    }
    let mut written = Vec::new();
    for t in &takes {
        let p = takes_dir.join(format!("{}.eem", take_stem(t)));
        write_container(&take_to_container(t), &p)?;
        written.push(p);
    }
    written.extend(feature_cache(&takes, &SyntheticEncoder::default(), &a.out.join("features"))?);
    let skel_path = a.out.join("skeleton.skel");
    write_skeleton(&skel, &skel_path)?;
    written.push(skel_path);

    let mut m = Manifest::new("synth", a, Some(a.seed), None);
    m.outputs(&a.out, &written)?;
    m.note("takes", takes.len());
    written.push(m.write(&a.out.join("manifest.json"))?);
    Ok(written)
}

/// Takes of a synthesized data directory in file-name order, with image
/// features from the cache when present.
fn load_takes(dir: &Path) -> CliResult<(Vec<String>, Vec<SyntheticTake>, Skeleton)> {
    let takes_dir = dir.join("takes");
    let entries = fs::read_dir(&takes_dir)
        .map_err(|e| CliError::Data(format!("cannot list '{}': {e}", takes_dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "eem"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("no takes in '{}'", takes_dir.display())));
    }
    let mut stems = Vec::new();
    let mut takes = Vec::new();
    for p in &paths {
        let mut t = take_from_container(&read_container(p)?)?;
        let stem = take_stem(&t);
        let cached = dir.join("features").join(format!("{stem}.feat.eem"));
        if cached.exists() {
            t.features = read_cached_features(&cached, t.motion.fps, t.len(), t.features.cols())?;
        }
        stems.push(stem);
        takes.push(t);
    }
    let skel_path = dir.join("skeleton.skel");
    let skel = if skel_path.exists() {
        read_skeleton(&skel_path)?
    } else {
        skeleton_for(&takes[0].motion.skeleton_id)?
    };
    Ok((stems, takes, skel))
}

// train

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_frames: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let p = DenoiserConfig::full_scale(1, 1);
        Self {
            layers: p.layers,
            width: p.width,
            heads: p.heads,
            ffn_mult: p.ffn_mult,
            max_frames: p.max_frames,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub window_s: f64,
    pub train_stride_s: f64,
    pub eval_stride_s: f64,
    /// Fraction of takes held out for validation.
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        let w = WindowConfig::default();
        Self {
            window_s: w.window_s,
            train_stride_s: w.train_stride_s,
            eval_stride_s: w.eval_stride_s,
            val_fraction: 0.0,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub data: DataSpec,
}

fn load_config(path: Option<&Path>) -> CliResult<(ExperimentConfig, Option<String>)> {
    let Some(path) = path else {
        return Ok((ExperimentConfig::default(), None));
    };
    let text = read_text(path)?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| usage(format!("config '{}': {}", path.display(), e.message())))?;
    cfg.train.validate()?;
    Ok((cfg, Some(text)))
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// TOML file with [train], [model] and [data] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/checkpoint.eem` when it exists.
    #[arg(long)]
    pub resume: bool,
    /// Save the checkpoint every N optimizer steps.
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: usize,
    /// Stop (resumably) once this many total steps are done.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

fn build_dataset(data: &Path, spec: &DataSpec) -> CliResult<(Dataset, Vec<String>, Vec<String>)> {
    let (stems, takes, skel) = load_takes(data)?;
    let split = TakeSplit::by_fraction(takes.len(), spec.val_fraction, spec.split_seed)?;
    let lengths: Vec<usize> = takes.iter().map(SyntheticTake::len).collect();
    let wc = WindowConfig {
        window_s: spec.window_s,
        train_stride_s: spec.train_stride_s,
        eval_stride_s: spec.eval_stride_s,
    };
    let idx = window_dataset(&lengths, takes[0].motion.fps, &wc, &split)?;
    if idx.train.is_empty() {
        return Err(CliError::Data("no training windows fit in the takes".into()));
    }
    let ds = Dataset::from_takes(&takes, &idx.train, &skel)?;
    let names = |ids: &[usize]| ids.iter().map(|&i| stems[i].clone()).collect();
    Ok((ds, names(&split.train), names(&split.val)))
}

fn write_logs(ckpt: &Checkpoint, out: &Path) -> CliResult<Vec<PathBuf>> {
    let mut steps = String::from("step,loss\n");
    for (i, l) in ckpt.step_losses.iter().enumerate() {
        steps += &format!("{i},{l}\n");
    }
    let mut epochs = String::from("epoch,mean_loss\n");
    for (i, l) in ckpt.epoch_losses().iter().enumerate() {
        epochs += &format!("{i},{l}\n");
    }
    let (a, b) = (out.join("loss.csv"), out.join("epochs.csv"));
    egomotion::dataio::container::write_atomic(&a, steps.as_bytes())?;
    egomotion::dataio::container::write_atomic(&b, epochs.as_bytes())?;
    Ok(vec![a, b])
}

pub fn train(a: &TrainArgs) -> CliResult<Vec<PathBuf>> {
    let (cfg, text) = load_config(a.config.as_deref())?;
    log::info!("train seed {}", cfg.train.seed);
    let (ds, train_takes, val_takes) = build_dataset(&a.data, &cfg.data)?;
    create_dir(&a.out)?;
    let ckpt_path = a.out.join("checkpoint.eem");
    let model = DenoiserConfig {
        layers: cfg.model.layers,
        width: cfg.model.width,
        heads: cfg.model.heads,
        ffn_mult: cfg.model.ffn_mult,
        feature_dim: ds.feature_dim(),
        image_dim: ds.image_dim(),
        max_frames: cfg.model.max_frames,
    };
    model.validate().map_err(|e| usage(e.to_string()))?;
    let mut ckpt = if a.resume && ckpt_path.exists() {
        let c = Checkpoint::load(&ckpt_path)?;
        if c.train != cfg.train || c.weights.config != model {
            return Err(usage("config differs from the checkpoint being resumed"));
        }
        c
    } else {
        Checkpoint::init(&ds, model, cfg.train.clone())?
    };
    let end = a.stop_after.map_or(ckpt.total_steps(), |s| s.min(ckpt.total_steps()));
    let every = a.checkpoint_every.max(1);
    let mut failure = None;
    while ckpt.step < end {
        let target = (ckpt.step / every + 1) * every;
        match pipeline::train_steps(&mut ckpt, &ds, Some(target.min(end))) {
            Ok(()) => ckpt.save(&ckpt_path)?,
            Err(f) => {
                failure = Some(f);
                break;
            }
        }
    }
    if let Some(f) = failure {
        if let Some(good) = &f.last_good {
            good.save(&ckpt_path)?;
            write_logs(good, &a.out)?;
        }
        return Err(CliError::from(f.error));
    }
    if ckpt.step == 0 || !ckpt_path.exists() {
        ckpt.save(&ckpt_path)?;
    }
    let mut written = vec![ckpt_path.clone()];
    written.extend(write_logs(&ckpt, &a.out)?);
    let split_path = a.out.join("split.json");
    let split = serde_json::json!({ "train": train_takes, "val": val_takes });
    egomotion::dataio::container::write_atomic(&split_path, format!("{split:#}\n").as_bytes())?;
    written.push(split_path);

    let mut m = Manifest::new("train", a, Some(cfg.train.seed), text.as_deref());
    m.outputs(&a.out, &written)?;
    m.note("steps", ckpt.step);
    m.note("total_steps", ckpt.total_steps());
    m.note("clips", ds.len());
    m.note("final_loss", ckpt.step_losses.last().copied());
    m.note("parameters", ckpt.weights.params.num_scalars());
    written.push(m.write(&a.out.join("manifest.json"))?);
    Ok(written)
}

// train-encoder

#[derive(Debug, Args, Serialize)]
pub struct TrainEncoderArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optimizer steps.
    #[arg(long, default_value_t = ProxyConfig::default().steps)]
    pub steps: usize,
}

pub fn train_encoder(a: &TrainEncoderArgs) -> CliResult<Vec<PathBuf>> {
    log::info!("train-encoder seed {}", a.seed);
    let (ds, _, _) = build_dataset(&a.data, &DataSpec::default())?;
    let clips: Vec<_> = ds
        .clips
        .iter()
        .map(|c| egomotion::repr::HeadCentricFeatures::new(ds.layout, c.features.clone()))
        .collect::<Result<_, _>>()?;
    let cfg = ProxyConfig {
        seed: a.seed,
        steps: a.steps,
        ..ProxyConfig::default()
    };
    let enc = train_proxy_encoder(&clips, cfg)?;
    create_dir(&a.out)?;
    let path = a.out.join("proxy_encoder.eem");
    write_container(&enc.to_container()?, &path)?;
    let mut m = Manifest::new("train-encoder", a, Some(a.seed), None);
    m.outputs(&a.out, std::slice::from_ref(&path))?;
    m.note("clips", clips.len());
    m.note("loss_initial", enc.loss_log.first());
    m.note("loss_final", enc.loss_log.last());
    Ok(vec![path.clone(), m.write(&a.out.join("manifest.json"))?])
}

// inference

fn load_model(path: &Path) -> CliResult<(Checkpoint, Skeleton)> {
    let ckpt = Checkpoint::load(path)?;
    let skel = skeleton_for(&ckpt.skeleton_id)?;
    Ok((ckpt, skel))
}

fn load_input_take(path: &Path, ckpt: &Checkpoint) -> CliResult<SyntheticTake> {
    let take = take_from_container(&read_container(path)?)?;
    if take.motion.skeleton_id != ckpt.skeleton_id {
        return Err(CliError::Data(format!(
            "input skeleton '{}' does not match model skeleton '{}'",
            take.motion.skeleton_id, ckpt.skeleton_id
        )));
    }
    if take.features.cols() != ckpt.weights.config.image_dim {
        return Err(CliError::Data(format!(
            "input image features are {} wide, model expects {}",
            take.features.cols(),
            ckpt.weights.config.image_dim
        )));
    }
    if take.motion.fps != ckpt.fps {
        return Err(CliError::Data(format!("input is at {} fps, model at {}", take.motion.fps, ckpt.fps)));
    }
    Ok(take)
}

fn prediction_container(p: &Prediction, meta: &[(&str, String)]) -> Container {
    let mut c = motion_to_container(p.motion());
    c.insert_mat("features", &p.features.values);
    for (k, v) in meta {
        c.meta.insert((*k).to_string(), v.clone());
    }
    c
}

fn finish_inference<A: Serialize>(
    command: &str,
    a: &A,
    seed: u64,
    out: &Path,
    file: &str,
    c: &Container,
    inputs: &[&Path],
) -> CliResult<Vec<PathBuf>> {
    create_dir(out)?;
    let path = out.join(file);
    write_container(c, &path)?;
    let mut m = Manifest::new(command, a, Some(seed), None);
    for i in inputs {
        m.input(i)?;
    }
    m.outputs(out, std::slice::from_ref(&path))?;
    m.note("frames", c.n_frames);
    Ok(vec![path, m.write(&out.join("manifest.json"))?])
}

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Take container with trajectory and image features.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Frames to reconstruct; defaults to as many as the model accepts.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Strided reverse steps; all steps when omitted.
    #[arg(long)]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn clip_range(take: &SyntheticTake, start: usize, frames: Option<usize>, max: usize) -> CliResult<usize> {
    if start >= take.len() {
        return Err(usage(format!("--start {start} is past the end of a {}-frame take", take.len())));
    }
    let n = frames.unwrap_or_else(|| (take.len() - start).min(max));
    if n == 0 || start + n > take.len() {
        return Err(usage(format!("{n} frames from {start} do not fit in a {}-frame take", take.len())));
    }
    if n > max {
        return Err(usage(format!("{n} frames exceed the model limit of {max}")));
    }
    Ok(n)
}

pub fn reconstruct(a: &ReconstructArgs) -> CliResult<Vec<PathBuf>> {
    log::info!("reconstruct seed {}", a.seed);
    let (ckpt, skel) = load_model(&a.model)?;
    let take = load_input_take(&a.input, &ckpt)?;
    let n = clip_range(&take, a.start, a.frames, ckpt.weights.config.max_frames)?;
    let traj = &take.trajectory[a.start..a.start + n];
    let img = take.features.slice_rows(a.start, n);
    let p = pipeline::reconstruct(&ckpt, &skel, traj, &img, a.seed, &sampler(a.sample_steps))?;
    let c = prediction_container(&p, &[("kind", "reconstruction".into()), ("start", a.start.to_string())]);
    finish_inference("reconstruct", a, a.seed, &a.out, "reconstruction.eem", &c, &[&a.model, &a.input])
}

#[derive(Debug, Args, Serialize)]
pub struct ForecastArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Observed prefix in seconds.
    #[arg(long, default_value_t = 2.0)]
    pub observe: f64,
    /// Total frames (observed plus forecast); defaults to the clip length.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn forecast(a: &ForecastArgs) -> CliResult<Vec<PathBuf>> {
    log::info!("forecast seed {}", a.seed);
    let (ckpt, skel) = load_model(&a.model)?;
    let take = load_input_take(&a.input, &ckpt)?;
    let total = clip_range(&take, a.start, a.frames, ckpt.weights.config.max_frames)?;
    if !(a.observe >= 0.0) {
        return Err(usage("--observe must be non-negative"));
    }
    let n = (a.observe * take.motion.fps).round() as usize;
    if n >= total {
        return Err(usage(format!("--observe {} s ({n} frames) leaves nothing to forecast in {total}", a.observe)));
    }
    let traj = &take.trajectory[a.start..a.start + n];
    let img = take.features.slice_rows(a.start, n);
    let p = pipeline::forecast(&ckpt, &skel, traj, &img, total, a.seed, &sampler(a.sample_steps))?;
    let c = prediction_container(
        &p,
        &[
            ("kind", "forecast".into()),
            ("start", a.start.to_string()),
            ("observed", n.to_string()),
        ],
    );
    finish_inference("forecast", a, a.seed, &a.out, "forecast.eem", &c, &[&a.model, &a.input])
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Container holding an `image_features` array (a take or a cache file).
    #[arg(long)]
    pub image_feature: PathBuf,
    /// Row of `image_features` used as the scene image.
    #[arg(long, default_value_t = 0)]
    pub feature_frame: usize,
    #[arg(long, default_value_t = 80)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn generate(a: &GenerateArgs) -> CliResult<Vec<PathBuf>> {
    log::info!("generate seed {}", a.seed);
    let (ckpt, skel) = load_model(&a.model)?;
    if a.frames == 0 || a.frames > ckpt.weights.config.max_frames {
        return Err(usage(format!("--frames must be in 1..={}", ckpt.weights.config.max_frames)));
    }
    let feats = read_container(&a.image_feature)?.mat("image_features")?;
    if a.feature_frame >= feats.rows() {
        return Err(usage(format!("--feature-frame {} out of {} rows", a.feature_frame, feats.rows())));
    }
    if feats.cols() != ckpt.weights.config.image_dim {
        return Err(CliError::Data(format!(
            "image feature is {} wide, model expects {}",
            feats.cols(),
            ckpt.weights.config.image_dim
        )));
    }
    let p = pipeline::generate(&ckpt, &skel, feats.row(a.feature_frame), a.frames, a.seed, &sampler(a.sample_steps))?;
    let c = prediction_container(&p, &[("kind", "generation".into())]);
    finish_inference("generate", a, a.seed, &a.out, "generation.eem", &c, &[&a.model, &a.image_feature])
}

// eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum MetricSet {
    /// Everything available; semantic metrics need --encoder.
    All,
    /// Geometric metrics only.
    Basic,
    /// Require semantic similarity and FID.
    Semantic,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Predicted motion container or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference motion or take container, or a directory of them.
    #[arg(long)]
    pub gt: PathBuf,
    /// Proxy encoder from `train-encoder`.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricSet::All)]
    pub metrics: MetricSet,
    /// Also write per-clip metrics as CSV.
    #[arg(long)]
    pub per_clip_csv: Option<PathBuf>,
}

fn container_files(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::Data(format!("cannot list '{}': {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "eem"))
            .collect();
        v.sort();
        Ok(v)
    } else if path.exists() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(CliError::Data(format!("'{}' does not exist", path.display())))
    }
}

fn eval_clip(motion: &MotionSequence, skel: &Skeleton) -> CliResult<EvalClip> {
    let transforms: Vec<_> = motion
        .frames
        .iter()
        .map(|f| forward_kinematics(skel, f))
        .collect::<Result<_, _>>()?;
    Ok(EvalClip {
        positions: transforms.iter().map(|f| f.iter().map(|t| t.translation).collect()).collect(),
        heads: transforms.iter().map(|f| f[skel.head_index]).collect(),
        features: encode(motion, skel, &ContactThresholds::default())?,
    })
}

pub fn eval(a: &EvalArgs) -> CliResult<Vec<PathBuf>> {
    if a.metrics == MetricSet::Semantic && a.encoder.is_none() {
        return Err(usage("--metrics semantic requires --encoder"));
    }
    let preds = container_files(&a.pred)?;
    let gts = container_files(&a.gt)?;
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(CliError::Data(format!("{} predictions but {} references", preds.len(), gts.len())));
    }
    let encoder = match (&a.encoder, a.metrics) {
        (Some(p), MetricSet::All | MetricSet::Semantic) => {
            Some(ProxyMotionEncoder::from_container(&read_container(p)?)?)
        }
        _ => None,
    };
    let mut pc = Vec::new();
    let mut gc = Vec::new();
    let mut skel = None;
    for (pp, gp) in preds.iter().zip(&gts) {
        let pcon = read_container(pp)?;
        let pred = motion_from_container(&pcon)?;
        let gt_full = motion_from_container(&read_container(gp)?)?;
        if pred.skeleton_id != gt_full.skeleton_id {
            return Err(CliError::Data(format!("'{}' and '{}' use different skeletons", pp.display(), gp.display())));
        }
        let start: usize = pcon.meta("start").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
        if start + pred.len() > gt_full.len() {
            return Err(CliError::Data(format!(
                "'{}' needs frames {start}..{} of a {}-frame reference",
                pp.display(),
                start + pred.len(),
                gt_full.len()
            )));
        }
        let gt = gt_full.window(start, start + pred.len());
        let s = match &skel {
            Some(s) => s,
            None => skel.insert(skeleton_for(&pred.skeleton_id)?),
        };
        pc.push(eval_clip(&pred, s)?);
        gc.push(eval_clip(&gt, s)?);
    }
    let s = skel.expect("at least one clip");
    let report = evaluate(&pc, &gc, &s.hand_indices, &s.foot_indices, encoder.as_ref())?;
    if a.metrics == MetricSet::Semantic && report.fid.is_none() {
        return Err(CliError::Data(report.notes.join("; ")));
    }
    let mut written = Vec::new();
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    egomotion::dataio::container::write_atomic(&a.report, report.to_text().as_bytes())?;
    written.push(a.report.clone());
    if let Some(csv) = &a.per_clip_csv {
        egomotion::dataio::container::write_atomic(csv, report.per_clip_csv().as_bytes())?;
        written.push(csv.clone());
    }
    let mut m = Manifest::new("eval", a, None, None);
    for p in preds.iter().chain(&gts) {
        m.input(p)?;
    }
    let base = a.report.parent().unwrap_or(Path::new(""));
    m.outputs(base, &written)?;
    m.note("clips", preds.len());
    m.note("mpjpe", report.mpjpe);
    m.note("fid", report.fid);
    written.push(m.write(&a.report.with_extension("manifest.json"))?);
    Ok(written)
}

// fit

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Camera rig (.rig TOML).
    #[arg(long)]
    pub rig: PathBuf,
    /// Keypoint container.
    #[arg(long)]
    pub keypoints: PathBuf,
    /// Initial motion container, one pose per keypoint frame.
    #[arg(long)]
    pub init: PathBuf,
    /// TOML with the energy weights; defaults when omitted.
    #[arg(long)]
    pub weights_config: Option<PathBuf>,
    /// Joint speed (m/s) above which a frame is treated as a glitch.
    #[arg(long, default_value_t = 10.0)]
    pub speed_threshold: f64,
    /// Shortest kept segment, seconds.
    #[arg(long, default_value_t = 0.5)]
    pub min_seconds: f64,
    #[arg(long, default_value_t = 200)]
    pub sequence_iterations: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn fit(a: &FitArgs) -> CliResult<Vec<PathBuf>> {
    let views = read_rig(&a.rig)?;
    let kcon = read_container(&a.keypoints)?;
    let kps = keypoints_from_container(&kcon)?;
    let init = motion_from_container(&read_container(&a.init)?)?;
    let (weights, text) = match &a.weights_config {
        Some(p) => {
            let text = read_text(p)?;
            let w: FitWeights =
                toml::from_str(&text).map_err(|e| usage(format!("weights config '{}': {}", p.display(), e.message())))?;
            (w, Some(text))
        }
        None => (FitWeights::default(), None),
    };
    weights.validate()?;
    let skel = skeleton_for(&init.skeleton_id)?;
    kps.validate(skel.num_joints())?;
    if kps.num_views() != views.len() {
        return Err(CliError::Data(format!("{} keypoint views for {} cameras", kps.num_views(), views.len())));
    }
    if kps.num_frames() != init.len() {
        return Err(CliError::Data(format!("{} keypoint frames for {} initial poses", kps.num_frames(), init.len())));
    }

    let mut per_frame = Vec::with_capacity(init.len());
    let mut energies = Vec::with_capacity(init.len());
    let mut failed = 0usize;
    for (i, pose) in init.frames.iter().enumerate() {
        match perframe_fit(&views, &kps.frame(i), pose, &weights, &skel) {
            Ok(r) if r.energy.is_finite() => {
                energies.push(r.energy);
                per_frame.push(r.pose);
            }
            _ => {
                failed += 1;
                energies.push(f64::NAN);
                per_frame.push(pose.clone());
            }
        }
    }
    if failed == init.len() {
        return Err(CliError::Numerical("per-frame fitting failed on every frame".into()));
    }
    // Containers hold one shape per motion; the stored per-frame result uses
    // the mean shape, as the sequence stage does.
    let mut mean_shape = [0.0; egomotion::se3::SHAPE_DIM];
    for p in &per_frame {
        for (m, v) in mean_shape.iter_mut().zip(&p.shape) {
            *m += v / per_frame.len() as f64;
        }
    }
    let mut stage1 = MotionSequence::new(init.frames.clone(), init.fps, init.skeleton_id.clone())?;
    for (f, p) in stage1.frames.iter_mut().zip(&per_frame) {
        *f = p.clone();
        f.shape = mean_shape;
    }
    let fitted = if init.len() >= 2 {
        sequence_fit(&per_frame, &views, &kps, &weights, &skel, init.fps, a.sequence_iterations)?.motion
    } else {
        stage1.clone()
    };
    let kept = if fitted.len() >= 2 {
        filter_segments(&fitted, &skel, a.speed_threshold, a.min_seconds)?
    } else {
        vec![0..fitted.len()]
    };

    // Residuals well beyond the robust scale count as outliers.
    let positions = motion_positions(&skel, &fitted)?;
    let mut outliers = 0usize;
    for (v, view) in views.iter().enumerate() {
        for (f, frame) in positions.iter().enumerate() {
            for (j, p) in frame.iter().enumerate() {
                if kps.confidence[v][f][j] <= 0.0 {
                    continue;
                }
                if let Ok(px) = project(view, p) {
                    let k = kps.points[v][f][j];
                    let r = ((px[0] - k[0]).powi(2) + (px[1] - k[1]).powi(2)).sqrt();
                    if geman_mcclure(r, weights.rho) > 0.9 {
                        outliers += 1;
                    }
                }
            }
        }
    }

    create_dir(&a.out)?;
    let fitted_path = a.out.join("fitted.eem");
    let stage1_path = a.out.join("perframe.eem");
    write_container(&motion_to_container(&fitted), &fitted_path)?;
    write_container(&motion_to_container(&stage1), &stage1_path)?;
    let written = vec![fitted_path, stage1_path];

    let mut m = Manifest::new("fit", a, None, text.as_deref());
    for p in [&a.rig, &a.keypoints, &a.init] {
        m.input(p)?;
    }
    m.outputs(&a.out, &written)?;
    m.note("robust", weights.robust);
    m.note("outlier_residuals", outliers);
    m.note("frames_failed", failed);
    m.note("kept_ranges", kept.iter().map(|r| [r.start, r.end]).collect::<Vec<_>>());
    m.note("perframe_energy", &energies);
    m.note("jitter_perframe", parameter_jitter(&stage1));
    m.note("jitter_sequence", parameter_jitter(&fitted));
    if let Ok(gt) = kcon.mat("gt_positions") {
        let j = skel.num_joints();
        if gt.rows() != fitted.len() || gt.cols() != 3 * j {
            return Err(CliError::Data("gt_positions do not match the keypoint frames".into()));
        }
        let err = |pos: &[Vec<Vec3>]| {
            let mut s = 0.0;
            for (f, frame) in pos.iter().enumerate() {
                for (k, p) in frame.iter().enumerate() {
                    let g = Vec3::new(gt.get(f, 3 * k), gt.get(f, 3 * k + 1), gt.get(f, 3 * k + 2));
                    s += (p - g).norm();
                }
            }
            s / (pos.len() * j) as f64
        };
        m.note("joint_error_perframe", err(&motion_positions(&skel, &stage1)?));
        m.note("joint_error_sequence", err(&positions));
    }
    let mut out = written;
    out.push(m.write(&a.out.join("manifest.json"))?);
    Ok(out)
}

// synth-rig

#[derive(Debug, Args, Serialize)]
pub struct SynthRigArgs {
    #[arg(long, default_value_t = 4)]
    pub views: usize,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value = "walk-line")]
    pub activity: String,
    /// Gaussian keypoint noise, pixels.
    #[arg(long, default_value_t = 1.0)]
    pub noise_px: f64,
    #[arg(long, default_value_t = 0.0)]
    pub outlier_fraction: f64,
    #[arg(long, default_value_t = 50.0)]
    pub outlier_px: f64,
    /// Uniform perturbation of the initial pose parameters, radians.
    #[arg(long, default_value_t = 0.1)]
    pub init_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth_rig(a: &SynthRigArgs) -> CliResult<Vec<PathBuf>> {
    use rand::Rng;
    let activity = Activity::from_name(&a.activity).map_err(|e| usage(e.to_string()))?;
    if a.views == 0 || a.frames == 0 {
        return Err(usage("--views and --frames must be positive"));
    }
    let skel = Skeleton::humanoid22();
    let secs = (a.frames as f64 / TAKE_FPS).max(egomotion::dataio::synth::MIN_TAKE_SECONDS);
    let take = egomotion::dataio::generate_take(0, activity.id(), secs, a.seed, &skel)?;
    let mut gt = take.motion.window(0, a.frames);
    let origin = gt.frames[0].root_translation;
    for f in &mut gt.frames {
        f.root_translation.x -= origin.x;
        f.root_translation.y -= origin.y;
    }
    let views = synthetic_rig(a.views, 4.0, 1.0);
    let positions = motion_positions(&skel, &gt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let kps = synthesize_keypoints(&views, &positions, a.noise_px, a.outlier_fraction, a.outlier_px, &mut rng)?;
    let mut init = gt.clone();
    for f in &mut init.frames {
        let mut jitter = || Vec3::from_fn(|_, _| rng.random_range(-a.init_noise..=a.init_noise));
        f.root_rotation += jitter();
        for ang in &mut f.joint_angles {
            *ang += jitter();
        }
    }

    create_dir(&a.out)?;
    let rig_path = a.out.join("rig.rig");
    write_rig(&views, &rig_path)?;
    let mut kc = keypoints_to_container(&kps, &skel.id, gt.fps);
    let flat: Vec<f64> = positions.iter().flat_map(|f| f.iter().flat_map(|p| [p.x, p.y, p.z])).collect();
    kc.insert("gt_positions", Array::from_f64(vec![a.frames, skel.num_joints(), 3], &flat)?);
    let kp_path = a.out.join("keypoints.eem");
    write_container(&kc, &kp_path)?;
    let init_path = a.out.join("init.eem");
    write_container(&motion_to_container(&init), &init_path)?;
    let gt_path = a.out.join("gt.eem");
    write_container(&motion_to_container(&gt), &gt_path)?;
    let mut written = vec![rig_path, kp_path, init_path, gt_path];
    let mut m = Manifest::new("synth-rig", a, Some(a.seed), None);
    m.outputs(&a.out, &written)?;
    written.push(m.write(&a.out.join("manifest.json"))?);
    Ok(written)
}

