//! Evaluation metrics and the proxy latent motion encoder used for
//! semantic similarity and FID.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Array, Container};
use crate::error::{Error, Result};
use crate::nn::{AdamW, ParamId, ParamStore, Tape};
use crate::repr::{FeatureLayout, HeadCentricFeatures};
use crate::se3::{Se3, Vec3};
use crate::tensor::Mat;

/// Foot-slide height threshold, meters.
pub const FOOT_SLIDE_HEIGHT: f64 = 0.05;

fn check_same(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "pred has {} frames, gt has {}",
            pred.len(),
            gt.len()
        )));
    }
    for (a, b) in pred.iter().zip(gt) {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::Shape(format!("frame joint counts {} vs {}", a.len(), b.len())));
        }
    }
    Ok(())
}

/// Mean per-joint position error, meters.
pub fn mpjpe(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    check_same(pred, gt)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in pred.iter().zip(gt) {
        for (p, g) in a.iter().zip(b) {
            total += (p - g).norm();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// MPJPE over a subset of joints.
pub fn mpjpe_joints(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], joints: &[usize]) -> Result<f64> {
    check_same(pred, gt)?;
    if joints.is_empty() || joints.iter().any(|&j| j >= pred[0].len()) {
        return Err(Error::Shape("joint subset empty or out of range".into()));
    }
    let pick = |s: &[Vec<Vec3>]| -> Vec<Vec<Vec3>> {
        s.iter().map(|f| joints.iter().map(|&j| f[j]).collect()).collect()
    };
    mpjpe(&pick(pred), &pick(gt))
}

/// Hand-joint MPJPE.
pub fn mpjpe_h(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], hand_indices: &[usize]) -> Result<f64> {
    mpjpe_joints(pred, gt, hand_indices)
}

/// Rigid (rotation + translation) least-squares alignment of `pred` onto
/// `gt`. The flag is set when the point sets are too degenerate to fix a
/// rotation, in which case only the centroids are matched.
pub fn procrustes_align(pred: &[Vec3], gt: &[Vec3]) -> (Vec<Vec3>, bool) {
    let n = pred.len() as f64;
    let cp = pred.iter().sum::<Vec3>() / n;
    let cg = gt.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (p, g) in pred.iter().zip(gt) {
        h += (p - cp) * (g - cg).transpose();
    }
    let svd = h.svd(true, true);
    let s = svd.singular_values;
    let mut sorted = [s[0], s[1], s[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sorted[0] > 1e-12) || sorted[1] <= 1e-9 * sorted[0] {
        return (pred.iter().map(|p| p - cp + cg).collect(), true);
    }
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    (pred.iter().map(|p| r * (p - cp) + cg).collect(), false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedError {
    pub value: f64,
    /// Frames that fell back to translation-only alignment.
    pub degenerate_frames: usize,
}

/// MPJPE after per-frame rigid Procrustes alignment.
pub fn mpjpe_pa_detailed(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<AlignedError> {
    check_same(pred, gt)?;
    let mut aligned = Vec::with_capacity(pred.len());
    let mut degenerate = 0;
    let frame_err = |x: &[Vec3], y: &[Vec3]| x.iter().zip(y).map(|(p, g)| (p - g).norm()).sum::<f64>();
    for (a, b) in pred.iter().zip(gt) {
        let (al, flag) = procrustes_align(a, b);
        degenerate += flag as usize;
        // The least-squares fit can lose to no alignment on the mean of norms.
        if frame_err(&al, b) <= frame_err(a, b) {
            aligned.push(al);
        } else {
            aligned.push(a.clone());
        }
    }
    Ok(AlignedError {
        value: mpjpe(&aligned, gt)?,
        degenerate_frames: degenerate,
    })
}

pub fn mpjpe_pa(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    Ok(mpjpe_pa_detailed(pred, gt)?.value)
}

/// `(mean ‖R_gt − R_pred‖_F, mean head translation error in meters)`.
pub fn head_errors(pred: &[Se3], gt: &[Se3]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} vs {} head poses", pred.len(), gt.len())));
    }
    let n = pred.len() as f64;
    let rot = pred.iter().zip(gt).map(|(p, g)| (g.rotation - p.rotation).norm()).sum::<f64>() / n;
    let trans = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (g.translation - p.translation).norm())
        .sum::<f64>()
        / n;
    Ok((rot, trans))
}

/// Height-weighted horizontal foot displacement per frame, millimeters.
/// The weight `clamp(2 - 2^(h/H), 0, 1)` uses the height at the later frame.
pub fn foot_slide(positions: &[Vec<Vec3>], foot_indices: &[usize]) -> Result<f64> {
    if positions.len() < 2 || foot_indices.is_empty() {
        return Err(Error::Contract("foot slide needs two frames and one foot joint".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for w in positions.windows(2) {
        for &f in foot_indices {
            let (a, b) = (w[0][f], w[1][f]);
            let weight = (2.0 - 2f64.powf(b.z / FOOT_SLIDE_HEIGHT)).clamp(0.0, 1.0);
            total += weight * (b - a).xy().norm();
            count += 1;
        }
    }
    Ok(1000.0 * total / count as f64)
}

/// Mean absolute height of the lowest foot joint, meters.
pub fn foot_contact(positions: &[Vec<Vec3>], foot_indices: &[usize]) -> Result<f64> {
    if positions.is_empty() || foot_indices.is_empty() {
        return Err(Error::Contract("foot contact needs a frame and a foot joint".into()));
    }
    Ok(positions
        .iter()
        .map(|f| {
            foot_indices
                .iter()
                .map(|&j| f[j].z)
                .fold(f64::INFINITY, f64::min)
                .abs()
        })
        .sum::<f64>()
        / positions.len() as f64)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Principal square root of a symmetric positive semi-definite matrix,
/// with negative eigenvalues clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn mean_cov(samples: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = samples.len();
    let d = samples[0].len();
    let mut mu = vec![0.0; d];
    for s in samples {
        for (m, v) in mu.iter_mut().zip(s) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        for i in 0..d {
            let di = s[i] - mu[i];
            for j in 0..d {
                cov[(i, j)] += di * (s[j] - mu[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

/// Fréchet distance between Gaussian fits of two sample sets. The
/// cross term uses `tr((S1^½ Σ2 S1^½)^½)`, which equals `tr((Σ1 Σ2)^½)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().or(b.first()).map_or(0, Vec::len);
    let min = d + 1;
    for set in [a, b] {
        if set.len() < min {
            return Err(Error::TooFewSamples { got: set.len(), min });
        }
        if set.iter().any(|s| s.len() != d) {
            return Err(Error::Shape("samples of different widths".into()));
        }
    }
    let (m1, c1) = mean_cov(a);
    let (m2, c2) = mean_cov(b);
    let s1 = sqrtm_psd(&c1);
    let cross = sqrtm_psd(&(&s1 * &c2 * &s1));
    let mean_term: f64 = m1.iter().zip(&m2).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((mean_term + c1.trace() + c2.trace() - 2.0 * cross.trace()).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyConfig {
    pub latent: usize,
    pub hidden: usize,
    /// Frames sampled from each clip.
    pub frames: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            latent: 32,
            hidden: 128,
            frames: 20,
            steps: 1500,
            batch: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Minimum number of training clips for the proxy encoder.
pub const PROXY_MIN_CLIPS: usize = 64;

/// Small autoencoder over subsampled head-centric joint positions and
/// trajectory residuals; its unit-norm bottleneck is the motion latent.
#[derive(Debug, Clone)]
pub struct ProxyMotionEncoder {
    pub config: ProxyConfig,
    pub layout: FeatureLayout,
    pub params: ParamStore,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub trained: bool,
    /// Mean reconstruction loss over the training set before and after training.
    pub loss_log: Vec<f64>,
    ids: [ParamId; 8],
}

fn frame_inputs(layout: &FeatureLayout) -> usize {
    3 * layout.num_joints + 5
}

/// Raw encoder input of a clip: for evenly spaced frames, the canonical
/// joint positions, trajectory residual and head height.
pub fn proxy_input(features: &HeadCentricFeatures, frames: usize) -> Vec<f64> {
    let n = features.num_frames();
    let layout = features.layout;
    let mut out = Vec::with_capacity(frames * frame_inputs(&layout));
    for k in 0..frames {
        let i = (k * n / frames).min(n - 1);
        let row = features.values.row(i);
        out.extend_from_slice(&row[layout.joint_pos()]);
        out.extend_from_slice(&row[FeatureLayout::RESIDUAL]);
        out.push(row[FeatureLayout::HEAD_HEIGHT]);
    }
    out
}

impl ProxyMotionEncoder {
    pub fn untrained(config: ProxyConfig, layout: FeatureLayout) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let input = config.frames * frame_inputs(&layout);
        let (h, l) = (config.hidden, config.latent);
        let ids = [
            p.add_normal("enc.0.weight", input, h, 1.0 / (input as f64).sqrt(), &mut rng),
            p.add("enc.0.bias", Mat::zeros(1, h), false),
            p.add_normal("enc.1.weight", h, l, 1.0 / (h as f64).sqrt(), &mut rng),
            p.add("enc.1.bias", Mat::zeros(1, l), false),
            p.add_normal("dec.0.weight", l, h, 1.0, &mut rng),
            p.add("dec.0.bias", Mat::zeros(1, h), false),
            p.add_normal("dec.1.weight", h, input, 0.01, &mut rng),
            p.add("dec.1.bias", Mat::zeros(1, input), false),
        ];
        p.quantize_f32();
        Self {
            config,
            layout,
            params: p,
            mean: vec![0.0; input],
            std: vec![1.0; input],
            trained: false,
            loss_log: Vec::new(),
            ids,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.config.frames * frame_inputs(&self.layout)
    }

    fn standardize(&self, raw: &[Vec<f64>]) -> Mat {
        Mat::from_fn(raw.len(), self.input_dim(), |i, j| (raw[i][j] - self.mean[j]) / self.std[j])
    }

    fn reconstruction(&self, x: &Mat) -> f64 {
        let mut tape = Tape::new(&self.params);
        let xv = tape.constant(x.clone());
        let (_, out) = self.forward(&mut tape, xv);
        let loss = tape.mse(out, x);
        tape.value(loss).get(0, 0)
    }

    fn forward(&self, tape: &mut Tape, x: crate::nn::Var) -> (crate::nn::Var, crate::nn::Var) {
        let i = &self.ids;
        let h = tape.linear(x, i[0], i[1]);
        let h = tape.tanh(h);
        let z = tape.linear(h, i[2], i[3]);
        let z = tape.row_normalize(z);
        let d = tape.linear(z, i[4], i[5]);
        let d = tape.tanh(d);
        let out = tape.linear(d, i[6], i[7]);
        (z, out)
    }

    fn check_layout(&self, f: &HeadCentricFeatures) -> Result<()> {
        if f.layout != self.layout {
            return Err(Error::Shape("clip layout does not match the proxy encoder".into()));
        }
        Ok(())
    }

    /// Unit-norm latents of a batch of clips.
    pub fn encode_batch(&self, clips: &[&HeadCentricFeatures]) -> Result<Vec<Vec<f64>>> {
        if !self.trained {
            return Err(Error::Contract("proxy encoder has not been trained".into()));
        }
        if clips.is_empty() {
            return Ok(Vec::new());
        }
        let mut raw = Vec::with_capacity(clips.len());
        for c in clips {
            self.check_layout(c)?;
            raw.push(proxy_input(c, self.config.frames));
        }
        let x = self.standardize(&raw);
        let mut tape = Tape::new(&self.params);
        let xv = tape.constant(x);
        let (z, _) = self.forward(&mut tape, xv);
        Ok(tape.value(z).iter_rows().map(<[f64]>::to_vec).collect())
    }

    pub fn encode(&self, clip: &HeadCentricFeatures) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[clip])?.remove(0))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("", 0.0, 0);
        for p in self.params.iter() {
            c.insert_mat(format!("param/{}", p.name), &p.value);
        }
        c.insert("mean", Array::from_f64(vec![self.mean.len()], &self.mean)?);
        c.insert("std", Array::from_f64(vec![self.std.len()], &self.std)?);
        c.insert("loss_log", Array::from_f64(vec![self.loss_log.len()], &self.loss_log)?);
        c.meta.insert("kind".into(), "proxy_encoder".into());
        c.meta.insert(
            "config".into(),
            serde_json::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?,
        );
        c.meta.insert(
            "layout".into(),
            serde_json::to_string(&self.layout).map_err(|e| Error::Format(e.to_string()))?,
        );
        c.meta.insert("trained".into(), self.trained.to_string());
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind")? != "proxy_encoder" {
            return Err(Error::Format("container is not a proxy encoder".into()));
        }
        let parse = |k: &str| c.meta(k).map(str::to_owned);
        let config: ProxyConfig =
            serde_json::from_str(&parse("config")?).map_err(|e| Error::Format(e.to_string()))?;
        let layout: FeatureLayout =
            serde_json::from_str(&parse("layout")?).map_err(|e| Error::Format(e.to_string()))?;
        let mut enc = Self::untrained(config, layout);
        let mut named = std::collections::BTreeMap::new();
        for (k, a) in &c.arrays {
            if let Some(name) = k.strip_prefix("param/") {
                named.insert(name.to_string(), a.to_mat()?);
            }
        }
        enc.params.load_named(&named)?;
        let vec = |k: &str| -> Result<Vec<f64>> { Ok(c.mat(k)?.into_data()) };
        enc.mean = vec("mean")?;
        enc.std = vec("std")?;
        enc.loss_log = vec("loss_log")?;
        enc.trained = parse("trained")? == "true";
        if enc.mean.len() != enc.input_dim() || enc.std.len() != enc.input_dim() {
            return Err(Error::SizeMismatch("encoder statistics do not match its input width".into()));
        }
        Ok(enc)
    }
}

/// Trains the proxy autoencoder for a fixed step budget.
pub fn train_proxy_encoder(clips: &[HeadCentricFeatures], config: ProxyConfig) -> Result<ProxyMotionEncoder> {
    if clips.len() < PROXY_MIN_CLIPS {
        return Err(Error::TooFewSamples {
            got: clips.len(),
            min: PROXY_MIN_CLIPS,
        });
    }
    let layout = clips[0].layout;
    let mut enc = ProxyMotionEncoder::untrained(config, layout);
    let raw: Vec<Vec<f64>> = clips
        .iter()
        .map(|c| {
            enc.check_layout(c)?;
            Ok(proxy_input(c, config.frames))
        })
        .collect::<Result<_>>()?;
    let d = enc.input_dim();
    let n = raw.len() as f64;
    for j in 0..d {
        let m = raw.iter().map(|r| r[j]).sum::<f64>() / n;
        let v = raw.iter().map(|r| (r[j] - m) * (r[j] - m)).sum::<f64>() / n;
        enc.mean[j] = m as f32 as f64;
        enc.std[j] = v.sqrt().max(1e-3) as f32 as f64;
    }
    let x = enc.standardize(&raw);
    let initial = enc.reconstruction(&x);

    let mut opt = AdamW::new(&enc.params, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let batch = config.batch.min(raw.len());
    for step in 0..config.steps {
        let rows: Vec<Vec<f64>> = (0..batch)
            .map(|_| x.row(rng.random_range(0..raw.len())).to_vec())
            .collect();
        let xb = Mat::from_rows(&rows)?;
        let grads = {
            let mut tape = Tape::new(&enc.params);
            let xv = tape.constant(xb.clone());
            let (_, out) = enc.forward(&mut tape, xv);
            let loss = tape.mse(out, &xb);
            if !tape.value(loss).get(0, 0).is_finite() {
                return Err(Error::Numerical {
                    step,
                    detail: "proxy encoder loss is not finite".into(),
                });
            }
            tape.backward(loss)
        };
        opt.update(&mut enc.params, &grads, config.lr, true);
    }
    let last = enc.reconstruction(&x);
    enc.loss_log = vec![initial as f32 as f64, last as f32 as f64];
    enc.trained = true;
    Ok(enc)
}

/// Cosine similarity of the two clips' latents.
pub fn semantic_similarity(
    pred: &HeadCentricFeatures,
    gt: &HeadCentricFeatures,
    encoder: &ProxyMotionEncoder,
) -> Result<f64> {
    let z = encoder.encode_batch(&[pred, gt])?;
    Ok(cosine_similarity(&z[0], &z[1]))
}

/// FID between the latents of two clip sets.
pub fn fid(
    pred: &[HeadCentricFeatures],
    gt: &[HeadCentricFeatures],
    encoder: &ProxyMotionEncoder,
) -> Result<f64> {
    let a = encoder.encode_batch(&pred.iter().collect::<Vec<_>>())?;
    let b = encoder.encode_batch(&gt.iter().collect::<Vec<_>>())?;
    frechet_distance(&a, &b)
}

/// Everything one clip contributes to an evaluation.
#[derive(Debug, Clone)]
pub struct EvalClip {
    pub positions: Vec<Vec<Vec3>>,
    pub heads: Vec<Se3>,
    pub features: HeadCentricFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub mpjpe: f64,
    pub mpjpe_pa: f64,
    pub mpjpe_h: f64,
    pub head_rot_err: f64,
    pub head_trans_err: f64,
    pub foot_slide: f64,
    pub foot_contact: f64,
    pub semantic_sim: Option<f64>,
    pub degenerate_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// meters
    pub mpjpe: f64,
    pub mpjpe_pa: f64,
    pub mpjpe_h: f64,
    /// Frobenius norm, unitless
    pub head_rot_err: f64,
    /// meters
    pub head_trans_err: f64,
    /// millimeters per frame, on the predictions
    pub foot_slide: f64,
    /// meters, on the predictions
    pub foot_contact: f64,
    pub semantic_sim: Option<f64>,
    pub fid: Option<f64>,
    /// Why FID or semantic similarity is absent, when it is.
    pub notes: Vec<String>,
    pub per_clip: Vec<ClipMetrics>,
}

/// Per-clip metrics and their means; FID over all clips when an encoder is
/// supplied and each set holds enough clips.
pub fn evaluate(
    pred: &[EvalClip],
    gt: &[EvalClip],
    hand_indices: &[usize],
    foot_indices: &[usize],
    encoder: Option<&ProxyMotionEncoder>,
) -> Result<MetricsReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predicted clips vs {} references", pred.len(), gt.len())));
    }
    let mut per_clip = Vec::with_capacity(pred.len());
    let latents = match encoder {
        Some(e) => Some((
            e.encode_batch(&pred.iter().map(|c| &c.features).collect::<Vec<_>>())?,
            e.encode_batch(&gt.iter().map(|c| &c.features).collect::<Vec<_>>())?,
        )),
        None => None,
    };
    for (k, (p, g)) in pred.iter().zip(gt).enumerate() {
        let pa = mpjpe_pa_detailed(&p.positions, &g.positions)?;
        let (rot, trans) = head_errors(&p.heads, &g.heads)?;
        per_clip.push(ClipMetrics {
            mpjpe: mpjpe(&p.positions, &g.positions)?,
            mpjpe_pa: pa.value,
            mpjpe_h: mpjpe_h(&p.positions, &g.positions, hand_indices)?,
            head_rot_err: rot,
            head_trans_err: trans,
            foot_slide: if p.positions.len() > 1 {
                foot_slide(&p.positions, foot_indices)?
            } else {
                0.0
            },
            foot_contact: foot_contact(&p.positions, foot_indices)?,
            semantic_sim: latents.as_ref().map(|(a, b)| cosine_similarity(&a[k], &b[k])),
            degenerate_frames: pa.degenerate_frames,
        });
    }
    let mean = |f: &dyn Fn(&ClipMetrics) -> f64| per_clip.iter().map(f).sum::<f64>() / per_clip.len() as f64;
    let mut notes = Vec::new();
    let fid = match &latents {
        Some((a, b)) => match frechet_distance(a, b) {
            Ok(v) => Some(v),
            Err(Error::TooFewSamples { got, min }) => {
                notes.push(format!("fid needs at least {min} clips per set, got {got}"));
                None
            }
            Err(e) => return Err(e),
        },
        None => {
            notes.push("no proxy encoder supplied: semantic_sim and fid skipped".into());
            None
        }
    };
    Ok(MetricsReport {
        mpjpe: mean(&|c| c.mpjpe),
        mpjpe_pa: mean(&|c| c.mpjpe_pa),
        mpjpe_h: mean(&|c| c.mpjpe_h),
        head_rot_err: mean(&|c| c.head_rot_err),
        head_trans_err: mean(&|c| c.head_trans_err),
        foot_slide: mean(&|c| c.foot_slide),
        foot_contact: mean(&|c| c.foot_contact),
        semantic_sim: latents.as_ref().map(|_| mean(&|c| c.semantic_sim.unwrap())),
        fid,
        notes,
        per_clip,
    })
}

impl MetricsReport {
    /// Human-readable table followed by a `key = value` block.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
        let rows = [
            ("mpjpe", "m", format!("{:.6}", self.mpjpe)),
            ("mpjpe_pa", "m", format!("{:.6}", self.mpjpe_pa)),
            ("mpjpe_h", "m", format!("{:.6}", self.mpjpe_h)),
            ("head_rot_err", "", format!("{:.6}", self.head_rot_err)),
            ("head_trans_err", "m", format!("{:.6}", self.head_trans_err)),
            ("foot_slide", "mm/frame", format!("{:.6}", self.foot_slide)),
            ("foot_contact", "m", format!("{:.6}", self.foot_contact)),
            ("semantic_sim", "", opt(self.semantic_sim)),
            ("fid", "", opt(self.fid)),
        ];
        let mut s = String::from(
            "# semantic_sim and fid use a locally trained proxy encoder; their\n# absolute values are only comparable within this tool.\n\n",
        );
        s += &format!("{:<16}{:>14}  {}\n", "metric", "value", "unit");
        for (k, u, v) in &rows {
            s += &format!("{k:<16}{v:>14}  {u}\n");
        }
        for n in &self.notes {
            s += &format!("# note: {n}\n");
        }
        s += "\n[metrics]\n";
        for (k, _, v) in &rows {
            s += &format!("{k} = {v}\n");
        }
        s += &format!("clips = {}\n", self.per_clip.len());
        s
    }

    pub fn per_clip_csv(&self) -> String {
        let mut s = String::from(
            "clip,mpjpe,mpjpe_pa,mpjpe_h,head_rot_err,head_trans_err,foot_slide,foot_contact,semantic_sim\n",
        );
        for (i, c) in self.per_clip.iter().enumerate() {
            s += &format!(
                "{i},{},{},{},{},{},{},{},{}\n",
                c.mpjpe,
                c.mpjpe_pa,
                c.mpjpe_h,
                c.head_rot_err,
                c.head_trans_err,
                c.foot_slide,
                c.foot_contact,
                c.semantic_sim.map_or(String::new(), |v| v.to_string())
            );
        }
        s
    }
}
