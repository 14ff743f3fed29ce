//! Fixed-length clip extraction with a take-level train/validation split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub window_s: f64,
    pub train_stride_s: f64,
    pub eval_stride_s: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_s: 8.0,
            train_stride_s: 2.0,
            eval_stride_s: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClipRef {
    pub take: usize,
    pub start: usize,
    pub len: usize,
}

/// Disjoint take ids for training and validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TakeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl TakeSplit {
    /// Seeded shuffle, then the first `round(n * val_fraction)` takes go to validation.
    pub fn by_fraction(n_takes: usize, val_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&val_fraction) {
            return Err(Error::Contract(format!("validation fraction {val_fraction} outside [0, 1]")));
        }
        let mut ids: Vec<usize> = (0..n_takes).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (n_takes as f64 * val_fraction).round() as usize;
        let mut val = ids[..n_val].to_vec();
        let mut train = ids[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Ok(Self { train, val })
    }

    pub fn all_train(n_takes: usize) -> Self {
        Self {
            train: (0..n_takes).collect(),
            val: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClipIndex {
    pub train: Vec<ClipRef>,
    pub val: Vec<ClipRef>,
}

/// Start frames of every full window within a take.
pub fn window_starts(n_frames: usize, fps: f64, window_s: f64, stride_s: f64) -> Result<Vec<usize>> {
    let window = (window_s * fps).round() as usize;
    let stride = (stride_s * fps).round() as usize;
    if window == 0 || stride == 0 {
        return Err(Error::Contract("window and stride must span at least one frame".into()));
    }
    if n_frames < window {
        return Ok(Vec::new());
    }
    Ok((0..=n_frames - window).step_by(stride).collect())
}

pub fn window_dataset(
    take_lengths: &[usize],
    fps: f64,
    cfg: &WindowConfig,
    split: &TakeSplit,
) -> Result<ClipIndex> {
    if split.train.iter().any(|t| split.val.contains(t)) {
        return Err(Error::Contract("a take appears in both splits".into()));
    }
    let window = (cfg.window_s * fps).round() as usize;
    let clips = |ids: &[usize], stride: f64| -> Result<Vec<ClipRef>> {
        let mut out = Vec::new();
        for &take in ids {
            let n = *take_lengths
                .get(take)
                .ok_or_else(|| Error::Contract(format!("take {take} out of range")))?;
            for start in window_starts(n, fps, cfg.window_s, stride)? {
                out.push(ClipRef { take, start, len: window });
            }
        }
        Ok(out)
    };
    Ok(ClipIndex {
        train: clips(&split.train, cfg.train_stride_s)?,
        val: clips(&split.val, cfg.eval_stride_s)?,
    })
}
