//! Cosine noise schedule, forward noising, the x0-prediction training loss,
//! ancestral sampling and prefix-overwriting ("repaint") completion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Maximum per-step β.
pub const MAX_BETA: f64 = 0.999;
/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

/// Cumulative signal levels `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(t_max: usize) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::Contract("t_max must be at least 1".into()));
        }
        let s = COSINE_OFFSET;
        let f = |t: usize| {
            let x = (t as f64 / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        for t in 1..=t_max {
            let beta = (1.0 - (f(t) / f0) / (f(t - 1) / f0)).min(MAX_BETA);
            let prev = alpha_bar[t - 1];
            alpha_bar.push(prev * (1.0 - beta));
        }
        Ok(Self { alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `β_t = 1 − ᾱ_t / ᾱ_{t−1}` for `t ≥ 1`.
    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    /// Descending timesteps visited by the sampler. `None` visits every step;
    /// `Some(k)` visits `k` evenly spaced steps from `t_max` down to 1.
    pub fn timesteps(&self, steps: Option<usize>) -> Vec<usize> {
        let t_max = self.t_max();
        match steps {
            Some(k) if k >= 1 && k < t_max => {
                let mut ts: Vec<usize> = (0..k)
                    .map(|i| {
                        if k == 1 {
                            t_max
                        } else {
                            1 + ((t_max - 1) as f64 * i as f64 / (k - 1) as f64).round() as usize
                        }
                    })
                    .collect();
                ts.dedup();
                ts.reverse();
                ts
            }
            _ => (1..=t_max).rev().collect(),
        }
    }
}

/// `x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · noise`
pub fn q_sample(schedule: &NoiseSchedule, x0: &Mat, t: usize, noise: &Mat) -> Result<Mat> {
    if t > schedule.t_max() {
        return Err(Error::Contract(format!(
            "timestep {t} outside [0, {}]",
            schedule.t_max()
        )));
    }
    if x0.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "x0 is {:?} but noise is {:?}",
            x0.shape(),
            noise.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(noise, |x, e| a * x + b * e))
}

/// A network predicting the clean sample from a noisy one.
pub trait Denoise {
    type Cond;

    fn predict(&self, x_t: &Mat, t: usize, cond: &Self::Cond) -> Result<Mat>;
}

/// Mean squared error between `x0` and the model's prediction from `x_t`.
pub fn denoise_loss<M: Denoise>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &Mat,
    cond: &M::Cond,
    t: usize,
    noise: &Mat,
) -> Result<f64> {
    let x_t = q_sample(schedule, x0, t, noise)?;
    let pred = model.predict(&x_t, t, cond)?;
    if pred.shape() != x0.shape() {
        return Err(Error::Shape(format!(
            "model returned {:?}, expected {:?}",
            pred.shape(),
            x0.shape()
        )));
    }
    Ok(pred
        .data()
        .iter()
        .zip(x0.data())
        .map(|(p, x)| (p - x) * (p - x))
        .sum::<f64>()
        / x0.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SamplerOptions {
    /// Number of evenly strided reverse steps; `None` runs all `t_max`.
    pub steps: Option<usize>,
    /// Drops the posterior noise (deterministic mean path).
    pub zero_variance: bool,
}

pub fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Posterior `q(x_{t'} | x_t, x̂0)` between two visited timesteps `t' < t`.
fn posterior(
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    x_t: &Mat,
    x0_hat: &Mat,
) -> (Mat, f64) {
    if t_prev == 0 {
        return (x0_hat.clone(), 0.0);
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let var = (1.0 - ab_prev) / (1.0 - ab_t) * beta;
    (x0_hat.zip_map(x_t, |a, b| c0 * a + ct * b), var)
}

fn check_output(pred: &Mat, rows: usize, cols: usize, t: usize) -> Result<()> {
    if pred.shape() != (rows, cols) {
        return Err(Error::Shape(format!(
            "model returned {:?} at step {t}, expected ({rows}, {cols})",
            pred.shape()
        )));
    }
    if !pred.all_finite() {
        return Err(Error::Numerical {
            step: t,
            detail: format!("non-finite model output (norm {})", pred.sq_norm().sqrt()),
        });
    }
    Ok(())
}

/// Ancestral sampling from pure noise; deterministic for a fixed seed.
pub fn sample<M: Denoise>(
    model: &M,
    schedule: &NoiseSchedule,
    cond: &M::Cond,
    frames: usize,
    width: usize,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<Mat> {
    let known = Mat::zeros(0, width);
    run_sampler(model, schedule, cond, &known, frames, width, seed, opts)
}

/// Completes a sequence whose first `known.rows()` frames are given. After
/// every reverse step those rows are overwritten with the known frames noised
/// to the next level; the returned prefix equals `known` exactly.
pub fn repaint_forecast<M: Denoise>(
    model: &M,
    schedule: &NoiseSchedule,
    known: &Mat,
    frames: usize,
    cond: &M::Cond,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<Mat> {
    if known.rows() >= frames {
        return Err(Error::Contract(format!(
            "{} known frames leave nothing to complete in {frames}",
            known.rows()
        )));
    }
    if !known.all_finite() {
        return Err(Error::Contract("known frames contain non-finite values".into()));
    }
    run_sampler(model, schedule, cond, known, frames, known.cols(), seed, opts)
}

#[allow(clippy::too_many_arguments)]
fn run_sampler<M: Denoise>(
    model: &M,
    schedule: &NoiseSchedule,
    cond: &M::Cond,
    known: &Mat,
    frames: usize,
    width: usize,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_known = known.rows();
    let mut x = standard_normal(&mut rng, frames, width);
    let ts = schedule.timesteps(opts.steps);
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let x0_hat = model.predict(&x, t, cond)?;
        check_output(&x0_hat, frames, width, t)?;
        let (mean, var) = posterior(schedule, t, t_prev, &x, &x0_hat);
        x = if var > 0.0 && !opts.zero_variance {
            let sd = var.sqrt();
            let eps = standard_normal(&mut rng, frames, width);
            mean.zip_map(&eps, |m, e| m + sd * e)
        } else {
            mean
        };
        if n_known > 0 {
            if t_prev > 0 {
                let eps = standard_normal(&mut rng, n_known, width);
                let noised = q_sample(schedule, known, t_prev, &eps)?;
                for i in 0..n_known {
                    x.row_mut(i).copy_from_slice(noised.row(i));
                }
            } else {
                for i in 0..n_known {
                    x.row_mut(i).copy_from_slice(known.row(i));
                }
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(Mat);
    impl Denoise for Constant {
        type Cond = ();
        fn predict(&self, _x: &Mat, _t: usize, _c: &()) -> Result<Mat> {
            Ok(self.0.clone())
        }
    }

    struct Identity;
    impl Denoise for Identity {
        type Cond = Mat;
        fn predict(&self, _x: &Mat, _t: usize, c: &Mat) -> Result<Mat> {
            Ok(c.clone())
        }
    }

    struct Zero;
    impl Denoise for Zero {
        type Cond = ();
        fn predict(&self, x: &Mat, _t: usize, _c: &()) -> Result<Mat> {
            Ok(Mat::zeros(x.rows(), x.cols()))
        }
    }

    struct Nan;
    impl Denoise for Nan {
        type Cond = ();
        fn predict(&self, x: &Mat, _t: usize, _c: &()) -> Result<Mat> {
            Ok(Mat::filled(x.rows(), x.cols(), f64::NAN))
        }
    }

    #[test]
    fn schedule_shape_and_endpoints() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.alpha_bars().len(), 1001);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(1000) < 1e-3);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let b = s.beta(t);
            assert!(b > 0.0 && b <= MAX_BETA + 1e-12);
        }
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn schedule_t4_matches_closed_form() {
        let s = NoiseSchedule::cosine(4).unwrap();
        let f = |t: f64| ((t / 4.0 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        for t in 0..4 {
            let expect = f(t as f64) / f(0.0);
            assert!((s.alpha_bar(t) - expect).abs() < 1e-12, "t={t}");
        }
        // The last step is clipped at beta = 0.999.
        let expect_last = f(3.0) / f(0.0) * (1.0 - MAX_BETA);
        assert!((s.alpha_bar(4) - expect_last).abs() < 1e-12);
    }

    #[test]
    fn strided_timesteps() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let ts = s.timesteps(Some(50));
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 1);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.timesteps(None).len(), 1000);
    }

    #[test]
    fn q_sample_boundaries() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let x0 = Mat::from_fn(3, 2, |i, j| i as f64 - j as f64);
        let noise = Mat::filled(3, 2, 0.7);
        assert_eq!(q_sample(&s, &x0, 0, &noise).unwrap(), x0);
        let z = q_sample(&s, &x0, 5, &Mat::zeros(3, 2)).unwrap();
        let a = s.alpha_bar(5).sqrt();
        assert_eq!(z, x0.map(|v| a * v));
        assert!(q_sample(&s, &x0, 11, &noise).is_err());
    }

    #[test]
    fn q_sample_is_affine() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let x = Mat::from_fn(2, 3, |i, j| (i + 2 * j) as f64 * 0.3);
        let y = Mat::from_fn(2, 3, |i, j| (i as f64 - j as f64) * 0.2);
        let e = Mat::from_fn(2, 3, |i, j| (i * j) as f64 * 0.1 - 0.2);
        let zero = Mat::zeros(2, 3);
        let sum = x.zip_map(&y, |a, b| a + b);
        let lhs = q_sample(&s, &sum, 40, &e).unwrap();
        let rhs = q_sample(&s, &x, 40, &e)
            .unwrap()
            .zip_map(&q_sample(&s, &y, 40, &zero).unwrap(), |a, b| a + b);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn loss_of_oracle_and_zero_models() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let x0 = Mat::from_fn(4, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 1.0));
        let noise = Mat::filled(4, 3, 0.3);
        let oracle = Identity;
        assert_eq!(denoise_loss(&oracle, &s, &x0, &x0, 10, &noise).unwrap(), 0.0);
        let expect = x0.sq_norm() / x0.len() as f64;
        assert_eq!(denoise_loss(&Zero, &s, &x0, &(), 10, &noise).unwrap(), expect);
    }

    #[test]
    fn single_step_constant_model() {
        let s = NoiseSchedule::cosine(1).unwrap();
        let c = Mat::filled(3, 2, 0.25);
        let out = sample(&Constant(c.clone()), &s, &(), 3, 2, 9, &SamplerOptions::default()).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = NoiseSchedule::cosine(30).unwrap();
        let m = Constant(Mat::filled(5, 2, -1.0));
        let a = sample(&m, &s, &(), 5, 2, 42, &SamplerOptions::default()).unwrap();
        let b = sample(&m, &s, &(), 5, 2, 42, &SamplerOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_target_converges_in_zero_variance_mode() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let target = Mat::from_fn(4, 3, |i, j| i as f64 * 0.5 - j as f64);
        let opts = SamplerOptions {
            steps: None,
            zero_variance: true,
        };
        let out = sample(&Constant(target.clone()), &s, &(), 4, 3, 1, &opts).unwrap();
        assert!(out.max_abs_diff(&target) < 1e-12);
    }

    #[test]
    fn non_finite_output_aborts() {
        let s = NoiseSchedule::cosine(5).unwrap();
        let err = sample(&Nan, &s, &(), 2, 2, 0, &SamplerOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical { step: 5, .. }));
    }

    #[test]
    fn repaint_prefix_is_exact() {
        let s = NoiseSchedule::cosine(40).unwrap();
        let m = Constant(Mat::filled(6, 3, 0.1));
        let known = Mat::from_fn(2, 3, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        for seed in 0..3 {
            let out = repaint_forecast(&m, &s, &known, 6, &(), seed, &SamplerOptions::default()).unwrap();
            for i in 0..2 {
                assert_eq!(out.row(i), known.row(i));
            }
        }
        assert!(repaint_forecast(&m, &s, &Mat::zeros(6, 3), 6, &(), 0, &SamplerOptions::default()).is_err());
    }

    #[test]
    fn repaint_with_empty_prefix_equals_sample() {
        let s = NoiseSchedule::cosine(20).unwrap();
        let m = Constant(Mat::filled(4, 2, 0.5));
        let a = repaint_forecast(&m, &s, &Mat::zeros(0, 2), 4, &(), 7, &SamplerOptions::default()).unwrap();
        let b = sample(&m, &s, &(), 4, 2, 7, &SamplerOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
