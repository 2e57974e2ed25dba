//! DDPM noise schedule, forward corruption, the training loop and the
//! ancestral reverse sampler.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{
    optimizer_step, DenoiseInput, DenoiserError, DenoiserParams, Encodings, OptimizerState, Scalar,
    TrainingExample,
};
use crate::masking::{training_mask, Mask, MaskError, MaskSpec};
use crate::series::{NormalizationStats, TimeSeriesWindow};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.5;
pub const DEFAULT_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule range: {0}")]
    InvalidRange(String),
    #[error("diffusion step {step} outside 1..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("mask has no target positions")]
    EmptyTarget,
    #[error("no training windows")]
    NoWindows,
    #[error("invalid training setup: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `β`, `α = 1 − β` and `ᾱ_t = Π_{s≤t} α_s`, stored zero-based; accessors
/// take the one-based step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule is valid")
    }
}

/// Quadratic interpolation in `√β` between `beta_min` and `beta_max`.
pub fn build_schedule(
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if steps < 1 {
        return Err(DiffusionError::InvalidRange("need at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(DiffusionError::InvalidRange(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let (lo, hi) = (beta_min.sqrt(), beta_max.sqrt());
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_min]
    } else {
        (0..steps)
            .map(|i| {
                let r = lo + i as f64 / (steps - 1) as f64 * (hi - lo);
                r * r
            })
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`, elementwise.
pub fn forward_noise(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(DiffusionError::LengthMismatch {
            expected: x0.len(),
            got: eps.len(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Anything that estimates the injected noise at a mask's target positions.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, input: &DenoiseInput<'_>) -> Result<Vec<f64>, DiffusionError>;
}

impl<S: Scalar> NoisePredictor for DenoiserParams<S> {
    fn predict_noise(&self, input: &DenoiseInput<'_>) -> Result<Vec<f64>, DiffusionError> {
        Ok(DenoiserParams::predict_noise(self, input)?)
    }
}

/// Network parameters bound to a precomputed position encoding, so repeated
/// calls on windows of one length skip rebuilding it.
pub struct PreparedModel<'a, S> {
    params: &'a DenoiserParams<S>,
    encodings: Encodings<S>,
}

impl<'a, S: Scalar> PreparedModel<'a, S> {
    pub fn new(params: &'a DenoiserParams<S>, len: usize) -> Self {
        Self {
            params,
            encodings: Encodings::new(len, params.config.width),
        }
    }
}

impl<S: Scalar> NoisePredictor for PreparedModel<'_, S> {
    fn predict_noise(&self, input: &DenoiseInput<'_>) -> Result<Vec<f64>, DiffusionError> {
        Ok(self.params.predict_noise_with(input, &self.encodings)?)
    }
}

/// One ancestral chain from `x_T ~ N(0, I)` down to `x_0` over the mask's
/// target positions; observed context is read-only throughout.
pub fn reverse_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    window: &TimeSeriesWindow,
    mask: &Mask,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<f64>, DiffusionError> {
    let m = mask.count();
    if m == 0 {
        return Err(DiffusionError::EmptyTarget);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = model.predict_noise(&DenoiseInput {
            window,
            mask,
            x_t: &x,
            step: t,
        })?;
        if eps_hat.len() != m {
            return Err(DiffusionError::LengthMismatch {
                expected: m,
                got: eps_hat.len(),
            });
        }
        let beta = schedule.beta(t);
        let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        let sigma = beta.sqrt();
        for (xi, e) in x.iter_mut().zip(&eps_hat) {
            *xi = (*xi - coef * e) * inv_sqrt_alpha;
            if t > 1 {
                let z: f64 = rng.sample(StandardNormal);
                *xi += sigma * z;
            }
        }
    }
    Ok(x)
}

/// `N` imputations of one window's targets, in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationSamples {
    pub start_time: i64,
    /// `(channel, timestep)` of each target, in mask order.
    pub positions: Vec<(usize, usize)>,
    pub channel_names: Vec<String>,
    /// One row per sample, ordered by sample index.
    pub values: Vec<Vec<f64>>,
}

impl ImputationSamples {
    pub fn n_samples(&self) -> usize {
        self.values.len()
    }

    pub fn n_targets(&self) -> usize {
        self.positions.len()
    }

    /// All sample values at target position `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[j]).collect()
    }

    /// Long-format dump: `sample_index,channel,timestep,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), DiffusionError> {
        writeln!(out, "sample_index,channel,timestep,value")?;
        for (i, row) in self.values.iter().enumerate() {
            for (&(c, l), v) in self.positions.iter().zip(row) {
                writeln!(out, "{i},{},{l},{v:.6}", self.channel_names[c])?;
            }
        }
        Ok(())
    }
}

fn assemble(
    window: &TimeSeriesWindow,
    mask: &Mask,
    stats: &NormalizationStats,
    normalized: Vec<Vec<f64>>,
) -> ImputationSamples {
    let positions = mask.positions();
    let values = normalized
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(&positions)
                .map(|(&z, &(c, _))| stats.denormalize_value(c, z))
                .collect()
        })
        .collect();
    ImputationSamples {
        start_time: window.start_time,
        positions,
        channel_names: window.channels.iter().map(|c| c.name.clone()).collect(),
        values,
    }
}

fn check_count(n: usize) -> Result<(), DiffusionError> {
    if n == 0 {
        return Err(DiffusionError::InvalidConfig("sample count must be >= 1".into()));
    }
    Ok(())
}

/// `n` chains seeded `seed + i`, de-normalized with `stats`. `window` must
/// already be normalized. Chains run on the rayon pool when the `parallel`
/// feature is on; the result is identical to [`sample_n_sequential`].
pub fn sample_n<P: NoisePredictor + ?Sized>(
    model: &P,
    window: &TimeSeriesWindow,
    mask: &Mask,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
    stats: &NormalizationStats,
) -> Result<ImputationSamples, DiffusionError> {
    check_count(n)?;
    #[cfg(feature = "parallel")]
    let rows = {
        use rayon::prelude::*;
        (0..n)
            .into_par_iter()
            .map(|i| reverse_sample(model, window, mask, schedule, seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows = chains_in_order(model, window, mask, schedule, n, seed)?;
    Ok(assemble(window, mask, stats, rows))
}

/// [`sample_n`] on the calling thread only.
pub fn sample_n_sequential<P: NoisePredictor + ?Sized>(
    model: &P,
    window: &TimeSeriesWindow,
    mask: &Mask,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
    stats: &NormalizationStats,
) -> Result<ImputationSamples, DiffusionError> {
    check_count(n)?;
    let rows = chains_in_order(model, window, mask, schedule, n, seed)?;
    Ok(assemble(window, mask, stats, rows))
}

fn chains_in_order<P: NoisePredictor + ?Sized>(
    model: &P,
    window: &TimeSeriesWindow,
    mask: &Mask,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, DiffusionError> {
    (0..n)
        .map(|i| reverse_sample(model, window, mask, schedule, seed.wrapping_add(i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mask: MaskSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            seed: 0,
            mask: MaskSpec::default(),
        }
    }
}

/// Element 0 is the loss of the first batch before any update; element `e`
/// (for `e ≥ 1`) is the mean batch loss over epoch `e`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub losses: Vec<f64>,
}

impl LossHistory {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    pub fn epochs_done(&self) -> usize {
        self.losses.len().saturating_sub(1)
    }
}

struct Draw {
    mask: Mask,
    step: usize,
    noise: Vec<f64>,
    x_t: Vec<f64>,
}

fn draw_item(
    window: &TimeSeriesWindow,
    spec: &MaskSpec,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Draw>, DiffusionError> {
    let mask = training_mask(window, spec, rng)?;
    if mask.is_empty() {
        return Ok(None);
    }
    let positions = mask.positions();
    let step = rng.random_range(1..=schedule.steps());
    let noise: Vec<f64> = (0..positions.len()).map(|_| rng.sample(StandardNormal)).collect();
    let x0: Vec<f64> = positions.iter().map(|&(c, l)| window.values[[c, l]]).collect();
    let x_t = forward_noise(&x0, step, &noise, schedule)?;
    Ok(Some(Draw {
        mask,
        step,
        noise,
        x_t,
    }))
}

/// Epoch `e` (zero-based) shuffles and draws from a generator on stream `e`
/// of `seed`, so training can resume at any epoch boundary.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Runs epochs `history.epochs_done() .. config.epochs` of masked
/// ε-prediction training, appending to `history`. `windows` must already be
/// normalized. `on_epoch` sees each finished epoch's number and loss.
pub fn train<S: Scalar>(
    params: &mut DenoiserParams<S>,
    state: &mut OptimizerState<S>,
    windows: &[TimeSeriesWindow],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    history: &mut LossHistory,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(), DiffusionError> {
    if windows.is_empty() {
        return Err(DiffusionError::NoWindows);
    }
    if config.batch_size == 0 {
        return Err(DiffusionError::InvalidConfig("batch_size must be >= 1".into()));
    }
    if schedule.steps() != params.config.diffusion_steps {
        return Err(DiffusionError::InvalidConfig(format!(
            "schedule has {} steps, model expects {}",
            schedule.steps(),
            params.config.diffusion_steps
        )));
    }
    let len = windows[0].len();
    let encodings = Encodings::new(len, params.config.width);
    for epoch in history.epochs_done()..config.epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut draws = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if let Some(d) = draw_item(&windows[i], &config.mask, schedule, &mut rng)? {
                    draws.push((i, d));
                }
            }
            if draws.is_empty() {
                continue;
            }
            let batch: Vec<TrainingExample<'_>> = draws
                .iter()
                .map(|(i, d)| TrainingExample {
                    input: DenoiseInput {
                        window: &windows[*i],
                        mask: &d.mask,
                        x_t: &d.x_t,
                        step: d.step,
                    },
                    noise: &d.noise,
                })
                .collect();
            let (loss, grads) = params.loss_and_grad_with(&batch, &encodings)?;
            if history.losses.is_empty() {
                history.losses.push(loss);
            }
            optimizer_step(params, &grads, state)?;
            total += loss;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { f64::NAN };
        history.losses.push(mean);
        on_epoch(epoch + 1, mean);
    }
    Ok(())
}
