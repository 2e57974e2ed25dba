//! The three demo operations as plain Rust, so they run and test natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use sewercast::band::{band_from_samples, BandError, IntervalBand};
use sewercast::conformal::{apply_corrections, calibrate, joint_coverage, ConformalError};
use sewercast::diffusion::{build_schedule, DiffusionError, ImputationSamples};
use sewercast::series::{classify_condition, ConditionLabel, SeriesError};
use sewercast::synth::{synth_generate, GeneratorConfig, InvalidConfig};

/// Hard cap on generated windows so one click stays responsive.
pub const MAX_WINDOWS: usize = 20_000;
pub const MAX_PREVIEW_WINDOWS: usize = 14;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Generator(#[from] InvalidConfig),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Band(#[from] BandError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTrace {
    pub name: String,
    pub rain: bool,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub window_len: usize,
    pub cadence_secs: i64,
    pub start_time: i64,
    pub channels: Vec<ChannelTrace>,
    /// Condition of each consecutive window.
    pub conditions: Vec<ConditionLabel>,
}

/// `n_windows` consecutive synthetic windows laid end to end.
pub fn preview(seed: u64, storm_rate: f64, n_windows: usize) -> Result<Preview, DemoError> {
    if n_windows == 0 || n_windows > MAX_PREVIEW_WINDOWS {
        return Err(DemoError::Input(format!("windows must be in 1..={MAX_PREVIEW_WINDOWS}")));
    }
    let config = GeneratorConfig {
        n_windows,
        storm_rate,
        ..GeneratorConfig::default()
    };
    let windows = synth_generate(&config, seed)?;
    let conditions = windows
        .iter()
        .map(|w| classify_condition(w, 0.1))
        .collect::<Result<Vec<_>, _>>()?;
    let channels = config
        .channels()
        .into_iter()
        .enumerate()
        .map(|(c, meta)| ChannelTrace {
            rain: meta.kind == sewercast::series::ChannelKind::Rain,
            name: meta.name,
            values: windows.iter().flat_map(|w| w.values.row(c).to_vec()).collect(),
        })
        .collect();
    Ok(Preview {
        window_len: config.window_len,
        cadence_secs: config.cadence_secs,
        start_time: config.start_time,
        channels,
        conditions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCurve {
    /// `β_t` for `t = 1..=T`.
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<ScheduleCurve, DemoError> {
    let s = build_schedule(steps, beta_min, beta_max)?;
    Ok(ScheduleCurve {
        beta: s.betas().to_vec(),
        alpha_bar: s.alpha_bars().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalRequest {
    pub seed: u64,
    pub condition: ConditionLabel,
    pub calibration: usize,
    pub test: usize,
    pub horizon: usize,
    pub alpha: f64,
    /// Sample spread as a fraction of the forecaster's true error scale;
    /// below 1 the raw bands are too narrow.
    pub spread: f64,
}

impl Default for ConformalRequest {
    fn default() -> Self {
        Self {
            seed: 7,
            condition: ConditionLabel::Dry,
            calibration: 1000,
            test: 200,
            horizon: 40,
            alpha: 0.9,
            spread: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSeries {
    pub truth: Vec<f64>,
    pub raw: IntervalBand,
    pub conformalized: IntervalBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalDemo {
    pub corrections: Vec<f64>,
    pub level: f64,
    pub raw_coverage: f64,
    pub conformal_coverage: f64,
    pub raw_width: f64,
    pub conformal_width: f64,
    pub example: ExampleSeries,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// A forecaster whose median wanders from the truth along an AR(1) path of
/// scale `σ` and whose samples spread `spread · σ` around that median.
fn forecaster_samples(truth: &[f64], spread: f64, rng: &mut ChaCha8Rng) -> ImputationSamples {
    let h = truth.len();
    let mean = truth.iter().sum::<f64>() / h as f64;
    let sd = (truth.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / h as f64).sqrt();
    let sigma = 0.005 + 0.3 * sd;
    let phi: f64 = 0.8;
    let mut path = Vec::with_capacity(h);
    let mut e = sigma * normal(rng);
    for _ in 0..h {
        path.push(e);
        e = phi * e + sigma * (1.0 - phi * phi).sqrt() * normal(rng);
    }
    let values = (0..100)
        .map(|_| {
            truth
                .iter()
                .zip(&path)
                .map(|(y, b)| y + b + spread * sigma * normal(rng))
                .collect()
        })
        .collect();
    ImputationSamples {
        start_time: 0,
        positions: (0..h).map(|t| (0, t)).collect(),
        channel_names: vec!["sensor_1".into()],
        values,
    }
}

/// Calibrates on synthetic `sensor_1` forecasts of one condition and scores
/// raw and conformalized bands on held-out series.
pub fn conformal(req: &ConformalRequest) -> Result<ConformalDemo, DemoError> {
    let config = GeneratorConfig {
        // Frequent storms keep wet pools reachable.
        storm_rate: 2e-3,
        n_windows: 500,
        ..GeneratorConfig::default()
    };
    if req.horizon == 0 || req.horizon > config.window_len {
        return Err(DemoError::Input(format!("horizon must be in 1..={}", config.window_len)));
    }
    if req.test == 0 {
        return Err(DemoError::Input("need at least one test series".into()));
    }
    if !(req.spread > 0.0 && req.spread.is_finite()) {
        return Err(DemoError::Input("spread must be positive".into()));
    }
    let wanted = req.calibration + req.test;
    let mut truths: Vec<Vec<f64>> = Vec::with_capacity(wanted);
    let mut generated = 0;
    let mut batch_seed = req.seed;
    while truths.len() < wanted {
        if generated >= MAX_WINDOWS {
            return Err(DemoError::Input(format!(
                "only {} {} series in {MAX_WINDOWS} windows; ask for fewer",
                truths.len(),
                req.condition
            )));
        }
        for w in synth_generate(&config, batch_seed)? {
            if classify_condition(&w, 0.1)? == req.condition {
                let skip = w.len() - req.horizon;
                truths.push(w.values.row(0).iter().skip(skip).copied().collect());
            }
        }
        generated += config.n_windows;
        batch_seed = batch_seed.wrapping_add(1);
    }
    truths.truncate(wanted);

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let pool = truths
        .into_iter()
        .map(|y| {
            let samples = forecaster_samples(&y, req.spread, &mut rng);
            Ok((band_from_samples(&samples, req.alpha, "sensor_1", req.condition)?, y))
        })
        .collect::<Result<Vec<_>, DemoError>>()?;
    let (cal, test) = pool.split_at(req.calibration);
    let profile = calibrate(cal, req.alpha, req.seed)?;
    let raw: Vec<IntervalBand> = test.iter().map(|(b, _)| b.clone()).collect();
    let conf = raw
        .iter()
        .map(|b| apply_corrections(b, &profile))
        .collect::<Result<Vec<_>, _>>()?;
    let truth: Vec<Vec<f64>> = test.iter().map(|(_, y)| y.clone()).collect();
    let mean_width = |bands: &[IntervalBand]| bands.iter().map(|b| b.mean_width()).sum::<f64>() / bands.len() as f64;
    Ok(ConformalDemo {
        raw_coverage: joint_coverage(&raw, &truth)?,
        conformal_coverage: joint_coverage(&conf, &truth)?,
        raw_width: mean_width(&raw),
        conformal_width: mean_width(&conf),
        example: ExampleSeries {
            truth: truth[0].clone(),
            raw: raw[0].clone(),
            conformalized: conf[0].clone(),
        },
        corrections: profile.corrections,
        level: profile.level,
    })
}
