//! Synthetic sewer-network data: Poisson-arriving storms drive a chain of
//! level sensors through lagged exponential responses on top of a diurnal
//! cycle and AR(1) measurement noise.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::{ChannelMeta, TimeSeriesWindow, DEFAULT_CADENCE_SECS, DEFAULT_WINDOW_LEN};

#[derive(Debug, Error, PartialEq)]
#[error("invalid generator config: {0}")]
pub struct InvalidConfig(pub String);

/// One level sensor in the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelChannelConfig {
    pub name: String,
    /// Dry-weather mean level (m).
    pub base: f64,
    /// Diurnal amplitude (m).
    pub amplitude: f64,
    /// Diurnal phase (radians).
    pub phase: f64,
    /// Level rise per mm/h of sustained rain (m).
    pub gain: f64,
    /// Exponential response time constant (steps).
    pub decay: f64,
    /// Delay of the rain response (steps).
    pub lag: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_windows: usize,
    pub window_len: usize,
    pub cadence_secs: i64,
    pub start_time: i64,
    /// Expected storm starts per step.
    pub storm_rate: f64,
    pub storm_min_duration: usize,
    pub storm_max_duration: usize,
    /// Gamma shape and scale of the storm peak intensity (mm/h).
    pub peak_shape: f64,
    pub peak_scale: f64,
    /// Gamma-like shape of the in-storm intensity profile.
    pub profile_shape: f64,
    pub noise_ar: f64,
    /// Marginal standard deviation of the AR(1) noise (m).
    pub noise_std: f64,
    pub rain_name: String,
    pub levels: Vec<LevelChannelConfig>,
    /// Steps simulated and discarded before the first window.
    pub burn_in: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let window_len = DEFAULT_WINDOW_LEN;
        let lags = [0usize, 3, 6, 9, 12];
        let bases = [0.155, 0.150, 0.160, 0.152, 0.158];
        let gains = [0.060, 0.055, 0.065, 0.058, 0.070];
        let levels = lags
            .iter()
            .enumerate()
            .map(|(j, &lag)| LevelChannelConfig {
                name: format!("sensor_{}", j + 1),
                base: bases[j],
                amplitude: 0.027,
                phase: -2.0 * PI * lag as f64 / window_len as f64,
                gain: gains[j],
                decay: 12.0,
                lag,
            })
            .collect();
        Self {
            n_windows: 600,
            window_len,
            cadence_secs: DEFAULT_CADENCE_SECS,
            start_time: 1_577_836_800,
            storm_rate: 3.6e-4,
            storm_min_duration: 5,
            storm_max_duration: 30,
            peak_shape: 2.0,
            peak_scale: 2.5,
            profile_shape: 3.0,
            noise_ar: 0.8,
            noise_std: 0.005,
            rain_name: "rain".into(),
            levels,
            burn_in: 240,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), InvalidConfig> {
        let bad = |m: &str| Err(InvalidConfig(m.to_string()));
        if self.levels.len() != 5 {
            return bad("exactly 5 level channels are required");
        }
        if !(self.storm_rate >= 0.0 && self.storm_rate.is_finite()) {
            return bad("storm rate must be finite and >= 0");
        }
        if self.window_len == 0 || self.cadence_secs <= 0 {
            return bad("window length and cadence must be positive");
        }
        if self.storm_min_duration == 0 || self.storm_min_duration > self.storm_max_duration {
            return bad("storm duration range is empty");
        }
        if !(self.peak_shape > 0.0 && self.peak_scale > 0.0 && self.profile_shape >= 1.0) {
            return bad("peak shape/scale must be positive and profile shape >= 1");
        }
        if !(self.noise_ar.abs() < 1.0 && self.noise_std >= 0.0) {
            return bad("noise AR coefficient must be in (-1, 1) and noise std >= 0");
        }
        let mut names: Vec<&str> = self.levels.iter().map(|l| l.name.as_str()).collect();
        names.push(&self.rain_name);
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != names.len() {
            return bad("channel names must be unique");
        }
        if self.levels.iter().any(|l| !(l.decay > 0.0) || !l.gain.is_finite()) {
            return bad("level decay must be positive and gain finite");
        }
        Ok(())
    }

    /// Level channels in declared order followed by the rain channel.
    pub fn channels(&self) -> Vec<ChannelMeta> {
        let mut out: Vec<_> = self
            .levels
            .iter()
            .map(|l| ChannelMeta::level(l.name.clone()))
            .collect();
        out.push(ChannelMeta::rain(self.rain_name.clone()));
        out
    }
}

/// Rain intensity series with Poisson storm arrivals.
fn simulate_rain(config: &GeneratorConfig, steps: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rain = vec![0.0; steps];
    if config.storm_rate == 0.0 {
        return rain;
    }
    let gap = Exp::new(config.storm_rate).expect("validated rate");
    let peak = Gamma::new(config.peak_shape, config.peak_scale).expect("validated peak");
    let k = config.profile_shape;
    let mode = (k - 1.0) / (k + 1.0);
    let mut t = gap.sample(rng);
    while t < steps as f64 {
        let start = t as usize;
        let duration = rng.random_range(config.storm_min_duration..=config.storm_max_duration);
        let p = peak.sample(rng);
        for i in 0..duration {
            let x = (i as f64 + 0.5) / duration as f64;
            let shape = if k == 1.0 {
                (-x).exp()
            } else {
                (x / mode).powf(k - 1.0) * (-(k - 1.0) * (x / mode - 1.0)).exp()
            };
            if let Some(r) = rain.get_mut(start + i) {
                *r += p * shape;
            }
        }
        t += gap.sample(rng);
    }
    rain
}

/// Generates `config.n_windows` consecutive windows. Identical
/// `(config, seed)` pairs give bit-identical output.
pub fn synth_generate(
    config: &GeneratorConfig,
    seed: u64,
) -> Result<Vec<TimeSeriesWindow>, InvalidConfig> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = config.window_len;
    let total = config.n_windows * len;
    let steps = config.burn_in + total;
    let max_lag = config.levels.iter().map(|l| l.lag).max().unwrap_or(0);

    // Rain is simulated from `max_lag` steps earlier so lagged responses are defined.
    let rain = simulate_rain(config, steps + max_lag, &mut rng);
    let rain_at = |step: usize| rain[step + max_lag];

    let innovation = Normal::new(0.0, config.noise_std * (1.0 - config.noise_ar.powi(2)).sqrt())
        .expect("validated noise");
    let k = config.levels.len() + 1;
    let mut values = Array2::<f64>::zeros((k, total));
    for (j, level) in config.levels.iter().enumerate() {
        let retain = (-1.0 / level.decay).exp();
        let mut storage = 0.0;
        let mut noise = config.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        for step in 0..steps {
            storage = storage * retain + (1.0 - retain) * rain[step + max_lag - level.lag];
            noise = config.noise_ar * noise + innovation.sample(&mut rng);
            if step >= config.burn_in {
                let t = step - config.burn_in;
                let diurnal =
                    level.amplitude * (2.0 * PI * (t % len) as f64 / len as f64 + level.phase).sin();
                values[[j, t]] = level.base + diurnal + level.gain * storage + noise;
            }
        }
    }
    for t in 0..total {
        values[[k - 1, t]] = rain_at(config.burn_in + t);
    }

    let channels = config.channels();
    let windows = (0..config.n_windows)
        .map(|w| {
            let slice = values.slice(ndarray::s![.., w * len..(w + 1) * len]).to_owned();
            TimeSeriesWindow {
                observed: Array2::from_elem(slice.dim(), true),
                values: slice,
                start_time: config.start_time + (w * len) as i64 * config.cadence_secs,
                channels: channels.clone(),
            }
        })
        .collect();
    Ok(windows)
}
