//! Dataset loading, split assignment, artifact locations and the per-window
//! forecast shared by the commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sewercast::band::{band_from_samples, IntervalBand};
use sewercast::conformal::{CorrectionProfile, ProfileKey};
use sewercast::denoiser::{load_weights, DenoiserParams};
use sewercast::diffusion::{sample_n, ImputationSamples, LossHistory, NoiseSchedule, PreparedModel};
use sewercast::masking::forecast_mask;
use sewercast::series::{
    classify_condition, read_table, ChannelKind, ConditionLabel, NormalizationStats, SeriesTable,
    TimeSeriesWindow,
};

use crate::config::{RunConfig, SplitConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Split membership from a hash of the window's start time alone, so it is
/// stable across runs, seeds and dataset lengths.
pub fn assign_split(start_time: i64, fractions: &SplitConfig) -> Split {
    let u = (splitmix64(start_time as u64) >> 11) as f64 / (1u64 << 53) as f64;
    if u < fractions.train {
        Split::Train
    } else if u < fractions.train + fractions.calibration {
        Split::Calibration
    } else {
        Split::Test
    }
}

/// Base seed of the sampling chains for one (window, channel) pair.
pub fn chain_seed(seed: u64, start_time: i64, channel: usize) -> u64 {
    splitmix64(seed ^ splitmix64(start_time as u64 ^ splitmix64(channel as u64)))
}

/// The dataset cut into non-overlapping windows, each tagged with a split.
pub struct Dataset {
    pub table: SeriesTable,
    pub windows: Vec<TimeSeriesWindow>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn load(config: &RunConfig) -> Result<Self, CliError> {
        let path = config.dataset_path();
        if !path.exists() {
            return Err(CliError::MissingArtifact(format!(
                "dataset {} (run `synth` or set data.csv)",
                path.display()
            )));
        }
        let file = std::fs::File::open(&path)?;
        let table = read_table(std::io::BufReader::new(file), &config.channels(), config.data.cadence_secs)?;
        let len = config.data.window_len;
        let windows = table.windows(len, len);
        if windows.is_empty() {
            return Err(CliError::Data(format!(
                "{} has {} rows, fewer than one {len}-step window",
                path.display(),
                table.len()
            )));
        }
        let splits = windows
            .iter()
            .map(|w| assign_split(w.start_time, &config.split))
            .collect();
        Ok(Self { table, windows, splits })
    }

    pub fn in_split(&self, split: Split) -> Vec<&TimeSeriesWindow> {
        self.windows
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(w, _)| w)
            .collect()
    }

    /// Windows every `stride` rows that lie entirely inside training-split
    /// windows, thinned evenly to at most `max` when given.
    pub fn training_windows(&self, len: usize, stride: usize, max: Option<usize>) -> Vec<TimeSeriesWindow> {
        let cadence = self.table.cadence;
        let all: Vec<TimeSeriesWindow> = self
            .table
            .windows(len, stride)
            .into_iter()
            .filter(|w| {
                let first = ((w.start_time - self.table.start_time) / cadence) as usize;
                (first / len..=(first + len - 1) / len).all(|b| self.splits.get(b) == Some(&Split::Train))
            })
            .collect();
        match max {
            Some(m) if m < all.len() => {
                let n = all.len();
                (0..m).map(|i| all[i * n / m].clone()).collect()
            }
            _ => all,
        }
    }

    /// Windows of `split` grouped by condition, each group in time order and
    /// truncated to `cap`.
    pub fn by_condition(
        &self,
        split: Split,
        threshold: f64,
        cap: Option<usize>,
    ) -> Result<BTreeMap<ConditionLabel, Vec<&TimeSeriesWindow>>, CliError> {
        let mut groups: BTreeMap<ConditionLabel, Vec<&TimeSeriesWindow>> = BTreeMap::new();
        for w in self.in_split(split) {
            groups.entry(classify_condition(w, threshold)?).or_default().push(w);
        }
        if let Some(cap) = cap {
            for g in groups.values_mut() {
                g.truncate(cap);
            }
        }
        Ok(groups)
    }
}

/// Index of a level channel called `name`.
pub fn level_channel(window: &TimeSeriesWindow, name: &str) -> Result<usize, CliError> {
    match window.channel_index(name) {
        Some(c) if window.channels[c].kind == ChannelKind::Level => Ok(c),
        Some(_) => Err(CliError::Config(format!("`{name}` is the rain channel, not a sensor"))),
        None => Err(CliError::Config(format!("no sensor named `{name}` in the dataset"))),
    }
}

/// Observed values of the final `horizon` steps of `channel`; `None` if any
/// is missing.
pub fn truth_tail(window: &TimeSeriesWindow, channel: usize, horizon: usize) -> Option<Vec<f64>> {
    let len = window.len();
    (len - horizon..len).map(|l| window.get(channel, l)).collect()
}

/// Mean absolute error of repeating the last context value of `channel`
/// across the horizon. `None` when that value or any truth is missing.
pub fn persistence_mae(window: &TimeSeriesWindow, channel: usize, horizon: usize) -> Option<f64> {
    let len = window.len();
    let last = window.get(channel, len - horizon - 1)?;
    let truth = truth_tail(window, channel, horizon)?;
    Some(truth.iter().map(|y| (y - last).abs()).sum::<f64>() / horizon as f64)
}

/// Locations of everything the commands read and write under `out`.
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            root: config.out.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn weights(&self) -> PathBuf {
        self.model_dir().join("weights.json")
    }

    pub fn optimizer(&self) -> PathBuf {
        self.model_dir().join("optimizer.json")
    }

    pub fn normalization(&self) -> PathBuf {
        self.model_dir().join("normalization.json")
    }

    pub fn loss_history(&self) -> PathBuf {
        self.model_dir().join("loss_history.json")
    }

    pub fn profiles_dir(&self) -> PathBuf {
        self.root.join("profiles")
    }

    pub fn profile(&self, key: &ProfileKey) -> PathBuf {
        self.profiles_dir().join(format!("{}.json", key.slug()))
    }

    pub fn predict_dir(&self) -> PathBuf {
        self.root.join("predict")
    }

    pub fn evaluation_dir(&self) -> PathBuf {
        self.root.join("evaluation")
    }
}

fn require(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact(format!("{} ({hint})", path.display())))
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, hint: &str) -> Result<T, CliError> {
    require(path, hint)?;
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Trained weights, their normalization and the schedule from the config.
pub struct Model {
    pub params: DenoiserParams<f32>,
    pub stats: NormalizationStats,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn load(config: &RunConfig, artifacts: &Artifacts) -> Result<Self, CliError> {
        let hint = "run `train` first";
        require(&artifacts.weights(), hint)?;
        let params = load_weights::<f32>(&artifacts.weights())?;
        let stats: NormalizationStats = read_json(&artifacts.normalization(), hint)?;
        let schedule = config.noise_schedule()?;
        if schedule.steps() != params.config.diffusion_steps {
            return Err(CliError::Config(format!(
                "schedule.steps = {} but the model was trained with {}",
                schedule.steps(),
                params.config.diffusion_steps
            )));
        }
        if stats.channels.len() != params.config.channels {
            return Err(CliError::Data("normalization and weights disagree on channel count".into()));
        }
        Ok(Self {
            params,
            stats,
            schedule,
        })
    }

    pub fn loss_history(artifacts: &Artifacts) -> Result<LossHistory, CliError> {
        read_json(&artifacts.loss_history(), "run `train` first")
    }
}

/// `samples` reverse-chain draws of the final `horizon` steps of one sensor,
/// in physical units. `window` is in physical units too.
pub fn forecast_samples(
    model: &Model,
    prepared: &PreparedModel<'_, f32>,
    window: &TimeSeriesWindow,
    channel: usize,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<ImputationSamples, CliError> {
    let normalized = model.stats.apply(window)?;
    let mask = forecast_mask(&normalized, &[channel], horizon)?;
    Ok(sample_n(
        prepared,
        &normalized,
        &mask,
        &model.schedule,
        samples,
        chain_seed(seed, window.start_time, channel),
        &model.stats,
    )?)
}

/// Raw band for the final `horizon` steps of one sensor.
#[allow(clippy::too_many_arguments)]
pub fn forecast_band(
    model: &Model,
    prepared: &PreparedModel<'_, f32>,
    window: &TimeSeriesWindow,
    channel: usize,
    horizon: usize,
    alpha: f64,
    samples: usize,
    seed: u64,
    condition: ConditionLabel,
) -> Result<IntervalBand, CliError> {
    let draws = forecast_samples(model, prepared, window, channel, horizon, samples, seed)?;
    Ok(band_from_samples(&draws, alpha, &window.channels[channel].name, condition)?)
}

/// Loads the profile for `key`, checking the stored key matches.
pub fn load_profile(artifacts: &Artifacts, key: &ProfileKey) -> Result<CorrectionProfile, CliError> {
    let path = artifacts.profile(key);
    if !path.exists() {
        return Err(CliError::MissingProfile(key.slug()));
    }
    let profile = CorrectionProfile::from_json(&std::fs::read_to_string(&path)?)?;
    if &profile.key != key {
        return Err(CliError::KeyMismatch(format!(
            "{} holds {:?}, expected {:?}",
            path.display(),
            profile.key,
            key
        )));
    }
    Ok(profile)
}
