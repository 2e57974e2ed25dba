//! Run configuration: one JSON document, deep-merged over the defaults, then
//! patched by `--set dotted.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use sewercast::denoiser::TemporalMixing;
use sewercast::diffusion::{build_schedule, NoiseSchedule};
use sewercast::masking::MaskSpec;
use sewercast::series::{ChannelMeta, DEFAULT_CADENCE_SECS, DEFAULT_RAIN_THRESHOLD, DEFAULT_WINDOW_LEN};
use sewercast::synth::GeneratorConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Drives every random stream: generator, initialization, training
    /// order and sampling.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub mask: MaskSpec,
    pub training: TrainingConfig,
    pub sampling: SamplingConfig,
    pub conformal: ConformalConfig,
    pub evaluation: EvaluationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset CSV; `None` reads `<out>/data/series.csv` as written by `synth`.
    pub csv: Option<PathBuf>,
    /// CSV schema; `None` uses the generator's channel list.
    pub channels: Option<Vec<ChannelMeta>>,
    pub cadence_secs: i64,
    pub window_len: usize,
    /// Step between consecutive training windows.
    pub train_stride: usize,
    pub rain_log_transform: bool,
    /// mm/h; a window is wet when any observed rain value reaches it.
    pub rain_threshold: f64,
    pub generator: GeneratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: f64,
    pub calibration: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub temporal: TemporalMixing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Evenly thins the training windows down to this many.
    pub max_windows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalConfig {
    pub alpha: f64,
    pub horizon: usize,
    /// Level channels to forecast and calibrate, one at a time.
    pub sensors: Vec<String>,
    /// Keeps only the earliest windows of each condition.
    pub max_windows_per_condition: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub max_windows_per_condition: Option<usize>,
    /// SVG plots written per (sensor, condition) group.
    pub plots_per_group: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let generator = GeneratorConfig {
            n_windows: 3000,
            ..GeneratorConfig::default()
        };
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig {
                csv: None,
                channels: None,
                cadence_secs: DEFAULT_CADENCE_SECS,
                window_len: DEFAULT_WINDOW_LEN,
                train_stride: 24,
                rain_log_transform: true,
                rain_threshold: DEFAULT_RAIN_THRESHOLD,
                generator,
            },
            split: SplitConfig {
                train: 0.6,
                calibration: 0.2,
                test: 0.2,
            },
            schedule: ScheduleConfig {
                steps: 50,
                beta_min: 1e-4,
                beta_max: 0.5,
            },
            model: ModelConfig {
                width: 32,
                blocks: 2,
                heads: 1,
                temporal: TemporalMixing::Attention,
            },
            mask: MaskSpec::default(),
            training: TrainingConfig {
                epochs: 20,
                batch_size: 16,
                learning_rate: 1e-3,
                max_windows: Some(2400),
            },
            sampling: SamplingConfig { samples: 100 },
            conformal: ConformalConfig {
                alpha: 0.9,
                horizon: 40,
                sensors: vec!["sensor_1".into(), "sensor_5".into()],
                max_windows_per_condition: Some(60),
            },
            evaluation: EvaluationConfig {
                max_windows_per_condition: Some(60),
                plots_per_group: 2,
            },
        }
    }
}

/// Copies `patch` into `base`, recursing through objects. Keys absent from
/// `base` are rejected so typos do not pass silently.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(CliError::Config(format!("unknown field `{sub}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Applies one `dotted.path=value` override. The value is read as JSON when
/// it parses, otherwise as a bare string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not of the form path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *doc;
    for segment in path.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(segment),
            Value::Array(items) => segment.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::Config(format!("unknown field `{path}`")))?;
    }
    *slot = value;
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file at `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = serde_json::to_value(Self::default()).expect("default config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, patch, "")?;
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: Self = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let s = &self.split;
        if [s.train, s.calibration, s.test].iter().any(|f| !(0.0..=1.0).contains(f))
            || (s.train + s.calibration + s.test - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "split fractions must lie in [0, 1] and sum to 1, got {} + {} + {}",
                s.train, s.calibration, s.test
            ));
        }
        if !(self.conformal.alpha > 0.0 && self.conformal.alpha < 1.0) {
            return bad(format!("alpha must be in (0, 1), got {}", self.conformal.alpha));
        }
        if self.conformal.horizon == 0 || self.conformal.horizon > self.data.window_len {
            return bad(format!(
                "horizon {} must be in [1, window_len = {}]",
                self.conformal.horizon, self.data.window_len
            ));
        }
        if self.conformal.sensors.is_empty() {
            return bad("conformal.sensors is empty".into());
        }
        if self.sampling.samples < 2 {
            return bad("sampling.samples must be at least 2".into());
        }
        if self.data.window_len == 0 || self.data.train_stride == 0 || self.data.cadence_secs <= 0 {
            return bad("window_len, train_stride and cadence_secs must be positive".into());
        }
        if !(self.data.rain_threshold >= 0.0) {
            return bad("rain_threshold must be >= 0".into());
        }
        if self.training.batch_size == 0 || !(self.training.learning_rate > 0.0) {
            return bad("batch_size and learning_rate must be positive".into());
        }
        self.noise_schedule()?;
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, CliError> {
        build_schedule(self.schedule.steps, self.schedule.beta_min, self.schedule.beta_max)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    /// The generator settings actually used by `synth`: window length and
    /// cadence follow the data section.
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            window_len: self.data.window_len,
            cadence_secs: self.data.cadence_secs,
            ..self.data.generator.clone()
        }
    }

    pub fn channels(&self) -> Vec<ChannelMeta> {
        self.data
            .channels
            .clone()
            .unwrap_or_else(|| self.data.generator.channels())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data
            .csv
            .clone()
            .unwrap_or_else(|| self.out.join("data").join("series.csv"))
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }
}
