use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use sewercast::band::IntervalBand;
use sewercast::conformal::{calibrate, ConformalError, ProfileKey};
use sewercast::diffusion::PreparedModel;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline::{forecast_band, level_channel, truth_tail, write_json, Artifacts, Dataset, Model, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Fitted,
    PoolTooSmall,
    NoFeasibleLevel,
}

/// One (sensor, condition) entry of the calibration log. Timings are wall
/// clock and vary between runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub key: ProfileKey,
    pub status: FitStatus,
    pub pool_size: usize,
    /// Windows dropped because part of the truth was unobserved.
    pub skipped: usize,
    pub message: Option<String>,
    pub sampling_secs: f64,
    pub fit_secs: f64,
}

/// Fits a profile per (sensor, condition) present in the calibration split.
/// Keys whose pool is too small or infeasible are logged and skipped.
pub fn run(config: &RunConfig) -> Result<Vec<CalibrationEntry>, CliError> {
    let artifacts = Artifacts::new(config);
    let dataset = Dataset::load(config)?;
    let model = Model::load(config, &artifacts)?;
    let prepared = PreparedModel::new(&model.params, config.data.window_len);
    let groups = dataset.by_condition(
        Split::Calibration,
        config.data.rain_threshold,
        config.conformal.max_windows_per_condition,
    )?;
    if groups.is_empty() {
        return Err(CliError::Data("calibration split has no windows".into()));
    }
    let (alpha, horizon) = (config.conformal.alpha, config.conformal.horizon);
    std::fs::create_dir_all(artifacts.profiles_dir())?;

    let mut log = Vec::new();
    for sensor in &config.conformal.sensors {
        let channel = level_channel(&dataset.windows[0], sensor)?;
        for (&condition, windows) in &groups {
            let key = ProfileKey {
                sensor: sensor.clone(),
                condition,
                horizon,
                alpha,
            };
            let started = Instant::now();
            let mut pool: Vec<(IntervalBand, Vec<f64>)> = Vec::new();
            let mut skipped = 0;
            for w in windows {
                let Some(truth) = truth_tail(w, channel, horizon) else {
                    skipped += 1;
                    continue;
                };
                let band = forecast_band(
                    &model,
                    &prepared,
                    w,
                    channel,
                    horizon,
                    alpha,
                    config.sampling.samples,
                    config.seed,
                    condition,
                )?;
                pool.push((band, truth));
            }
            let sampling_secs = started.elapsed().as_secs_f64();

            let fit_started = Instant::now();
            let fitted = calibrate(&pool, alpha, config.seed);
            let fit_secs = fit_started.elapsed().as_secs_f64();
            let (status, message) = match fitted {
                Ok(profile) => {
                    let path = artifacts.profile(&key);
                    let mut text = profile.to_json()?;
                    text.push('\n');
                    std::fs::write(&path, text)?;
                    info!(
                        "{}: {} series, u* = {:.4}, mean correction {:.5}, fit {:.3}s, sampling {:.1}s",
                        key.slug(),
                        pool.len(),
                        profile.level,
                        profile.mean_correction(),
                        fit_secs,
                        sampling_secs
                    );
                    (FitStatus::Fitted, None)
                }
                Err(e @ ConformalError::PoolTooSmall { .. }) => {
                    warn!("{}: skipped, {e}", key.slug());
                    (FitStatus::PoolTooSmall, Some(e.to_string()))
                }
                Err(e @ ConformalError::NoFeasibleLevel { .. }) => {
                    warn!("{}: skipped, {e}", key.slug());
                    (FitStatus::NoFeasibleLevel, Some(e.to_string()))
                }
                Err(e) => return Err(e.into()),
            };
            log.push(CalibrationEntry {
                key,
                status,
                pool_size: pool.len(),
                skipped,
                message,
                sampling_secs,
                fit_secs,
            });
        }
    }
    write_json(&artifacts.profiles_dir().join("calibration_log.json"), &log)?;
    if !log.iter().any(|e| e.status == FitStatus::Fitted) {
        return Err(CliError::Data("no correction profile could be fitted".into()));
    }
    Ok(log)
}

