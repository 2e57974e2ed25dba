use std::path::PathBuf;

use log::info;
use serde::{Deserialize, Serialize};

use sewercast::band::band_from_samples;
use sewercast::conformal::{apply_corrections, ProfileKey};
use sewercast::diffusion::PreparedModel;
use sewercast::evaluation::emit_plot;
use sewercast::series::{classify_condition, ConditionLabel};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline::{
    forecast_samples, level_channel, load_profile, truth_tail, write_text, Artifacts, Dataset, Model,
};

/// Which dataset window to forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowRef {
    Index(usize),
    Start(i64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictRequest {
    pub window: WindowRef,
    pub sensor: String,
    /// Defaults to `conformal.horizon`.
    pub horizon: Option<usize>,
    pub plot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOutput {
    pub json: PathBuf,
    pub samples_csv: PathBuf,
    pub svg: Option<PathBuf>,
    pub condition: ConditionLabel,
}

pub fn run(config: &RunConfig, request: &PredictRequest) -> Result<PredictOutput, CliError> {
    let artifacts = Artifacts::new(config);
    let dataset = Dataset::load(config)?;
    let window = match request.window {
        WindowRef::Index(i) => dataset.windows.get(i).ok_or_else(|| {
            CliError::Usage(format!("window index {i} out of range (dataset has {})", dataset.windows.len()))
        })?,
        WindowRef::Start(t) => dataset
            .windows
            .iter()
            .find(|w| w.start_time == t)
            .ok_or_else(|| CliError::Usage(format!("no window starts at {t}")))?,
    };
    let channel = level_channel(window, &request.sensor)?;
    let horizon = request.horizon.unwrap_or(config.conformal.horizon);
    if horizon == 0 || horizon > window.len() {
        return Err(CliError::Usage(format!("horizon {horizon} must be in [1, {}]", window.len())));
    }
    let alpha = config.conformal.alpha;
    let condition = classify_condition(window, config.data.rain_threshold)?;
    let key = ProfileKey {
        sensor: request.sensor.clone(),
        condition,
        horizon,
        alpha,
    };
    let profile = load_profile(&artifacts, &key)?;
    let model = Model::load(config, &artifacts)?;
    let prepared = PreparedModel::new(&model.params, window.len());

    let draws = forecast_samples(
        &model,
        &prepared,
        window,
        channel,
        horizon,
        config.sampling.samples,
        config.seed,
    )?;
    let raw = band_from_samples(&draws, alpha, &request.sensor, condition)?;
    let conformalized = apply_corrections(&raw, &profile)?;
    let truth = truth_tail(window, channel, horizon);

    let doc = serde_json::json!({
        "sensor": request.sensor,
        "condition": condition,
        "start_time": window.start_time,
        "horizon": horizon,
        "alpha": alpha,
        "samples": config.sampling.samples,
        "profile": key.slug(),
        "raw": serde_json::from_str::<serde_json::Value>(&raw.to_json()?)?,
        "conformalized": serde_json::from_str::<serde_json::Value>(&conformalized.to_json()?)?,
        "truth": truth,
    });
    let stem = format!("{}-{}-h{horizon}", request.sensor, window.start_time);
    let dir = artifacts.predict_dir();
    let json = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_text(&json, &text)?;
    let samples_csv = dir.join(format!("{stem}-samples.csv"));
    draws.write_csv(std::io::BufWriter::new(std::fs::File::create(&samples_csv)?))?;

    let svg = match (&truth, request.plot) {
        (Some(truth), true) => {
            let path = dir.join(format!("{stem}.svg"));
            emit_plot(window, &raw, &conformalized, truth, &path)?;
            Some(path)
        }
        _ => None,
    };
    info!(
        "{} ({condition}): raw width {:.4}, conformalized width {:.4} -> {}",
        request.sensor,
        raw.mean_width(),
        conformalized.mean_width(),
        json.display()
    );
    Ok(PredictOutput {
        json,
        samples_csv,
        svg,
        condition,
    })
}
