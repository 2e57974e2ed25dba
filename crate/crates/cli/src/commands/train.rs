use std::time::Instant;

use log::info;

use sewercast::denoiser::{
    init_params, load_optimizer, load_weights, save_optimizer, save_weights, AdamConfig, DenoiserConfig,
    OptimizerState,
};
use sewercast::diffusion::{train, LossHistory, TrainConfig};
use sewercast::series::{fit_normalizer, NormalizationStats, TimeSeriesWindow};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline::{read_json, write_json, write_text, Artifacts, Dataset, Split};

/// Trains from scratch, or with `resume` continues the saved run up to
/// `training.epochs`. Returns the full loss history.
pub fn run(config: &RunConfig, resume: bool) -> Result<LossHistory, CliError> {
    let artifacts = Artifacts::new(config);
    let dataset = Dataset::load(config)?;
    let schedule = config.noise_schedule()?;
    let len = config.data.window_len;

    let base: Vec<TimeSeriesWindow> = dataset.in_split(Split::Train).into_iter().cloned().collect();
    let raw = dataset.training_windows(len, config.data.train_stride, config.training.max_windows);
    if raw.is_empty() {
        return Err(CliError::Data("training split has no windows".into()));
    }

    let hint = "nothing to resume; train without --resume first";
    let (mut params, mut state, mut history, stats) = if resume {
        let stats: NormalizationStats = read_json(&artifacts.normalization(), hint)?;
        let history: LossHistory = read_json(&artifacts.loss_history(), hint)?;
        read_json::<serde_json::Value>(&artifacts.weights(), hint)?;
        read_json::<serde_json::Value>(&artifacts.optimizer(), hint)?;
        let params = load_weights::<f32>(&artifacts.weights())?;
        let state = load_optimizer::<f32>(&artifacts.optimizer())?;
        (params, state, history, stats)
    } else {
        let stats = fit_normalizer(&base, config.data.rain_log_transform)?;
        let model = DenoiserConfig {
            heads: config.model.heads,
            temporal: config.model.temporal,
            ..DenoiserConfig::new(
                raw[0].n_channels(),
                config.model.width,
                config.model.blocks,
                config.schedule.steps,
            )
        };
        let params = init_params::<f32>(&model, config.seed).map_err(|e| CliError::Config(e.to_string()))?;
        let adam = AdamConfig {
            learning_rate: config.training.learning_rate,
            ..AdamConfig::default()
        };
        let state = OptimizerState::new(&params, adam);
        (params, state, LossHistory::default(), stats)
    };
    config
        .mask
        .validate(raw[0].n_channels(), len)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let windows = raw
        .iter()
        .map(|w| stats.apply(w))
        .collect::<Result<Vec<_>, _>>()?;
    let train_config = TrainConfig {
        epochs: config.training.epochs,
        batch_size: config.training.batch_size,
        seed: config.seed,
        mask: config.mask.clone(),
    };
    info!(
        "training on {} windows ({} parameters), epochs {}..{}",
        windows.len(),
        params.parameter_count(),
        history.epochs_done(),
        config.training.epochs
    );
    let started = Instant::now();
    train(&mut params, &mut state, &windows, &schedule, &train_config, &mut history, |epoch, loss| {
        info!("epoch {epoch}: loss {loss:.4} ({:.0}s)", started.elapsed().as_secs_f64());
    })?;

    std::fs::create_dir_all(artifacts.model_dir())?;
    save_weights(&params, &artifacts.weights())?;
    save_optimizer(&state, &artifacts.optimizer())?;
    write_json(&artifacts.normalization(), &stats)?;
    write_json(&artifacts.loss_history(), &history)?;
    write_text(&artifacts.model_dir().join("config.json"), &config.to_json())?;
    if let (Some(first), Some(last)) = (history.initial(), history.last()) {
        info!("loss {first:.4} -> {last:.4}");
    }
    Ok(history)
}
