use log::{info, warn};
use serde::{Deserialize, Serialize};

use sewercast::conformal::{apply_corrections, ProfileKey};
use sewercast::diffusion::PreparedModel;
use sewercast::evaluation::{build_report, emit_plot, mae, EvaluationCase, EvaluationGroup, EvaluationReport};
use sewercast::series::ConditionLabel;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline::{
    forecast_band, level_channel, load_profile, persistence_mae, truth_tail, write_json, write_text,
    Artifacts, Dataset, Model, Split,
};

/// Median-forecast MAE next to the carry-last-value baseline, averaged
/// over the series of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub sensor: String,
    pub condition: ConditionLabel,
    pub series: usize,
    pub model_mae: f64,
    pub persistence_mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationOutput {
    pub report: EvaluationReport,
    pub baseline: Vec<BaselineRow>,
    pub skipped: Vec<String>,
}

/// Report rows for every (sensor, condition) in the test split that has a
/// profile; groups without one are skipped with a warning.
pub fn run(config: &RunConfig) -> Result<EvaluationOutput, CliError> {
    let artifacts = Artifacts::new(config);
    let dataset = Dataset::load(config)?;
    let model = Model::load(config, &artifacts)?;
    let prepared = PreparedModel::new(&model.params, config.data.window_len);
    let groups = dataset.by_condition(
        Split::Test,
        config.data.rain_threshold,
        config.evaluation.max_windows_per_condition,
    )?;
    if groups.is_empty() {
        return Err(CliError::Data("test split has no windows".into()));
    }
    let (alpha, horizon) = (config.conformal.alpha, config.conformal.horizon);
    let dir = artifacts.evaluation_dir();
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots)?;

    let mut report_groups = Vec::new();
    let mut baseline = Vec::new();
    let mut skipped = Vec::new();
    for sensor in &config.conformal.sensors {
        let channel = level_channel(&dataset.windows[0], sensor)?;
        for (&condition, windows) in &groups {
            let key = ProfileKey {
                sensor: sensor.clone(),
                condition,
                horizon,
                alpha,
            };
            let profile = match load_profile(&artifacts, &key) {
                Ok(p) => p,
                Err(e @ CliError::MissingProfile(_)) => {
                    warn!("{}: skipped, {e}", key.slug());
                    skipped.push(key.slug());
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut cases = Vec::new();
            let (mut model_err, mut persist_err) = (0.0, 0.0);
            for w in windows {
                let (Some(truth), Some(persist)) =
                    (truth_tail(w, channel, horizon), persistence_mae(w, channel, horizon))
                else {
                    continue;
                };
                let raw = forecast_band(
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
                let conformalized = apply_corrections(&raw, &profile)?;
                if cases.len() < config.evaluation.plots_per_group {
                    let path = plots.join(format!("{sensor}-{condition}-{}.svg", w.start_time));
                    emit_plot(w, &raw, &conformalized, &truth, &path)?;
                }
                model_err += mae(&truth, &raw.median)?;
                persist_err += persist;
                cases.push(EvaluationCase {
                    raw,
                    conformalized,
                    truth,
                });
            }
            if cases.is_empty() {
                warn!("{}: no test window with a fully observed horizon", key.slug());
                skipped.push(key.slug());
                continue;
            }
            let n = cases.len() as f64;
            baseline.push(BaselineRow {
                sensor: sensor.clone(),
                condition,
                series: cases.len(),
                model_mae: model_err / n,
                persistence_mae: persist_err / n,
            });
            report_groups.push(EvaluationGroup {
                sensor: sensor.clone(),
                condition,
                profile,
                cases,
            });
        }
    }
    if report_groups.is_empty() {
        return Err(CliError::MissingArtifact(format!(
            "no correction profile matches any test group under {}",
            artifacts.profiles_dir().display()
        )));
    }
    let report = build_report(&report_groups)?;
    let mut text = report.to_json()?;
    text.push('\n');
    write_text(&dir.join("report.json"), &text)?;
    write_text(&dir.join("report.txt"), &report.to_table())?;
    write_json(&dir.join("baseline.json"), &baseline)?;
    info!("wrote {} report rows to {}", report.rows.len(), dir.display());
    Ok(EvaluationOutput {
        report,
        baseline,
        skipped,
    })
}
