use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sewercast::series::{classify_condition, ChannelMeta, ConditionLabel, SeriesTable};
use sewercast::synth::{synth_generate, GeneratorConfig};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline::{write_json, write_text, Artifacts};

/// Describes a generated dataset; `sha256` covers the CSV bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub file: String,
    pub sha256: String,
    pub rows: usize,
    pub windows: usize,
    pub dry_windows: usize,
    pub wet_windows: usize,
    pub seed: u64,
    pub channels: Vec<ChannelMeta>,
    pub generator: GeneratorConfig,
}

pub fn run(config: &RunConfig) -> Result<DatasetManifest, CliError> {
    let generator = config.generator();
    let windows = synth_generate(&generator, config.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let table = SeriesTable::from_windows(&windows, generator.cadence_secs)
        .ok_or_else(|| CliError::Config("generator.n_windows must be at least 1".into()))?;
    let mut bytes = Vec::new();
    table.write_csv(&mut bytes)?;

    let mut wet = 0;
    for w in &windows {
        if classify_condition(w, config.data.rain_threshold)? == ConditionLabel::Wet {
            wet += 1;
        }
    }
    let manifest = DatasetManifest {
        file: "series.csv".into(),
        sha256: format!("{:x}", Sha256::digest(&bytes)),
        rows: table.len(),
        windows: windows.len(),
        dry_windows: windows.len() - wet,
        wet_windows: wet,
        seed: config.seed,
        channels: generator.channels(),
        generator,
    };

    let artifacts = Artifacts::new(config);
    let dir = artifacts.data_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(&manifest.file), &bytes)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_text(&dir.join("config.json"), &config.to_json())?;
    info!(
        "wrote {} rows ({} windows: {} dry, {} wet) to {}",
        manifest.rows,
        manifest.windows,
        manifest.dry_windows,
        manifest.wet_windows,
        dir.display()
    );
    Ok(manifest)
}
