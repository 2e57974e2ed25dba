//! The `sewercast` command line: synthesize a dataset, train the denoiser,
//! fit conformal correction profiles, forecast single windows and evaluate
//! on the test split. Every command reads one JSON run configuration and
//! writes under its output directory.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

use commands::predict::{PredictRequest, WindowRef};
use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "sewercast", version, about = "Diffusion forecasting with conformal intervals for sewer sensors")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override one field, e.g. `--set training.epochs=5`. Repeatable.
    #[arg(long = "set", short = 's', global = true, value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth,
    /// Train the denoiser on the training split.
    Train {
        /// Continue the saved run up to `training.epochs`.
        #[arg(long)]
        resume: bool,
    },
    /// Fit a correction profile per sensor and condition.
    Calibrate,
    /// Forecast one window with raw and conformalized bands.
    Predict {
        /// Index of the window in the dataset.
        #[arg(long, conflicts_with = "start", required_unless_present = "start")]
        window: Option<usize>,
        /// Start time (epoch seconds) of the window.
        #[arg(long)]
        start: Option<i64>,
        #[arg(long)]
        sensor: String,
        /// Defaults to `conformal.horizon`.
        #[arg(long)]
        horizon: Option<usize>,
        /// Skip the SVG plot.
        #[arg(long)]
        no_plot: bool,
    },
    /// Score the test split and write the report.
    Evaluate,
    /// Print the resolved configuration.
    Config,
}

impl GlobalArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("out={}", serde_json::to_string(out).expect("path serializes")));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let config = cli.global.resolve()?;
    match &cli.command {
        Command::Synth => {
            commands::synth::run(&config)?;
        }
        Command::Train { resume } => {
            commands::train::run(&config, *resume)?;
        }
        Command::Calibrate => {
            commands::calibrate::run(&config)?;
        }
        Command::Predict {
            window,
            start,
            sensor,
            horizon,
            no_plot,
        } => {
            let window = match (window, start) {
                (Some(i), _) => WindowRef::Index(*i),
                (None, Some(t)) => WindowRef::Start(*t),
                (None, None) => return Err(CliError::Usage("give --window or --start".into())),
            };
            let out = commands::predict::run(
                &config,
                &PredictRequest {
                    window,
                    sensor: sensor.clone(),
                    horizon: *horizon,
                    plot: !no_plot,
                },
            )?;
            println!("{}", out.json.display());
        }
        Command::Evaluate => {
            let out = commands::evaluate::run(&config)?;
            print!("{}", out.report.to_table());
        }
        Command::Config => print!("{}", config.to_json()),
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
