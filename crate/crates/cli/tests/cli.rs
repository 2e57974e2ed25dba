use std::path::{Path, PathBuf};

use sewercast::band::IntervalBand;
use sewercast::conformal::{CorrectionProfile, ProfileKey};
use sewercast::diffusion::LossHistory;
use sewercast::series::ConditionLabel;
use sewercast_cli::commands::synth::DatasetManifest;
use sewercast_cli::config::RunConfig;
use sewercast_cli::run;

/// Short windows, a tiny network and few samples; storms are frequent so
/// both conditions have enough calibration series.
const SMALL: &str = r#"{
  "data": {"window_len": 48, "train_stride": 12,
           "generator": {"n_windows": 600, "storm_rate": 0.01, "burn_in": 48}},
  "split": {"train": 0.4, "calibration": 0.4, "test": 0.2},
  "schedule": {"steps": 10},
  "model": {"width": 8, "blocks": 1},
  "mask": {"max_horizon": 8},
  "training": {"epochs": 3, "max_windows": 300},
  "sampling": {"samples": 8},
  "conformal": {"horizon": 4, "max_windows_per_condition": null},
  "evaluation": {"max_windows_per_condition": 30, "plots_per_group": 1}
}"#;

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, config).unwrap();
        let out = dir.path().join("run");
        Self {
            config: path,
            out,
            _dir: dir,
        }
    }

    fn run(&self, args: &[&str]) -> i32 {
        let mut argv = vec![
            "sewercast".to_string(),
            "--config".into(),
            self.config.display().to_string(),
            "--out".into(),
            self.out.display().to_string(),
        ];
        argv.extend(args.iter().map(|a| a.to_string()));
        run(argv)
    }

    fn resolved(&self) -> RunConfig {
        RunConfig::resolve(Some(&self.config), &[format!("out={:?}", self.out.display().to_string())]).unwrap()
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.out.join(rel)).unwrap()
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn usage_and_config_errors_exit_one() {
    let ws = Workspace::new(SMALL);
    assert_eq!(run(["sewercast", "frobnicate"]), 1);
    assert_eq!(run(["sewercast", "synth", "--no-such-flag"]), 1);
    assert_eq!(ws.run(&["--set", "training.epoch=2", "synth"]), 1);
    assert_eq!(ws.run(&["--set", "split.test=0.5", "synth"]), 1);
    assert_eq!(run(["sewercast", "--config", "/definitely/not/here.json", "synth"]), 1);
    assert_eq!(run(["sewercast", "--help"]), 0);
}

#[test]
fn missing_artifacts_exit_three() {
    let ws = Workspace::new(SMALL);
    assert_eq!(ws.run(&["train"]), 3);
    assert_eq!(ws.run(&["synth"]), 0);
    assert_eq!(ws.run(&["calibrate"]), 3);
    assert_eq!(ws.run(&["evaluate"]), 3);
    assert_eq!(ws.run(&["train", "--resume"]), 3);
    assert_eq!(ws.run(&["predict", "--window", "0", "--sensor", "sensor_1"]), 3);
}

#[test]
fn malformed_data_exits_two() {
    let ws = Workspace::new(SMALL);
    let csv = ws.out.with_file_name("bad.csv");
    std::fs::write(
        &csv,
        "timestamp,sensor_1,sensor_2,sensor_3,sensor_4,sensor_5,rain\n0,0.1,0.1,0.1,0.1,0.1,0\n360,0.1,abc,0.1,0.1,0.1,0\n",
    )
    .unwrap();
    assert_eq!(ws.run(&["--set", &format!("data.csv={}", csv.display()), "train"]), 2);
}

#[test]
fn synth_is_reproducible_and_manifest_is_exact() {
    let a = Workspace::new(SMALL);
    let b = Workspace::new(SMALL);
    assert_eq!(a.run(&["synth"]), 0);
    assert_eq!(b.run(&["synth"]), 0);
    assert_eq!(a.read("data/series.csv"), b.read("data/series.csv"));
    let manifest: DatasetManifest = serde_json::from_str(&a.read("data/manifest.json")).unwrap();
    let csv = a.read("data/series.csv");
    assert_eq!(manifest.rows, csv.lines().count() - 1);
    assert_eq!(manifest.rows, 600 * 48);
    assert_eq!(manifest.windows, 600);
    assert_eq!(manifest.dry_windows + manifest.wet_windows, 600);
    assert_eq!(manifest.sha256.len(), 64);
    assert_eq!(a.read("data/manifest.json"), b.read("data/manifest.json"));

    let c = Workspace::new(SMALL);
    assert_eq!(c.run(&["--seed", "9", "synth"]), 0);
    assert_ne!(a.read("data/series.csv"), c.read("data/series.csv"));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let direct = Workspace::new(SMALL);
    assert_eq!(direct.run(&["synth"]), 0);
    assert_eq!(direct.run(&["--set", "training.epochs=2", "train"]), 0);

    let split = Workspace::new(SMALL);
    assert_eq!(split.run(&["synth"]), 0);
    assert_eq!(split.run(&["--set", "training.epochs=1", "train"]), 0);
    assert_eq!(split.run(&["--set", "training.epochs=2", "train", "--resume"]), 0);

    assert_eq!(direct.read("model/loss_history.json"), split.read("model/loss_history.json"));
    for f in ["model/weights.bin", "model/optimizer.bin"] {
        assert_eq!(
            std::fs::read(direct.out.join(f)).unwrap(),
            std::fs::read(split.out.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn first_loss_is_near_one() {
    let ws = Workspace::new(SMALL);
    assert_eq!(ws.run(&["synth"]), 0);
    assert_eq!(ws.run(&["--set", "training.epochs=1", "--set", "training.batch_size=128", "train"]), 0);
    let h: LossHistory = serde_json::from_str(&ws.read("model/loss_history.json")).unwrap();
    assert_eq!(h.losses.len(), 2);
    let first = h.initial().unwrap();
    assert!((first - 1.0).abs() < 0.15, "initial loss {first}");
}

/// synth → train → calibrate → predict → evaluate on the small setup.
#[test]
fn full_pipeline() {
    let ws = Workspace::new(SMALL);
    for cmd in ["synth", "train", "calibrate", "evaluate"] {
        assert_eq!(ws.run(&[cmd]), 0, "{cmd}");
    }
    let config = ws.resolved();

    // Profiles: one per sensor and condition, lossless JSON, condition-specific.
    let profiles: Vec<CorrectionProfile> = read_dir_sorted(&ws.out.join("profiles"))
        .into_iter()
        .filter(|p| p.file_name().unwrap() != "calibration_log.json")
        .map(|p| CorrectionProfile::from_json(&std::fs::read_to_string(p).unwrap()).unwrap())
        .collect();
    assert_eq!(profiles.len(), 4);
    for p in &profiles {
        assert_eq!(CorrectionProfile::from_json(&p.to_json().unwrap()).unwrap(), *p);
        assert_eq!(p.corrections.len(), 4);
        assert!(p.achieved_coverage >= 0.9);
    }
    let find = |s: &str, c: ConditionLabel| {
        profiles
            .iter()
            .find(|p| p.key.sensor == s && p.key.condition == c)
            .unwrap()
    };
    assert_ne!(
        find("sensor_1", ConditionLabel::Dry).corrections,
        find("sensor_1", ConditionLabel::Wet).corrections
    );

    // Report: sensors × conditions, width identity, correction helps.
    let report: sewercast::evaluation::EvaluationReport =
        serde_json::from_str(&ws.read("evaluation/report.json")).unwrap();
    assert_eq!(report.rows.len(), 4);
    for row in &report.rows {
        assert!(row.width_identity_residual().abs() <= 1e-9);
        assert!(row.conf_coverage >= row.raw_coverage, "{row:?}");
    }
    assert!(ws.read("evaluation/report.txt").starts_with("Group"));
    let plots = read_dir_sorted(&ws.out.join("evaluation/plots"));
    assert_eq!(plots.len(), 4);
    for p in plots {
        roxmltree::Document::parse(&std::fs::read_to_string(p).unwrap()).unwrap();
    }

    // Predict twice: identical JSON, band length = horizon.
    assert_eq!(ws.run(&["predict", "--window", "5", "--sensor", "sensor_5"]), 0);
    let predict_dir = ws.out.join("predict");
    let files = read_dir_sorted(&predict_dir);
    let json = files.iter().find(|p| p.extension().unwrap() == "json").unwrap().clone();
    assert!(files.iter().any(|p| p.extension().unwrap() == "svg"));
    let first = std::fs::read_to_string(&json).unwrap();
    assert_eq!(ws.run(&["predict", "--window", "5", "--sensor", "sensor_5", "--no-plot"]), 0);
    assert_eq!(first, std::fs::read_to_string(&json).unwrap());
    let doc: serde_json::Value = serde_json::from_str(&first).unwrap();
    let conf = IntervalBand::from_json(&doc["conformalized"].to_string()).unwrap();
    let raw = IntervalBand::from_json(&doc["raw"].to_string()).unwrap();
    assert_eq!(conf.len(), config.conformal.horizon);
    assert!(conf.conformalized && !raw.conformalized);
    assert_eq!(conf.median, raw.median);

    // Bad requests.
    assert_eq!(ws.run(&["predict", "--window", "100000", "--sensor", "sensor_1"]), 1);
    assert_eq!(ws.run(&["predict", "--window", "0", "--sensor", "rain"]), 1);
    assert_eq!(ws.run(&["predict", "--window", "0", "--sensor", "sensor_1", "--horizon", "6"]), 3);
}

/// Full-length windows: a 40-step forecast, and a wet window with only a
/// dry profile on disk.
#[test]
fn predict_profile_contract_on_full_windows() {
    let ws = Workspace::new(
        r#"{
      "data": {"generator": {"n_windows": 40, "storm_rate": 0.002}},
      "schedule": {"steps": 4},
      "model": {"width": 8, "blocks": 1},
      "training": {"epochs": 1, "max_windows": 20},
      "sampling": {"samples": 4}
    }"#,
    );
    assert_eq!(ws.run(&["synth"]), 0);
    assert_eq!(ws.run(&["train"]), 0);
    let config = ws.resolved();
    let dataset = sewercast_cli::pipeline::Dataset::load(&config).unwrap();
    let label = |i: usize| sewercast::series::classify_condition(&dataset.windows[i], 0.1).unwrap();
    let dry = (0..dataset.windows.len()).find(|&i| label(i) == ConditionLabel::Dry).unwrap();
    let wet = (0..dataset.windows.len()).find(|&i| label(i) == ConditionLabel::Wet).unwrap();

    let key = ProfileKey {
        sensor: "sensor_1".into(),
        condition: ConditionLabel::Dry,
        horizon: 40,
        alpha: 0.9,
    };
    let profile = CorrectionProfile {
        key: key.clone(),
        corrections: vec![0.01; 40],
        level: 0.95,
        grid_index: 19,
        fit_size: 20,
        search_size: 20,
        achieved_coverage: 0.9,
        split_seed: 0,
        bound_cap: 5.0,
    };
    let dir = ws.out.join("profiles");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join(format!("{}.json", key.slug())), profile.to_json().unwrap()).unwrap();

    let dry = dry.to_string();
    let wet = wet.to_string();
    assert_eq!(ws.run(&["predict", "--window", &dry, "--sensor", "sensor_1"]), 0);
    let json = read_dir_sorted(&ws.out.join("predict"))
        .into_iter()
        .find(|p| p.extension().unwrap() == "json")
        .unwrap();
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(doc["raw"]["steps"].as_array().unwrap().len(), 40);
    assert_eq!(doc["conformalized"]["steps"].as_array().unwrap().len(), 40);

    assert_eq!(ws.run(&["predict", "--window", &wet, "--sensor", "sensor_1"]), 3);

    // A profile stored under the wrong name is refused.
    let wet_key = ProfileKey {
        condition: ConditionLabel::Wet,
        ..key
    };
    std::fs::write(dir.join(format!("{}.json", wet_key.slug())), profile.to_json().unwrap()).unwrap();
    assert_eq!(ws.run(&["predict", "--window", &wet, "--sensor", "sensor_1"]), 3);
}
