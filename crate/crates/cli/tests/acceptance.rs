//! Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
//! stderr. With `ACCEPTANCE_STRICT` set, any failing criterion also fails the
//! process.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sewercast::band::{band_from_samples, IntervalBand};
use sewercast::conformal::{apply_corrections, calibrate, critical_quantile, cqr_score, joint_coverage, split_indices};
use sewercast::denoiser::{init_params, DenoiseInput, DenoiserConfig, DenoiserParams, TrainingExample};
use sewercast::diffusion::{
    build_schedule, forward_noise, reverse_sample, DiffusionError, ImputationSamples, NoisePredictor, NoiseSchedule,
    PreparedModel,
};
use sewercast::evaluation::{mae, EvaluationReport};
use sewercast::masking::forecast_mask;
use sewercast::series::{classify_condition, ChannelMeta, ConditionLabel, TimeSeriesWindow};
use sewercast::synth::{synth_generate, GeneratorConfig};
use sewercast_cli::config::RunConfig;
use sewercast_cli::pipeline::{
    forecast_band, forecast_samples, level_channel, persistence_mae, truth_tail, Dataset, Model, Split,
};

const ALPHA: f64 = 0.9;
const HORIZON: usize = 40;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn progress(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `count` truth tails of `sensor_1` from `condition` windows, generated in
/// batches of 8000 windows with seeds `seed`, `seed + 1`, ...
fn synthetic_truths(condition: ConditionLabel, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let config = GeneratorConfig {
        n_windows: 8000,
        ..GeneratorConfig::default()
    };
    let mut out = Vec::with_capacity(count);
    for batch in 0..8 {
        let windows = synth_generate(&config, seed + batch).expect("default generator config is valid");
        for w in &windows {
            let c = w.channel_index("sensor_1").unwrap();
            if classify_condition(w, 0.1).unwrap() != condition {
                continue;
            }
            if let Some(truth) = truth_tail(w, c, HORIZON) {
                out.push(truth);
            }
        }
        if out.len() >= count {
            out.truncate(count);
            break;
        }
    }
    out
}

/// Draws from an overconfident forecaster: its median misses the truth by a
/// smooth AR(1) error path of scale `σ`, while its samples spread only
/// `0.6 σ` around that median.
fn overconfident_samples(truth: &[f64], n: usize, rng: &mut ChaCha8Rng) -> ImputationSamples {
    let h = truth.len();
    let mean = truth.iter().sum::<f64>() / h as f64;
    let spread = (truth.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / h as f64).sqrt();
    let sigma = 0.005 + 0.3 * spread;
    let phi: f64 = 0.8;
    let mut error = Vec::with_capacity(h);
    let mut e = sigma * normal(rng);
    for _ in 0..h {
        error.push(e);
        e = phi * e + sigma * (1.0 - phi * phi).sqrt() * normal(rng);
    }
    let values = (0..n)
        .map(|_| {
            truth
                .iter()
                .zip(&error)
                .map(|(y, b)| y + b + 0.6 * sigma * normal(rng))
                .collect()
        })
        .collect();
    ImputationSamples {
        start_time: 0,
        positions: (0..h).map(|t| (0, 240 - h + t)).collect(),
        channel_names: vec!["sensor_1".into()],
        values,
    }
}

fn synthetic_pool(
    truths: &[Vec<f64>],
    condition: ConditionLabel,
    rng: &mut ChaCha8Rng,
) -> Vec<(IntervalBand, Vec<f64>)> {
    truths
        .iter()
        .map(|y| {
            let samples = overconfident_samples(y, 100, rng);
            (band_from_samples(&samples, ALPHA, "sensor_1", condition).unwrap(), y.clone())
        })
        .collect()
}

fn width_identity_published() -> (bool, f64) {
    let rows: [(f64, f64, f64); 4] = [
        (0.0718, 0.0647, 0.2012),
        (0.0079, 0.0050, 0.0179),
        (0.0090, 0.0079, 0.0247),
        (0.0922, 0.1169, 0.3259),
    ];
    let worst = rows
        .iter()
        .map(|(raw, corr, conf)| (raw + 2.0 * corr - conf).abs())
        .fold(0.0f64, f64::max);
    (worst <= 2e-4, worst)
}

/// Calibration series per condition. The diagonal search can only reach
/// levels up to the fit half's per-step maxima, so at H = 40 pools near the
/// 300 minimum are often infeasible for noise-like errors.
const COVERAGE_CALIBRATION: usize = 1000;
const COVERAGE_TEST: usize = 200;

fn criterion_2_coverage() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut lines = Vec::new();
    let mut pass = true;
    let size = COVERAGE_CALIBRATION + COVERAGE_TEST;
    for condition in [ConditionLabel::Dry, ConditionLabel::Wet] {
        let series = synthetic_truths(condition, size, 11);
        if series.len() < size {
            return outcome(false, format!("only {} {condition} series, need {size}", series.len()));
        }
        let pool = synthetic_pool(&series, condition, &mut rng);
        let (mut conf_sum, mut raw_sum, mut raw_below, mut infeasible) = (0.0, 0.0, 0, 0);
        let splits = 50u64;
        for s in 0..splits {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(1000 + s));
            let (cal_idx, test_idx) = order.split_at(COVERAGE_CALIBRATION);
            let cal: Vec<_> = cal_idx.iter().map(|&i| pool[i].clone()).collect();
            let test: Vec<_> = test_idx.iter().map(|&i| pool[i].clone()).collect();
            let Ok(profile) = calibrate(&cal, ALPHA, s) else {
                infeasible += 1;
                continue;
            };
            let raw_bands: Vec<IntervalBand> = test.iter().map(|(b, _)| b.clone()).collect();
            let conf_bands: Vec<IntervalBand> =
                raw_bands.iter().map(|b| apply_corrections(b, &profile).unwrap()).collect();
            let y: Vec<Vec<f64>> = test.iter().map(|(_, y)| y.clone()).collect();
            let raw = joint_coverage(&raw_bands, &y).unwrap();
            let conf = joint_coverage(&conf_bands, &y).unwrap();
            raw_sum += raw;
            conf_sum += conf;
            raw_below += (raw < conf) as usize;
        }
        let fitted = (splits - infeasible) as f64;
        let mean_conf = conf_sum / fitted.max(1.0);
        let mean_raw = raw_sum / fitted.max(1.0);
        let ok = infeasible == 0 && (0.87..=0.95).contains(&mean_conf) && raw_below == splits as usize;
        pass &= ok;
        lines.push(format!(
            "{condition}: conformal {mean_conf:.4}, raw {mean_raw:.4}, raw<conf on {raw_below}/{splits}, \
             infeasible {infeasible}"
        ));
    }
    outcome(
        pass,
        format!(
            "{} ({COVERAGE_CALIBRATION} calibration / {COVERAGE_TEST} test per split, target [0.87, 0.95])",
            lines.join("; ")
        ),
    )
}

fn window(k: usize, len: usize, seed: u64) -> TimeSeriesWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels: Vec<_> = (0..k - 1).map(|i| ChannelMeta::level(format!("s{i}"))).collect();
    channels.push(ChannelMeta::rain("rain"));
    let values = Array2::from_shape_simple_fn((k, len), || normal(&mut rng));
    TimeSeriesWindow::new(values, Array2::from_elem((k, len), true), 0, channels).unwrap()
}

fn criterion_3_gradients() -> Outcome {
    let config = DenoiserConfig::new(3, 8, 1, 10);
    let mut p: DenoiserParams<f64> = init_params(&config, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for (_, t) in p.tensors_mut() {
        t.mapv_inplace(|v| v + 0.3 * normal(&mut rng));
    }
    let w1 = window(3, 16, 31);
    let w2 = window(3, 16, 32);
    let m1 = forecast_mask(&w1, &[0], 6).unwrap();
    let mut m2 = forecast_mask(&w2, &[1], 3).unwrap();
    m2.target[[0, 15]] = true;
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| normal(rng)).collect() };
    let (x1, e1) = (draw(m1.count(), &mut rng), draw(m1.count(), &mut rng));
    let (x2, e2) = (draw(m2.count(), &mut rng), draw(m2.count(), &mut rng));
    let batch = [
        TrainingExample {
            input: DenoiseInput {
                window: &w1,
                mask: &m1,
                x_t: &x1,
                step: 2,
            },
            noise: &e1,
        },
        TrainingExample {
            input: DenoiseInput {
                window: &w2,
                mask: &m2,
                x_t: &x2,
                step: 7,
            },
            noise: &e2,
        },
    ];
    let (_, grads) = p.loss_and_grad(&batch).unwrap();
    let h = 1e-5;
    let n_tensors = p.tensors().len();
    let mut worst = (0.0f64, String::new());
    let mut coords = 0;
    for ti in 0..n_tensors {
        let len = p.tensors()[ti].1.len();
        for j in 0..len {
            let shifted = |delta: f64| {
                let mut q = p.clone();
                q.tensors_mut()[ti].1.as_slice_mut().unwrap()[j] += delta;
                q.loss(&batch).unwrap()
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let analytic = grads.tensors()[ti].1.as_slice().unwrap()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            coords += 1;
            if rel > worst.0 {
                worst = (rel, format!("{}[{j}]", p.tensors()[ti].0));
            }
        }
    }
    outcome(
        worst.0 <= 1e-4,
        format!(
            "{n_tensors} tensors, {coords} coordinates, worst relative error {:.2e} at {} (limit 1e-4)",
            worst.0, worst.1
        ),
    )
}

struct CleanOracle {
    x0: Vec<f64>,
    schedule: NoiseSchedule,
}

impl NoisePredictor for CleanOracle {
    fn predict_noise(&self, input: &DenoiseInput<'_>) -> Result<Vec<f64>, DiffusionError> {
        let ab = self.schedule.alpha_bar(input.step);
        Ok(input
            .x_t
            .iter()
            .zip(&self.x0)
            .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
            .collect())
    }
}

/// Exact ε̂ for `y | x ~ N(intercept + slope·x, var)`, `x` being channel 1.
struct GaussianOracle {
    schedule: NoiseSchedule,
    intercept: f64,
    slope: f64,
    var: f64,
}

impl NoisePredictor for GaussianOracle {
    fn predict_noise(&self, input: &DenoiseInput<'_>) -> Result<Vec<f64>, DiffusionError> {
        let m = self.intercept + self.slope * input.window.values[[1, 0]];
        let ab = self.schedule.alpha_bar(input.step);
        let c = (1.0 - ab).sqrt() / (ab * self.var + 1.0 - ab);
        Ok(input.x_t.iter().map(|x| c * (x - ab.sqrt() * m)).collect())
    }
}

fn two_channel_window(len: usize, observed: f64) -> TimeSeriesWindow {
    let values = Array2::from_shape_fn((2, len), |(c, _)| if c == 0 { 0.0 } else { observed });
    TimeSeriesWindow::new(
        values,
        Array2::from_elem((2, len), true),
        0,
        vec![ChannelMeta::level("y"), ChannelMeta::rain("x")],
    )
    .unwrap()
}

fn criterion_4_sampler() -> Outcome {
    let s1 = build_schedule(1, 0.3, 0.3).unwrap();
    let x0 = vec![0.7, -1.2, 3.4];
    let eps = vec![0.5, -0.25, 1.75];
    let x1 = forward_noise(&x0, 1, &eps, &s1).unwrap();
    let ab = s1.alpha_bar(1);
    let mut inversion: f64 = 0.0;
    for i in 0..3 {
        inversion = inversion.max(((x1[i] - (1.0 - ab).sqrt() * eps[i]) / ab.sqrt() - x0[i]).abs());
    }
    let w = two_channel_window(8, 0.0);
    let mask = forecast_mask(&w, &[0], 3).unwrap();
    let oracle = CleanOracle {
        x0: x0.clone(),
        schedule: s1.clone(),
    };
    let out = reverse_sample(&oracle, &w, &mask, &s1, 11).unwrap();
    for (a, b) in out.iter().zip(&x0) {
        inversion = inversion.max((a - b).abs());
    }

    // y, x standard bivariate with correlation 0.8 and means (1.5, 0); the
    // posterior of y given x = 0.5 is N(1.9, 0.36).
    let oracle = GaussianOracle {
        schedule: build_schedule(1000, 1e-4, 0.02).unwrap(),
        intercept: 1.5,
        slope: 0.8,
        var: 0.36,
    };
    let w = two_channel_window(1, 0.5);
    let mask = forecast_mask(&w, &[0], 1).unwrap();
    let draws = 10_000u64;
    let xs: Vec<f64> = (0..draws)
        .map(|seed| reverse_sample(&oracle, &w, &mask, &oracle.schedule, seed).unwrap()[0])
        .collect();
    let n = draws as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let (mu, v) = (1.9, 0.36);
    let se_mean = (v / n).sqrt();
    let se_var = v * (2.0 / (n - 1.0)).sqrt();
    let z_mean = (mean - mu).abs() / se_mean;
    let z_var = (var - v).abs() / se_var;
    outcome(
        inversion <= 1e-9 && z_mean <= 3.0 && z_var <= 3.0,
        format!(
            "T=1 inversion error {inversion:.1e} (limit 1e-9); posterior mean {mean:.4} vs {mu} ({z_mean:.2} SE), \
             variance {var:.4} vs {v} ({z_var:.2} SE), 1e4 draws"
        ),
    )
}

fn toy_band(lo: Vec<f64>, hi: Vec<f64>) -> IntervalBand {
    IntervalBand {
        horizon: lo.len(),
        median: lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect(),
        lo,
        hi,
        q_lo: 0.05,
        q_hi: 0.95,
        alpha: ALPHA,
        conformalized: false,
        condition: ConditionLabel::Dry,
        sensor: "sensor_1".into(),
        start_time: 0,
    }
}

/// Tries every grid level `k/(m₁+1)` in increasing order.
fn exhaustive_level(pool: &[(IntervalBand, Vec<f64>)], alpha: f64, seed: u64) -> Option<(usize, f64, Vec<f64>)> {
    let scores: Vec<Vec<f64>> = pool
        .iter()
        .map(|(b, y)| (0..y.len()).map(|t| cqr_score(y[t], b.lo[t], b.hi[t]).unwrap()).collect())
        .collect();
    let (fit, search) = split_indices(scores.len(), seed);
    let m1 = fit.len();
    let horizon = scores[0].len();
    for k in 1..=m1 {
        let u = k as f64 / (m1 + 1) as f64;
        let eps: Vec<f64> = (0..horizon)
            .map(|t| {
                let col: Vec<f64> = fit.iter().map(|&i| scores[i][t]).collect();
                critical_quantile(&col, u).unwrap()
            })
            .collect();
        let covered = search
            .iter()
            .filter(|&&i| scores[i].iter().zip(&eps).all(|(s, e)| s <= e))
            .count();
        if covered as f64 / search.len() as f64 >= alpha {
            return Some((k, u, eps));
        }
    }
    None
}

fn criterion_6_search_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let (mut agree, mut feasible, trials) = (0, 0, 300u64);
    let mut first_failure = None;
    for trial in 0..trials {
        let size = rng.random_range(20..=200);
        let horizon = rng.random_range(1..=12);
        let scale: f64 = rng.random_range(0.2..2.0);
        let alpha = [0.5, 0.8, 0.9, 0.95][trial as usize % 4];
        let pool: Vec<(IntervalBand, Vec<f64>)> = (0..size)
            .map(|_| {
                let lo: Vec<f64> = (0..horizon).map(|_| -1.0 + 0.1 * normal(&mut rng)).collect();
                let hi: Vec<f64> = lo.iter().map(|l| l + 2.0).collect();
                // Rounded truths give tied scores.
                let y = (0..horizon).map(|_| (scale * normal(&mut rng) * 20.0).round() / 20.0).collect();
                (toy_band(lo, hi), y)
            })
            .map(|(mut b, y)| {
                b.alpha = alpha;
                (b, y)
            })
            .collect();
        let ok = match (calibrate(&pool, alpha, trial), exhaustive_level(&pool, alpha, trial)) {
            (Ok(p), Some((k, u, eps))) => {
                feasible += 1;
                p.grid_index == k && p.level == u && p.corrections == eps
            }
            (Err(_), None) => true,
            _ => false,
        };
        if ok {
            agree += 1;
        } else if first_failure.is_none() {
            first_failure = Some(trial);
        }
    }

    let mut brute_checks = 0;
    let mut brute_ok = true;
    for m in 1..=50usize {
        let scores: Vec<f64> = (0..m).map(|_| (normal(&mut rng) * 4.0).round() / 4.0).collect();
        for k in 1..=m {
            let u = k as f64 / (m + 1) as f64;
            // Smallest score with at least k scores at or below it.
            let brute = scores
                .iter()
                .copied()
                .filter(|&s| scores.iter().filter(|&&x| x <= s).count() >= k)
                .fold(f64::INFINITY, f64::min);
            brute_ok &= critical_quantile(&scores, u).unwrap() == brute;
            brute_checks += 1;
        }
        let above = (m as f64 + 0.5) / (m + 1) as f64;
        brute_ok &= critical_quantile(&scores, above).unwrap() == f64::INFINITY;
        brute_checks += 1;
    }
    outcome(
        agree == trials && feasible > 0 && brute_ok,
        format!(
            "search agrees with exhaustive grid on {agree}/{trials} pools ({feasible} feasible){}; \
             critical_quantile brute force {} on {brute_checks} (m, u) cases",
            first_failure.map(|t| format!(", first mismatch trial {t}")).unwrap_or_default(),
            if brute_ok { "matches" } else { "DIFFERS" }
        ),
    )
}

fn criterion_8_fit_speed() -> Outcome {
    let dry = synthetic_truths(ConditionLabel::Dry, 600, 81);
    if dry.len() < 600 {
        return outcome(false, format!("only {} dry series", dry.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let samples: Vec<ImputationSamples> = dry.iter().map(|y| overconfident_samples(y, 100, &mut rng)).collect();
    let start = Instant::now();
    let pool: Vec<(IntervalBand, Vec<f64>)> = samples
        .iter()
        .zip(&dry)
        .map(|(s, y)| (band_from_samples(s, ALPHA, "sensor_1", ConditionLabel::Dry).unwrap(), y.clone()))
        .collect();
    let fitted = calibrate(&pool, ALPHA, 0);
    let secs = start.elapsed().as_secs_f64();
    match fitted {
        Ok(p) => outcome(
            secs <= 10.0,
            format!("600 series × H=40 × 100 samples: bands + fit in {secs:.3} s (limit 10 s), level {:.4}", p.level),
        ),
        Err(e) => outcome(false, format!("fit failed: {e}")),
    }
}

/// Small pipeline config for the determinism run.
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

fn cli(config: &Path, out: &Path, args: &[&str]) -> i32 {
    let mut argv = vec![
        "sewercast".to_string(),
        "--config".into(),
        config.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    argv.extend(args.iter().map(|a| a.to_string()));
    sewercast_cli::run(argv)
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn full_small_run(dir: &Path) -> Result<PathBuf, String> {
    let config = dir.join("config.json");
    std::fs::write(&config, SMALL).unwrap();
    let out = dir.join("run");
    let steps: [&[&str]; 5] = [
        &["synth"],
        &["train"],
        &["calibrate"],
        &["predict", "--window", "0", "--sensor", "sensor_1"],
        &["evaluate"],
    ];
    for args in steps {
        let code = cli(&config, &out, args);
        if code != 0 {
            return Err(format!("`{}` exited {code}", args.join(" ")));
        }
    }
    Ok(out)
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    files_under(root)
        .into_iter()
        .map(|rel| {
            let bytes = std::fs::read(root.join(&rel)).unwrap();
            (rel, bytes)
        })
        .collect()
}

/// Criteria 7 and the evaluation-row half of 1. Both runs use the same
/// directory, since the saved configs record the output path.
fn criterion_7_determinism() -> (Outcome, Option<EvaluationReport>) {
    let dir = tempfile::tempdir().unwrap();
    let mut snapshots = Vec::new();
    let mut report = None;
    for _ in 0..2 {
        let out = match full_small_run(dir.path()) {
            Ok(out) => out,
            Err(e) => return (outcome(false, e), None),
        };
        report = std::fs::read_to_string(out.join("evaluation/report.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<EvaluationReport>(&t).ok());
        snapshots.push(snapshot(&out));
        std::fs::remove_dir_all(&out).unwrap();
    }
    let (a, b) = (&snapshots[0], &snapshots[1]);
    let mut mismatched = Vec::new();
    if a.keys().ne(b.keys()) {
        mismatched.push("file lists differ".to_string());
    }
    let mut compared = 0;
    for (rel, bytes) in a {
        if rel.file_name().is_some_and(|n| n == "calibration_log.json") {
            continue;
        }
        compared += 1;
        if b.get(rel) != Some(bytes) {
            mismatched.push(rel.display().to_string());
        }
    }
    let kinds = ["weights", "-samples.csv", "predict/", "profiles/", "report", ".svg"];
    let missing: Vec<&str> = kinds
        .iter()
        .copied()
        .filter(|k| !a.keys().any(|p| p.display().to_string().contains(k)))
        .collect();
    (
        outcome(
            mismatched.is_empty() && missing.is_empty(),
            format!(
                "{compared} artifacts compared byte for byte across two full runs; {} differ{}{}",
                mismatched.len(),
                if mismatched.is_empty() {
                    String::new()
                } else {
                    format!(" {mismatched:?}")
                },
                if missing.is_empty() {
                    String::new()
                } else {
                    format!("; missing artifact kinds {missing:?}")
                }
            ),
        ),
        report,
    )
}

fn criterion_1_width_identity(report: Option<&EvaluationReport>) -> Outcome {
    let (published_ok, published_worst) = width_identity_published();
    let Some(report) = report else {
        return outcome(false, "no evaluation report from the pipeline run".into());
    };
    let worst = report
        .rows
        .iter()
        .map(|r| r.width_identity_residual().abs())
        .fold(0.0f64, f64::max);
    outcome(
        !report.rows.is_empty() && worst <= 1e-9 && published_ok,
        format!(
            "{} evaluation rows, worst residual {worst:.1e} (limit 1e-9); published rows worst {published_worst:.1e} \
             (4-decimal rounding, limit 2e-4)",
            report.rows.len()
        ),
    )
}

/// Desk-scale config: six channels × 240 steps, a 32-wide attention network.
const DESK: &str = r#"{
  "data": {"generator": {"n_windows": 600}},
  "training": {"epochs": 20, "max_windows": null}
}"#;

const MAE_SAMPLES: usize = 25;
const MAE_WET_WINDOWS: usize = 20;

fn criterion_5_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, DESK).unwrap();
    let out = dir.path().join("run");
    if cli(&config_path, &out, &["synth"]) != 0 {
        return outcome(false, "synth failed".into());
    }
    let config = RunConfig::resolve(Some(&config_path), &[format!("out={:?}", out.display().to_string())]).unwrap();
    let dataset = Dataset::load(&config).unwrap();
    let n_train = dataset
        .training_windows(config.data.window_len, config.data.train_stride, None)
        .len();
    let channels = dataset.windows[0].channels.len();
    progress(&format!("desk run: {n_train} training windows, {channels} channels, training..."));

    let start = Instant::now();
    if cli(&config_path, &out, &["train"]) != 0 {
        return outcome(false, "train failed".into());
    }
    let train_secs = start.elapsed().as_secs_f64();
    let history = Model::loss_history(&sewercast_cli::pipeline::Artifacts::new(&config)).unwrap();
    let (initial, last) = (history.initial().unwrap(), history.last().unwrap());

    let model = Model::load(&config, &sewercast_cli::pipeline::Artifacts::new(&config)).unwrap();
    let prepared = PreparedModel::new(&model.params, config.data.window_len);
    let groups = dataset
        .by_condition(Split::Test, config.data.rain_threshold, Some(MAE_WET_WINDOWS))
        .unwrap();
    let wet = groups.get(&ConditionLabel::Wet).cloned().unwrap_or_default();
    progress(&format!("desk run: trained in {train_secs:.0} s, forecasting {} wet test windows...", wet.len()));
    let (mut model_err, mut persist_err, mut n) = (0.0, 0.0, 0usize);
    for w in &wet {
        for sensor in &config.conformal.sensors {
            let c = level_channel(w, sensor).unwrap();
            let (Some(truth), Some(persist)) = (truth_tail(w, c, HORIZON), persistence_mae(w, c, HORIZON)) else {
                continue;
            };
            let band = forecast_band(
                &model,
                &prepared,
                w,
                c,
                HORIZON,
                ALPHA,
                MAE_SAMPLES,
                config.seed,
                ConditionLabel::Wet,
            )
            .unwrap();
            model_err += mae(&truth, &band.median).unwrap();
            persist_err += persist;
            n += 1;
        }
    }
    let (model_mae, persist_mae) = (model_err / n.max(1) as f64, persist_err / n.max(1) as f64);

    let probe = wet.first().copied().unwrap_or(&dataset.windows[0]);
    let c = level_channel(probe, &config.conformal.sensors[0]).unwrap();
    let start = Instant::now();
    let draws = forecast_samples(&model, &prepared, probe, c, HORIZON, 100, config.seed).unwrap();
    let sample_secs = start.elapsed().as_secs_f64();

    let pass = n_train >= 2000
        && channels == 6
        && config.data.window_len == 240
        && train_secs <= 900.0
        && last < 0.5 * initial
        && n > 0
        && model_mae < persist_mae
        && draws.n_samples() == 100
        && sample_secs <= 60.0;
    outcome(
        pass,
        format!(
            "{n_train} windows ({channels}×{}), train {train_secs:.0} s (limit 900); loss {initial:.3} -> {last:.3} \
             (ratio {:.3}, limit 0.5); wet MAE median {model_mae:.4} vs persistence {persist_mae:.4} over {n} series \
             ({MAE_SAMPLES} samples); 100 samples in {sample_secs:.1} s (limit 60)",
            config.data.window_len,
            last / initial
        ),
    )
}

fn timed(id: u8, name: &'static str, f: fn() -> Outcome, results: &mut BTreeMap<u8, (&'static str, Outcome)>) {
    progress(&format!("criterion {id}: {name}"));
    let start = Instant::now();
    let mut o = f();
    o.detail.push_str(&format!(" [{:.1} s]", start.elapsed().as_secs_f64()));
    results.insert(id, (name, o));
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; only a name
    // filter that excludes this target skips it.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let mut results: BTreeMap<u8, (&str, Outcome)> = BTreeMap::new();
    timed(3, "gradient oracle", criterion_3_gradients, &mut results);
    timed(4, "sampler algebra", criterion_4_sampler, &mut results);
    timed(6, "conformal search oracle", criterion_6_search_oracle, &mut results);
    timed(8, "calibration fit speed", criterion_8_fit_speed, &mut results);
    timed(2, "coverage guarantee", criterion_2_coverage, &mut results);

    progress("criterion 7: determinism");
    let start = Instant::now();
    let (mut det, report) = criterion_7_determinism();
    det.detail.push_str(&format!(" [{:.1} s]", start.elapsed().as_secs_f64()));
    results.insert(7, ("determinism", det));
    results.insert(1, ("width identity", criterion_1_width_identity(report.as_ref())));

    timed(5, "end-to-end desk run", criterion_5_end_to_end, &mut results);

    let mut failed = 0;
    for (id, (name, o)) in &results {
        println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += (!o.pass) as usize;
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
