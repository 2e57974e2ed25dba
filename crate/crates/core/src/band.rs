//! Empirical quantile bands over imputation samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::ImputationSamples;
use crate::series::ConditionLabel;

#[derive(Debug, Error, PartialEq)]
pub enum BandError {
    #[error("no values to summarize")]
    EmptyInput,
    #[error("level {0} outside [0, 1]")]
    LevelOutOfRange(f64),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

/// Linear interpolation between order statistics at fractional index
/// `q · (N − 1)`.
pub fn empirical_quantile(values: &[f64], q: f64) -> Result<f64, BandError> {
    if values.is_empty() {
        return Err(BandError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64, BandError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(BandError::LevelOutOfRange(q));
    }
    let pos = q * (sorted.len() - 1) as f64;
    let below = pos.floor() as usize;
    let above = pos.ceil() as usize;
    let frac = pos - below as f64;
    Ok(sorted[below] + frac * (sorted[above] - sorted[below]))
}

/// Per-step `(lo, median, hi)` for one forecast target, in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBand {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub median: Vec<f64>,
    pub q_lo: f64,
    pub q_hi: f64,
    pub alpha: f64,
    pub conformalized: bool,
    pub condition: ConditionLabel,
    pub horizon: usize,
    pub sensor: String,
    pub start_time: i64,
}

#[derive(Serialize, Deserialize)]
struct BandStep {
    step: usize,
    lo: f64,
    hi: f64,
    median: f64,
}

#[derive(Serialize, Deserialize)]
struct BandDocument {
    sensor: String,
    condition: ConditionLabel,
    horizon: usize,
    alpha: f64,
    q_lo: f64,
    q_hi: f64,
    conformalized: bool,
    start_time: i64,
    steps: Vec<BandStep>,
}

impl IntervalBand {
    pub fn len(&self) -> usize {
        self.median.len()
    }

    pub fn is_empty(&self) -> bool {
        self.median.is_empty()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.hi.iter().zip(&self.lo).map(|(h, l)| h - l).collect()
    }

    pub fn mean_width(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.widths().iter().sum::<f64>() / self.len() as f64
    }

    /// Whether `truth` lies in `[lo_t, hi_t]` at every step.
    pub fn covers(&self, truth: &[f64]) -> bool {
        truth.len() == self.len()
            && truth
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(y, (l, h))| l <= y && y <= h)
    }

    /// JSON with one `{step, lo, hi, median}` object per step (steps are
    /// numbered from 1).
    pub fn to_json(&self) -> serde_json::Result<String> {
        let doc = BandDocument {
            sensor: self.sensor.clone(),
            condition: self.condition,
            horizon: self.horizon,
            alpha: self.alpha,
            q_lo: self.q_lo,
            q_hi: self.q_hi,
            conformalized: self.conformalized,
            start_time: self.start_time,
            steps: (0..self.len())
                .map(|i| BandStep {
                    step: i + 1,
                    lo: self.lo[i],
                    hi: self.hi[i],
                    median: self.median[i],
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        let doc: BandDocument = serde_json::from_str(text)?;
        Ok(Self {
            lo: doc.steps.iter().map(|s| s.lo).collect(),
            hi: doc.steps.iter().map(|s| s.hi).collect(),
            median: doc.steps.iter().map(|s| s.median).collect(),
            q_lo: doc.q_lo,
            q_hi: doc.q_hi,
            alpha: doc.alpha,
            conformalized: doc.conformalized,
            condition: doc.condition,
            horizon: doc.horizon,
            sensor: doc.sensor,
            start_time: doc.start_time,
        })
    }
}

/// Symmetric `(1 ± α)/2` quantiles and the median at each target position.
/// `sensor` and `condition` only label the result.
pub fn band_from_samples(
    samples: &ImputationSamples,
    alpha: f64,
    sensor: &str,
    condition: ConditionLabel,
) -> Result<IntervalBand, BandError> {
    if samples.n_samples() < 2 {
        return Err(BandError::TooFewSamples(samples.n_samples()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BandError::LevelOutOfRange(alpha));
    }
    let q_lo = (1.0 - alpha) / 2.0;
    let q_hi = 1.0 - q_lo;
    let m = samples.n_targets();
    let (mut lo, mut hi, mut median) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
    for j in 0..m {
        let mut col = samples.column(j);
        col.sort_by(f64::total_cmp);
        lo.push(quantile_sorted(&col, q_lo)?);
        median.push(quantile_sorted(&col, 0.5)?);
        hi.push(quantile_sorted(&col, q_hi)?);
    }
    Ok(IntervalBand {
        lo,
        hi,
        median,
        q_lo,
        q_hi,
        alpha,
        conformalized: false,
        condition,
        horizon: m,
        sensor: sensor.to_string(),
        start_time: samples.start_time,
    })
}
