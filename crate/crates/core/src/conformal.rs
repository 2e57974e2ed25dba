//! Conformal calibration of quantile bands.
//!
//! Each calibration series yields a vector of CQR scores, one per forecast
//! step. The pool is split in half. The fit half supplies per-step score
//! distributions; a single level `u` is pushed through all of them at once
//! (the diagonal of their empirical copula), giving thresholds `ε_t(u)`.
//! The search half then picks the smallest grid level whose thresholds cover
//! whole series jointly at rate `α`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::band::IntervalBand;
use crate::series::ConditionLabel;

/// Smallest pool `calibrate` accepts.
pub const MIN_POOL: usize = 20;

/// Bounds replace infinite corrections with `±CAP_FACTOR · max |truth|`.
pub const CAP_FACTOR: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum ConformalError {
    #[error("interval is inverted: lo {lo} > hi {hi}")]
    InvertedInterval { lo: f64, hi: f64 },
    #[error("no scores")]
    EmptyInput,
    #[error("level {0} outside (0, 1)")]
    InvalidLevel(f64),
    #[error("calibration pool has {size} series, need at least {min}")]
    PoolTooSmall { size: usize, min: usize },
    #[error("no grid level reaches coverage {alpha}; best is {best}")]
    NoFeasibleLevel { alpha: f64, best: f64 },
    #[error("key mismatch: {0}")]
    KeyMismatch(String),
    #[error("band is already conformalized")]
    AlreadyConformalized,
    #[error("expected length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// `max(lo − y, y − hi)`: negative strictly inside, zero on a bound,
/// otherwise the distance to the nearer bound.
pub fn cqr_score(y: f64, lo: f64, hi: f64) -> Result<f64, ConformalError> {
    if lo > hi {
        return Err(ConformalError::InvertedInterval { lo, hi });
    }
    Ok((lo - y).max(y - hi))
}

/// Rank `⌈(m + 1) · u⌉` with a guard against products such as
/// `(m + 1) · k/(m + 1)` landing a hair above the integer `k`.
fn conformal_rank(m: usize, u: f64) -> usize {
    let x = (m + 1) as f64 * u;
    let nearest = x.round();
    let x = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) { nearest } else { x };
    x.ceil() as usize
}

/// The `⌈(m + 1) · u⌉`-th smallest score, or `+∞` when that rank exceeds `m`.
pub fn critical_quantile(scores: &[f64], u: f64) -> Result<f64, ConformalError> {
    if scores.is_empty() {
        return Err(ConformalError::EmptyInput);
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(ConformalError::InvalidLevel(u));
    }
    let rank = conformal_rank(scores.len(), u).max(1);
    if rank > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonconformityRecord {
    /// Start time of the window the scores came from.
    pub series: i64,
    pub condition: ConditionLabel,
    pub scores: Vec<f64>,
}

impl NonconformityRecord {
    pub fn from_band(band: &IntervalBand, truth: &[f64]) -> Result<Self, ConformalError> {
        if truth.len() != band.len() {
            return Err(ConformalError::LengthMismatch {
                expected: band.len(),
                got: truth.len(),
            });
        }
        let scores = truth
            .iter()
            .zip(band.lo.iter().zip(&band.hi))
            .map(|(&y, (&lo, &hi))| cqr_score(y, lo, hi))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            series: band.start_time,
            condition: band.condition,
            scores,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileKey {
    pub sensor: String,
    pub condition: ConditionLabel,
    pub horizon: usize,
    pub alpha: f64,
}

impl ProfileKey {
    pub fn of_band(band: &IntervalBand) -> Self {
        Self {
            sensor: band.sensor.clone(),
            condition: band.condition,
            horizon: band.len(),
            alpha: band.alpha,
        }
    }

    /// File-name friendly form, e.g. `sensor_3-wet-h40-a0.9`.
    pub fn slug(&self) -> String {
        format!("{}-{}-h{}-a{}", self.sensor, self.condition, self.horizon, self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionProfile {
    pub key: ProfileKey,
    /// `ε_t`, physical units, one per step.
    pub corrections: Vec<f64>,
    /// Selected level `u* = k*/(m₁ + 1)`.
    pub level: f64,
    pub grid_index: usize,
    pub fit_size: usize,
    pub search_size: usize,
    /// Joint coverage of the search half at `u*`.
    pub achieved_coverage: f64,
    pub split_seed: u64,
    /// Magnitude substituted for infinite corrections.
    pub bound_cap: f64,
}

impl CorrectionProfile {
    pub fn mean_correction(&self) -> f64 {
        if self.corrections.is_empty() {
            return 0.0;
        }
        self.corrections.iter().sum::<f64>() / self.corrections.len() as f64
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

fn check_pool(pool: &[(IntervalBand, Vec<f64>)]) -> Result<ProfileKey, ConformalError> {
    if pool.len() < MIN_POOL {
        return Err(ConformalError::PoolTooSmall {
            size: pool.len(),
            min: MIN_POOL,
        });
    }
    let key = ProfileKey::of_band(&pool[0].0);
    let levels = (pool[0].0.q_lo, pool[0].0.q_hi);
    for (band, _) in pool {
        if band.conformalized {
            return Err(ConformalError::AlreadyConformalized);
        }
        if ProfileKey::of_band(band) != key || (band.q_lo, band.q_hi) != levels {
            return Err(ConformalError::KeyMismatch(format!(
                "pool mixes {} with {}",
                key.slug(),
                ProfileKey::of_band(band).slug()
            )));
        }
    }
    Ok(key)
}

/// Row indices of the fit half (first `m / 2` of a seeded shuffle) and the
/// search half of an `m`-series pool.
pub fn split_indices(m: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let search = order.split_off(m / 2);
    (order, search)
}

fn split_scores(scores: &[Vec<f64>], seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (fit, search) = split_indices(scores.len(), seed);
    let pick = |rows: Vec<usize>| rows.into_iter().map(|i| scores[i].clone()).collect();
    (pick(fit), pick(search))
}

/// Per-step sorted fit scores.
fn sorted_columns(fit: &[Vec<f64>], horizon: usize) -> Vec<Vec<f64>> {
    (0..horizon)
        .map(|t| {
            let mut col: Vec<f64> = fit.iter().map(|row| row[t]).collect();
            col.sort_by(f64::total_cmp);
            col
        })
        .collect()
}

/// Smallest grid index `k` at which `row` is jointly covered: at step `t`
/// the threshold is the `k`-th smallest fit score, which is at least
/// `S[t]` exactly when fewer than `k` fit scores lie strictly below `S[t]`.
fn required_index(row: &[f64], columns: &[Vec<f64>]) -> usize {
    row.iter()
        .zip(columns)
        .map(|(&s, col)| col.partition_point(|&v| v < s))
        .max()
        .unwrap_or(0)
        + 1
}

/// Fits per-step corrections for one `(sensor, condition, horizon, α)` pool
/// of `(raw band, truth)` pairs.
pub fn calibrate(
    pool: &[(IntervalBand, Vec<f64>)],
    alpha: f64,
    split_seed: u64,
) -> Result<CorrectionProfile, ConformalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::InvalidLevel(alpha));
    }
    let key = check_pool(pool)?;
    if key.alpha != alpha {
        return Err(ConformalError::KeyMismatch(format!(
            "bands were built at alpha {}, calibration requested {alpha}",
            key.alpha
        )));
    }
    let horizon = key.horizon;
    let scores = pool
        .iter()
        .map(|(band, truth)| NonconformityRecord::from_band(band, truth).map(|r| r.scores))
        .collect::<Result<Vec<_>, _>>()?;
    let bound_cap = CAP_FACTOR
        * pool
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));

    let (fit, search) = split_scores(&scores, split_seed);
    let (m1, m2) = (fit.len(), search.len());
    let columns = sorted_columns(&fit, horizon);
    let mut needed: Vec<usize> = search.iter().map(|row| required_index(row, &columns)).collect();
    needed.sort_unstable();

    // Coverage at index k is #{needed ≤ k}/m₂; the target count is the
    // smallest c with c/m₂ ≥ α.
    let target = (1..=m2)
        .find(|&c| c as f64 / m2 as f64 >= alpha)
        .unwrap_or(m2);
    let k = needed[target - 1];
    if k > m1 {
        let best = needed.iter().filter(|&&n| n <= m1).count() as f64 / m2 as f64;
        return Err(ConformalError::NoFeasibleLevel { alpha, best });
    }
    let covered = needed.iter().filter(|&&n| n <= k).count();
    Ok(CorrectionProfile {
        key,
        corrections: columns.iter().map(|col| col[k - 1]).collect(),
        level: k as f64 / (m1 + 1) as f64,
        grid_index: k,
        fit_size: m1,
        search_size: m2,
        achieved_coverage: covered as f64 / m2 as f64,
        split_seed,
        bound_cap,
    })
}

/// Widens (or, for negative `ε_t`, narrows) both bounds by `ε_t`.
pub fn apply_corrections(
    band: &IntervalBand,
    profile: &CorrectionProfile,
) -> Result<IntervalBand, ConformalError> {
    if band.conformalized {
        return Err(ConformalError::AlreadyConformalized);
    }
    let key = ProfileKey::of_band(band);
    if key != profile.key {
        return Err(ConformalError::KeyMismatch(format!(
            "band {} vs profile {}",
            key.slug(),
            profile.key.slug()
        )));
    }
    if profile.corrections.len() != band.len() {
        return Err(ConformalError::LengthMismatch {
            expected: band.len(),
            got: profile.corrections.len(),
        });
    }
    let mut out = band.clone();
    for (t, &eps) in profile.corrections.iter().enumerate() {
        if eps.is_infinite() {
            out.lo[t] = -profile.bound_cap;
            out.hi[t] = profile.bound_cap;
        } else {
            out.lo[t] = band.lo[t] - eps;
            out.hi[t] = band.hi[t] + eps;
        }
    }
    out.conformalized = true;
    Ok(out)
}

/// Fraction of series whose truth lies inside the band at every step.
pub fn joint_coverage(bands: &[IntervalBand], truths: &[Vec<f64>]) -> Result<f64, ConformalError> {
    if bands.len() != truths.len() {
        return Err(ConformalError::LengthMismatch {
            expected: bands.len(),
            got: truths.len(),
        });
    }
    if bands.is_empty() {
        return Err(ConformalError::EmptyInput);
    }
    let mut covered = 0usize;
    for (band, truth) in bands.iter().zip(truths) {
        if truth.len() != band.len() {
            return Err(ConformalError::LengthMismatch {
                expected: band.len(),
                got: truth.len(),
            });
        }
        covered += band.covers(truth) as usize;
    }
    Ok(covered as f64 / bands.len() as f64)
}
