//! Target masks: which positions of a window the denoiser must impute.
//!
//! Training masks hide a random-length tail of one or more level channels;
//! forecast masks hide a fixed-length tail of chosen channels. The rain
//! channel is never a target.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::TimeSeriesWindow;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("no channel is eligible for masking")]
    NoEligibleChannel,
    #[error("the rain channel cannot be a target")]
    RainChannelTargeted,
    #[error("horizon {horizon} exceeds window length {len}")]
    HorizonTooLarge { horizon: usize, len: usize },
    #[error("channel {0} does not exist")]
    ChannelOutOfRange(usize),
    #[error("invalid mask spec: {0}")]
    InvalidSpec(String),
}

/// `target[[k, l]] == true` marks a position to impute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub target: Array2<bool>,
}

impl Mask {
    pub fn empty(channels: usize, len: usize) -> Self {
        Self {
            target: Array2::from_elem((channels, len), false),
        }
    }

    pub fn count(&self) -> usize {
        self.target.iter().filter(|t| **t).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.target.iter().any(|t| *t)
    }

    /// Target positions in channel-major, time-ascending order. Every vector
    /// of per-target values in this crate uses this ordering.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.target
            .indexed_iter()
            .filter(|(_, t)| **t)
            .map(|(i, _)| i)
            .collect()
    }

    /// Channels holding at least one target, ascending.
    pub fn channels(&self) -> Vec<usize> {
        self.target
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(_, row)| row.iter().any(|t| *t))
            .map(|(k, _)| k)
            .collect()
    }

    /// `[channel, start, end)` runs, used for debug dumps.
    pub fn segments(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for (k, row) in self.target.rows().into_iter().enumerate() {
            let mut l = 0;
            while l < row.len() {
                if row[l] {
                    let start = l;
                    while l < row.len() && row[l] {
                        l += 1;
                    }
                    out.push([k, start, l]);
                } else {
                    l += 1;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub min_horizon: usize,
    pub max_horizon: usize,
    /// Defaults to every non-rain channel when `None`.
    pub max_channels: Option<usize>,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            min_horizon: 1,
            max_horizon: 40,
            max_channels: None,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self, channels: usize, len: usize) -> Result<usize, MaskError> {
        if !(1 <= self.min_horizon && self.min_horizon <= self.max_horizon && self.max_horizon <= len)
        {
            return Err(MaskError::InvalidSpec(format!(
                "need 1 <= min_horizon ({}) <= max_horizon ({}) <= {len}",
                self.min_horizon, self.max_horizon
            )));
        }
        let max_channels = self.max_channels.unwrap_or(channels.saturating_sub(1));
        if !(1 <= max_channels && max_channels < channels) {
            return Err(MaskError::InvalidSpec(format!(
                "max_channels {max_channels} must be in [1, {channels})"
            )));
        }
        Ok(max_channels)
    }
}

/// Self-supervised training mask: a uniform number of level channels, each
/// with an independent uniform horizon, hide their trailing observed values.
pub fn training_mask<R: Rng + ?Sized>(
    window: &TimeSeriesWindow,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<Mask, MaskError> {
    let (k, len) = window.values.dim();
    let max_channels = spec.validate(k, len)?;
    let rain = window.rain_channel();
    let eligible: Vec<usize> = (0..k)
        .filter(|&c| Some(c) != rain && window.observed.row(c).iter().any(|o| *o))
        .collect();
    if eligible.is_empty() {
        return Err(MaskError::NoEligibleChannel);
    }
    let n = rng.random_range(1..=max_channels.min(eligible.len()));
    let mut picked: Vec<usize> = sample(rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();

    let mut mask = Mask::empty(k, len);
    for c in picked {
        let h = rng.random_range(spec.min_horizon..=spec.max_horizon);
        for l in len - h..len {
            mask.target[[c, l]] = window.observed[[c, l]];
        }
    }
    Ok(mask)
}

/// Inference mask: the final `horizon` steps of each listed channel,
/// observed or not.
pub fn forecast_mask(
    window: &TimeSeriesWindow,
    channels: &[usize],
    horizon: usize,
) -> Result<Mask, MaskError> {
    let (k, len) = window.values.dim();
    if horizon > len {
        return Err(MaskError::HorizonTooLarge { horizon, len });
    }
    let rain = window.rain_channel();
    let mut mask = Mask::empty(k, len);
    for &c in channels {
        if c >= k {
            return Err(MaskError::ChannelOutOfRange(c));
        }
        if Some(c) == rain {
            return Err(MaskError::RainChannelTargeted);
        }
        for l in len - horizon..len {
            mask.target[[c, l]] = true;
        }
    }
    Ok(mask)
}
