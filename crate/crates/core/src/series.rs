//! Multichannel sensor windows: data model, CSV ingestion, windowing,
//! weather-condition labelling and z-score normalization.
//!
//! A dataset is a sequence of rows sampled at a fixed cadence (six minutes by
//! default). Rows are cut into fixed-length windows of `L` steps; each window
//! carries a `K × L` value matrix and a matching observation mask. Positions
//! whose mask entry is `false` hold a sentinel that no consumer reads.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default sampling interval in seconds.
pub const DEFAULT_CADENCE_SECS: i64 = 360;
/// Default window length (24 hours at a six-minute cadence).
pub const DEFAULT_WINDOW_LEN: usize = 240;
/// Default rain threshold (mm/h) separating dry and wet windows.
pub const DEFAULT_RAIN_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("malformed value {value:?} at line {line}, column {column:?}")]
    MalformedRow {
        line: u64,
        column: String,
        value: String,
    },
    #[error("cadence violation at line {line}: gap of {gap}s is not a positive multiple of {cadence}s")]
    CadenceViolation { line: u64, gap: i64, cadence: i64 },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("window has no rain channel")]
    NoRainChannel,
    #[error("channel {channel:?} is degenerate (needs at least two observed values with nonzero spread)")]
    DegenerateChannel { channel: String },
    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Level,
    Rain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub name: String,
    pub kind: ChannelKind,
    pub unit: String,
}

impl ChannelMeta {
    pub fn level(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ChannelKind::Level,
            unit: "m".into(),
        }
    }

    pub fn rain(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ChannelKind::Rain,
            unit: "mm/h".into(),
        }
    }
}

/// Checks the channel-list invariants shared by every window of a dataset.
pub fn validate_schema(channels: &[ChannelMeta]) -> Result<(), SeriesError> {
    if channels.len() < 2 {
        return Err(SeriesError::SchemaMismatch(format!(
            "need at least 2 channels, got {}",
            channels.len()
        )));
    }
    let rain = channels.iter().filter(|c| c.kind == ChannelKind::Rain).count();
    if rain != 1 {
        return Err(SeriesError::SchemaMismatch(format!(
            "exactly one rain channel required, found {rain}"
        )));
    }
    let mut seen = HashSet::new();
    for c in channels {
        if !seen.insert(c.name.as_str()) {
            return Err(SeriesError::SchemaMismatch(format!(
                "duplicate channel name {:?}",
                c.name
            )));
        }
    }
    Ok(())
}

/// Index of the single rain channel, if any.
pub fn rain_index(channels: &[ChannelMeta]) -> Option<usize> {
    channels.iter().position(|c| c.kind == ChannelKind::Rain)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionLabel {
    Dry,
    Wet,
}

impl ConditionLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditionLabel::Dry => "dry",
            ConditionLabel::Wet => "wet",
        }
    }
}

impl fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ConditionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dry" => Ok(ConditionLabel::Dry),
            "wet" => Ok(ConditionLabel::Wet),
            other => Err(format!("unknown condition {other:?}")),
        }
    }
}

/// One `K × L` slice of a multichannel series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesWindow {
    /// Channel-major values (`values[[k, l]]`).
    pub values: Array2<f64>,
    /// `true` where a measurement is present.
    pub observed: Array2<bool>,
    /// Epoch seconds of the first step.
    pub start_time: i64,
    pub channels: Vec<ChannelMeta>,
}

impl TimeSeriesWindow {
    pub fn new(
        values: Array2<f64>,
        observed: Array2<bool>,
        start_time: i64,
        channels: Vec<ChannelMeta>,
    ) -> Result<Self, SeriesError> {
        validate_schema(&channels)?;
        if values.dim() != observed.dim() || values.nrows() != channels.len() {
            return Err(SeriesError::SchemaMismatch(format!(
                "values {:?}, mask {:?}, {} channels",
                values.dim(),
                observed.dim(),
                channels.len()
            )));
        }
        Ok(Self {
            values,
            observed,
            start_time,
            channels,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn rain_channel(&self) -> Option<usize> {
        rain_index(&self.channels)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    /// Observed value at `(k, l)`, `None` when masked out.
    pub fn get(&self, k: usize, l: usize) -> Option<f64> {
        self.observed[[k, l]].then(|| self.values[[k, l]])
    }
}

/// Wet iff any observed rain value in the window reaches `threshold`.
pub fn classify_condition(
    window: &TimeSeriesWindow,
    threshold: f64,
) -> Result<ConditionLabel, SeriesError> {
    if !(threshold >= 0.0) {
        return Err(SeriesError::InvalidThreshold(threshold));
    }
    let rain = window.rain_channel().ok_or(SeriesError::NoRainChannel)?;
    let wet = window
        .values
        .row(rain)
        .iter()
        .zip(window.observed.row(rain))
        .any(|(&v, &obs)| obs && v >= threshold);
    Ok(if wet {
        ConditionLabel::Wet
    } else {
        ConditionLabel::Dry
    })
}

/// A contiguous, cadence-regular table of rows. Gaps in the source file are
/// filled with fully unobserved rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub channels: Vec<ChannelMeta>,
    pub start_time: i64,
    pub cadence: i64,
    /// `rows[i][k]`, `None` = unobserved.
    pub rows: Vec<Vec<Option<f64>>>,
}

impl SeriesTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Windows of length `len` starting every `stride` rows; a partial trailing
    /// window is dropped.
    pub fn windows(&self, len: usize, stride: usize) -> Vec<TimeSeriesWindow> {
        assert!(len > 0 && stride > 0, "window length and stride must be positive");
        let k = self.channels.len();
        let mut out = Vec::new();
        let mut start = 0;
        while start + len <= self.rows.len() {
            let mut values = Array2::zeros((k, len));
            let mut observed = Array2::from_elem((k, len), false);
            for (l, row) in self.rows[start..start + len].iter().enumerate() {
                for (c, cell) in row.iter().enumerate() {
                    if let Some(v) = cell {
                        values[[c, l]] = *v;
                        observed[[c, l]] = true;
                    }
                }
            }
            out.push(TimeSeriesWindow {
                values,
                observed,
                start_time: self.start_time + start as i64 * self.cadence,
                channels: self.channels.clone(),
            });
            start += stride;
        }
        out
    }

    /// Rebuilds a table from consecutive, non-overlapping windows.
    pub fn from_windows(windows: &[TimeSeriesWindow], cadence: i64) -> Option<Self> {
        let first = windows.first()?;
        let mut rows = Vec::with_capacity(windows.len() * first.len());
        for w in windows {
            for l in 0..w.len() {
                rows.push((0..w.n_channels()).map(|k| w.get(k, l)).collect());
            }
        }
        Some(Self {
            channels: first.channels.clone(),
            start_time: first.start_time,
            cadence,
            rows,
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), SeriesError> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.channels.iter().map(|c| c.name.clone()));
        writer.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let ts = self.start_time + i as i64 * self.cadence;
            let mut rec = vec![format_timestamp(ts)];
            rec.extend(row.iter().map(|cell| match cell {
                Some(v) => format!("{v:.6}"),
                None => String::new(),
            }));
            writer.write_record(&rec)?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn format_timestamp(ts: i64) -> String {
    match chrono::DateTime::from_timestamp(ts, 0) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        None => ts.to_string(),
    }
}

fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(secs) = raw.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    chrono::NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| chrono::NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S"))
        .ok()
        .map(|dt| dt.and_utc().timestamp())
}

/// Parses a CSV table. The header must be `timestamp` followed by the schema
/// channel names in order; empty cells are unobserved.
pub fn read_table<R: std::io::Read>(
    reader: R,
    schema: &[ChannelMeta],
    cadence: i64,
) -> Result<SeriesTable, SeriesError> {
    validate_schema(schema)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let expected: Vec<&str> = std::iter::once("timestamp")
        .chain(schema.iter().map(|c| c.name.as_str()))
        .collect();
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(SeriesError::SchemaMismatch(format!(
            "header {got:?} does not match {expected:?}"
        )));
    }

    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    let mut start_time = 0;
    let mut last_time: Option<i64> = None;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let ts_raw = record.get(0).unwrap_or_default();
        let ts = parse_timestamp(ts_raw).ok_or_else(|| SeriesError::MalformedRow {
            line,
            column: "timestamp".into(),
            value: ts_raw.into(),
        })?;
        match last_time {
            None => start_time = ts,
            Some(prev) => {
                let gap = ts - prev;
                if gap <= 0 || gap % cadence != 0 {
                    return Err(SeriesError::CadenceViolation { line, gap, cadence });
                }
                for _ in 1..gap / cadence {
                    rows.push(vec![None; schema.len()]);
                }
            }
        }
        last_time = Some(ts);

        let mut row = Vec::with_capacity(schema.len());
        for (c, meta) in schema.iter().enumerate() {
            let cell = record.get(c + 1).unwrap_or_default();
            if cell.is_empty() {
                row.push(None);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| SeriesError::MalformedRow {
                line,
                column: meta.name.clone(),
                value: cell.into(),
            })?;
            if !v.is_finite() {
                return Err(SeriesError::MalformedRow {
                    line,
                    column: meta.name.clone(),
                    value: cell.into(),
                });
            }
            row.push(Some(v));
        }
        rows.push(row);
    }
    Ok(SeriesTable {
        channels: schema.to_vec(),
        start_time,
        cadence,
        rows,
    })
}

pub fn load_table(
    path: impl AsRef<Path>,
    schema: &[ChannelMeta],
) -> Result<SeriesTable, SeriesError> {
    let file = std::fs::File::open(path)?;
    read_table(std::io::BufReader::new(file), schema, DEFAULT_CADENCE_SECS)
}

/// Loads non-overlapping consecutive windows of `window_len` rows.
pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &[ChannelMeta],
    window_len: usize,
) -> Result<Vec<TimeSeriesWindow>, SeriesError> {
    Ok(load_table(path, schema)?.windows(window_len, window_len))
}

/// Per-channel z-score statistics fitted on observed training entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
    pub rain_log_transform: bool,
    pub rain_channel: usize,
}

/// Fits per-channel statistics over observed entries only. The rain channel
/// goes through `ln(1 + x)` first when `rain_log_transform` is set.
pub fn fit_normalizer(
    windows: &[TimeSeriesWindow],
    rain_log_transform: bool,
) -> Result<NormalizationStats, SeriesError> {
    let first = windows
        .first()
        .ok_or_else(|| SeriesError::SchemaMismatch("no training windows".into()))?;
    let rain = first.rain_channel().ok_or(SeriesError::NoRainChannel)?;
    let k = first.n_channels();
    let mut mean = Vec::with_capacity(k);
    let mut stddev = Vec::with_capacity(k);
    for c in 0..k {
        let forward = |v: f64| {
            if c == rain && rain_log_transform {
                v.ln_1p()
            } else {
                v
            }
        };
        let (mut n, mut sum) = (0usize, 0.0);
        for w in windows {
            for (v, obs) in w.values.row(c).iter().zip(w.observed.row(c)) {
                if *obs {
                    n += 1;
                    sum += forward(*v);
                }
            }
        }
        let degenerate = || SeriesError::DegenerateChannel {
            channel: first.channels[c].name.clone(),
        };
        if n < 2 {
            return Err(degenerate());
        }
        let m = sum / n as f64;
        let mut ss = 0.0;
        for w in windows {
            for (v, obs) in w.values.row(c).iter().zip(w.observed.row(c)) {
                if *obs {
                    ss += (forward(*v) - m).powi(2);
                }
            }
        }
        let sd = (ss / n as f64).sqrt();
        if !(sd > 0.0) {
            return Err(degenerate());
        }
        mean.push(m);
        stddev.push(sd);
    }
    Ok(NormalizationStats {
        channels: first.channels.iter().map(|c| c.name.clone()).collect(),
        mean,
        stddev,
        rain_log_transform,
        rain_channel: rain,
    })
}

impl NormalizationStats {
    pub fn normalize_value(&self, channel: usize, v: f64) -> f64 {
        let v = if channel == self.rain_channel && self.rain_log_transform {
            v.ln_1p()
        } else {
            v
        };
        (v - self.mean[channel]) / self.stddev[channel]
    }

    pub fn denormalize_value(&self, channel: usize, z: f64) -> f64 {
        let v = z * self.stddev[channel] + self.mean[channel];
        if channel == self.rain_channel && self.rain_log_transform {
            v.exp_m1()
        } else {
            v
        }
    }

    fn check(&self, window: &TimeSeriesWindow) -> Result<(), SeriesError> {
        let names: Vec<&str> = window.channels.iter().map(|c| c.name.as_str()).collect();
        if names != self.channels.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(SeriesError::SchemaMismatch(format!(
                "window channels {names:?} differ from normalizer channels {:?}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Z-scores every observed entry; unobserved entries become 0.
    pub fn apply(&self, window: &TimeSeriesWindow) -> Result<TimeSeriesWindow, SeriesError> {
        self.check(window)?;
        let mut out = window.clone();
        for ((k, l), v) in out.values.indexed_iter_mut() {
            *v = if window.observed[[k, l]] {
                self.normalize_value(k, *v)
            } else {
                0.0
            };
        }
        Ok(out)
    }

    /// Inverse of [`apply`](Self::apply) on observed entries.
    pub fn invert(&self, window: &TimeSeriesWindow) -> Result<TimeSeriesWindow, SeriesError> {
        self.check(window)?;
        let mut out = window.clone();
        for ((k, l), v) in out.values.indexed_iter_mut() {
            *v = if window.observed[[k, l]] {
                self.denormalize_value(k, *v)
            } else {
                0.0
            };
        }
        Ok(out)
    }
}
