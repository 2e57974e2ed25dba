//! Point-accuracy metrics, per-group reports and SVG figures.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::band::IntervalBand;
use crate::conformal::{joint_coverage, ConformalError, CorrectionProfile};
use crate::series::{ConditionLabel, TimeSeriesWindow};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("expected length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no values to score")]
    EmptyInput,
    #[error("every truth value is zero")]
    AllZeroTruth,
    #[error("group {0} has no series")]
    EmptyGroup(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_lengths(truth: &[f64], pred: &[f64]) -> Result<(), EvaluationError> {
    if truth.len() != pred.len() {
        return Err(EvaluationError::LengthMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(EvaluationError::EmptyInput);
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64, EvaluationError> {
    check_lengths(truth, pred)?;
    Ok(truth.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / truth.len() as f64)
}

/// Sum of `|y − p| / |y|` over non-zero truths, the number of such
/// positions, and the number skipped.
fn ape_terms(truth: &[f64], pred: &[f64]) -> (f64, usize, usize) {
    let mut sum = 0.0;
    let mut used = 0;
    for (y, p) in truth.iter().zip(pred) {
        if *y != 0.0 {
            sum += ((y - p) / y).abs();
            used += 1;
        }
    }
    (sum, used, truth.len() - used)
}

/// Mean absolute percentage error in percent; zero-truth positions are
/// left out.
pub fn mape(truth: &[f64], pred: &[f64]) -> Result<f64, EvaluationError> {
    check_lengths(truth, pred)?;
    let (sum, used, _) = ape_terms(truth, pred);
    if used == 0 {
        return Err(EvaluationError::AllZeroTruth);
    }
    Ok(100.0 * sum / used as f64)
}

/// One test series: its raw band, the corrected band and the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationCase {
    pub raw: IntervalBand,
    pub conformalized: IntervalBand,
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationGroup {
    pub sensor: String,
    pub condition: ConditionLabel,
    pub profile: CorrectionProfile,
    pub cases: Vec<EvaluationCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sensor: String,
    pub condition: ConditionLabel,
    pub series: usize,
    pub positions: usize,
    /// Positions left out of MAPE because the truth was zero.
    pub mape_excluded: usize,
    pub avg_target: f64,
    pub std_target: f64,
    pub mae: f64,
    pub mape: f64,
    pub raw_coverage: f64,
    pub raw_width: f64,
    pub conf_coverage: f64,
    pub conf_width: f64,
    pub avg_correction: f64,
}

impl ReportRow {
    /// `conf_width − raw_width − 2 · avg_correction`.
    pub fn width_identity_residual(&self) -> f64 {
        self.conf_width - self.raw_width - 2.0 * self.avg_correction
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub alpha: f64,
    pub horizon: usize,
    pub rows: Vec<ReportRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn build_row(group: &EvaluationGroup) -> Result<ReportRow, EvaluationError> {
    let label = format!("{}/{}", group.sensor, group.condition);
    if group.cases.is_empty() {
        return Err(EvaluationError::EmptyGroup(label));
    }
    let mut truths = Vec::new();
    let mut errors = Vec::new();
    let (mut ape_sum, mut ape_used, mut ape_skipped) = (0.0, 0, 0);
    for case in &group.cases {
        let (raw, conf) = (&case.raw, &case.conformalized);
        if raw.len() != case.truth.len() || conf.len() != case.truth.len() {
            return Err(EvaluationError::LengthMismatch {
                expected: case.truth.len(),
                got: raw.len().min(conf.len()),
            });
        }
        if raw.sensor != group.sensor || raw.condition != group.condition {
            return Err(EvaluationError::InvalidInput(format!(
                "band {}/{} filed under {label}",
                raw.sensor, raw.condition
            )));
        }
        check_lengths(&case.truth, &raw.median)?;
        errors.extend(case.truth.iter().zip(&raw.median).map(|(y, p)| (y - p).abs()));
        let (s, u, k) = ape_terms(&case.truth, &raw.median);
        ape_sum += s;
        ape_used += u;
        ape_skipped += k;
        truths.extend_from_slice(&case.truth);
    }
    let raw: Vec<IntervalBand> = group.cases.iter().map(|c| c.raw.clone()).collect();
    let conf: Vec<IntervalBand> = group.cases.iter().map(|c| c.conformalized.clone()).collect();
    let ys: Vec<Vec<f64>> = group.cases.iter().map(|c| c.truth.clone()).collect();
    let avg_target = mean(&truths);
    let std_target = (truths.iter().map(|y| (y - avg_target).powi(2)).sum::<f64>() / truths.len() as f64).sqrt();
    Ok(ReportRow {
        sensor: group.sensor.clone(),
        condition: group.condition,
        series: group.cases.len(),
        positions: truths.len(),
        mape_excluded: ape_skipped,
        avg_target,
        std_target,
        mae: mean(&errors),
        mape: if ape_used > 0 { 100.0 * ape_sum / ape_used as f64 } else { f64::NAN },
        raw_coverage: 100.0 * joint_coverage(&raw, &ys)?,
        raw_width: mean(&raw.iter().map(IntervalBand::mean_width).collect::<Vec<_>>()),
        conf_coverage: 100.0 * joint_coverage(&conf, &ys)?,
        conf_width: mean(&conf.iter().map(IntervalBand::mean_width).collect::<Vec<_>>()),
        avg_correction: group.profile.mean_correction(),
    })
}

/// One row per group, in the order given. MAE and MAPE score the band
/// median and average over every position in the group.
pub fn build_report(groups: &[EvaluationGroup]) -> Result<EvaluationReport, EvaluationError> {
    let rows = groups.iter().map(build_row).collect::<Result<Vec<_>, _>>()?;
    let first = groups.first().and_then(|g| g.cases.first());
    Ok(EvaluationReport {
        alpha: first.map_or(f64::NAN, |c| c.raw.alpha),
        horizon: first.map_or(0, |c| c.raw.len()),
        rows,
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// Fixed-width table in the column order of the published comparison.
    pub fn to_table(&self) -> String {
        let headers = [
            "Group",
            "Series",
            "Avg. Target (±std)",
            "Avg. MAE",
            "Avg. MAPE",
            "QR Cov. (%)",
            "QR Width",
            "Conf. Cov. (%)",
            "Conf. Width",
            "Avg. Correction",
        ];
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    format!("{} – {}", r.sensor, r.condition),
                    r.series.to_string(),
                    format!("{:.3} (±{:.3})", r.avg_target, r.std_target),
                    format!("{:.4}", r.mae),
                    format!("{:.4}", r.mape),
                    format!("{:.2}", r.raw_coverage),
                    format!("{:.4}", r.raw_width),
                    format!("{:.2}", r.conf_coverage),
                    format!("{:.4}", r.conf_width),
                    format!("{:.4}", r.avg_correction),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..headers.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|row| row[i].chars().count())
                    .chain([headers[i].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |row: &[String]| -> String {
            let mut out = String::new();
            for (i, cell) in row.iter().enumerate() {
                let pad = widths[i] - cell.chars().count();
                if i == 0 {
                    out.push_str(cell);
                    out.push_str(&" ".repeat(pad));
                } else {
                    out.push_str("  ");
                    out.push_str(&" ".repeat(pad));
                    out.push_str(cell);
                }
            }
            out.trim_end().to_string()
        };
        let mut text = String::new();
        text.push_str(&line(&headers.map(String::from)));
        text.push('\n');
        let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        text.push_str(&"-".repeat(total));
        text.push('\n');
        for row in &cells {
            text.push_str(&line(row));
            text.push('\n');
        }
        text
    }
}

const SVG_WIDTH: f64 = 760.0;
const SVG_HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 20.0;
const RAIN_TOP: f64 = 36.0;
const RAIN_HEIGHT: f64 = 100.0;
const LEVEL_TOP: f64 = 170.0;
const LEVEL_HEIGHT: f64 = 260.0;

struct Axis {
    lo: f64,
    hi: f64,
    top: f64,
    height: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, top: f64, height: f64, floor_zero: bool) -> Self {
        let (mut lo, mut hi) = values
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if floor_zero {
            lo = lo.min(0.0);
        }
        let span = (hi - lo).max(1e-6 * hi.abs().max(1.0));
        let pad = if floor_zero { 0.0 } else { 0.06 * span };
        Self {
            lo: lo - pad,
            hi: lo + span + pad,
            top,
            height,
        }
    }

    fn y(&self, v: f64) -> f64 {
        let v = v.clamp(self.lo, self.hi);
        self.top + self.height * (1.0 - (v - self.lo) / (self.hi - self.lo))
    }
}

fn polyline(points: &[(f64, f64)]) -> String {
    let mut s = String::new();
    for (i, (x, y)) in points.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:.2},{y:.2}");
    }
    s
}

/// Rain bars on top and the forecast channel below, covering the last
/// `2 · horizon` steps of `window` (physical units). The corrected band is
/// drawn behind the raw band; the forecast region is shaded and delimited.
pub fn render_svg(
    window: &TimeSeriesWindow,
    raw: &IntervalBand,
    conformalized: &IntervalBand,
    truth: &[f64],
) -> Result<String, EvaluationError> {
    let h = raw.len();
    if conformalized.len() != h || truth.len() != h {
        return Err(EvaluationError::LengthMismatch {
            expected: h,
            got: if truth.len() != h { truth.len() } else { conformalized.len() },
        });
    }
    let len = window.len();
    if h > len {
        return Err(EvaluationError::InvalidInput(format!("horizon {h} exceeds window length {len}")));
    }
    let channel = window
        .channel_index(&raw.sensor)
        .ok_or_else(|| EvaluationError::InvalidInput(format!("window has no channel {}", raw.sensor)))?;
    let rain = window
        .rain_channel()
        .ok_or_else(|| EvaluationError::InvalidInput("window has no rain channel".into()))?;

    let shown = (2 * h).clamp(1, len);
    let first = len - shown;
    let fc_start = len - h;
    let plot_w = SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let step_w = plot_w / shown as f64;
    let x = |l: usize| MARGIN_LEFT + (l - first) as f64 * step_w + 0.5 * step_w;

    let context: Vec<(usize, f64)> = (first..fc_start)
        .filter_map(|l| window.get(channel, l).map(|v| (l, v)))
        .collect();
    let level_axis = Axis::new(
        context
            .iter()
            .map(|p| p.1)
            .chain(truth.iter().copied())
            .chain(raw.lo.iter().chain(&raw.hi).copied())
            .chain(conformalized.lo.iter().chain(&conformalized.hi).copied()),
        LEVEL_TOP,
        LEVEL_HEIGHT,
        false,
    );
    let rain_vals: Vec<(usize, f64)> = (first..len)
        .filter_map(|l| window.get(rain, l).map(|v| (l, v)))
        .collect();
    let rain_axis = Axis::new(rain_vals.iter().map(|p| p.1), RAIN_TOP, RAIN_HEIGHT, true);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN_LEFT}" y="20" font-size="13">{} – {} – start {}</text>"#,
        escape(&raw.sensor),
        raw.condition,
        window.start_time
    );

    // Forecast region.
    let fx = MARGIN_LEFT + (fc_start - first) as f64 * step_w;
    let _ = writeln!(
        svg,
        r##"<rect x="{fx:.2}" y="{RAIN_TOP:.2}" width="{:.2}" height="{:.2}" fill="#f2f2f2"/>"##,
        SVG_WIDTH - MARGIN_RIGHT - fx,
        LEVEL_TOP + LEVEL_HEIGHT - RAIN_TOP
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{fx:.2}" y1="{RAIN_TOP:.2}" x2="{fx:.2}" y2="{:.2}" stroke="#555555" stroke-dasharray="4 3"/>"##,
        LEVEL_TOP + LEVEL_HEIGHT
    );

    // Rain panel.
    for (l, v) in &rain_vals {
        let top = rain_axis.y(*v);
        let base = rain_axis.y(0.0);
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="#4a78b5"/>"##,
            x(*l) - 0.4 * step_w,
            0.8 * step_w,
            base - top
        );
    }
    frame(&mut svg, &rain_axis, "rain (mm/h)");

    // Level panel: bands, context, truth, median.
    let band_polygon = |b: &IntervalBand| -> String {
        let upper: Vec<(f64, f64)> = (0..h).map(|t| (x(fc_start + t), level_axis.y(b.hi[t]))).collect();
        let lower: Vec<(f64, f64)> = (0..h).rev().map(|t| (x(fc_start + t), level_axis.y(b.lo[t]))).collect();
        polyline(&[upper, lower].concat())
    };
    let _ = writeln!(
        svg,
        r##"<polygon points="{}" fill="#f4a259" fill-opacity="0.35" stroke="#e07b24" stroke-width="0.8"/>"##,
        band_polygon(conformalized)
    );
    let _ = writeln!(
        svg,
        r##"<polygon points="{}" fill="#5b8e7d" fill-opacity="0.45" stroke="#3d6b5b" stroke-width="0.8"/>"##,
        band_polygon(raw)
    );
    let ctx_pts: Vec<(f64, f64)> = context.iter().map(|&(l, v)| (x(l), level_axis.y(v))).collect();
    if !ctx_pts.is_empty() {
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#222222" stroke-width="1.4"/>"##,
            polyline(&ctx_pts)
        );
    }
    let truth_pts: Vec<(f64, f64)> = (0..h).map(|t| (x(fc_start + t), level_axis.y(truth[t]))).collect();
    let median_pts: Vec<(f64, f64)> = (0..h).map(|t| (x(fc_start + t), level_axis.y(raw.median[t]))).collect();
    if h > 0 {
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#222222" stroke-width="1.4"/>"##,
            polyline(&truth_pts)
        );
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#b83b5e" stroke-width="1.2" stroke-dasharray="5 3"/>"##,
            polyline(&median_pts)
        );
    }
    frame(&mut svg, &level_axis, &format!("{} level", escape(&raw.sensor)));

    // Legend.
    let ly = SVG_HEIGHT - 22.0;
    let entries = [
        ("#222222", "truth"),
        ("#b83b5e", "median"),
        ("#5b8e7d", "quantile band"),
        ("#f4a259", "conformalized"),
    ];
    for (i, (color, label)) in entries.iter().enumerate() {
        let lx = MARGIN_LEFT + i as f64 * 140.0;
        let _ = writeln!(svg, r#"<rect x="{lx:.2}" y="{:.2}" width="14" height="8" fill="{color}"/>"#, ly - 8.0);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{ly:.2}">{label}</text>"#, lx + 20.0);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn frame(svg: &mut String, axis: &Axis, label: &str) {
    let right = SVG_WIDTH - MARGIN_RIGHT;
    let bottom = axis.top + axis.height;
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_LEFT:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#888888"/>"##,
        axis.top,
        right - MARGIN_LEFT,
        axis.height
    );
    for (v, y) in [(axis.hi, axis.top), (axis.lo, bottom)] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            MARGIN_LEFT - 4.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="10">{label}</text>"#,
        MARGIN_LEFT + 4.0,
        axis.top + 12.0
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes [`render_svg`] output to `path`.
pub fn emit_plot(
    window: &TimeSeriesWindow,
    raw: &IntervalBand,
    conformalized: &IntervalBand,
    truth: &[f64],
    path: &Path,
) -> Result<(), EvaluationError> {
    let svg = render_svg(window, raw, conformalized, truth)?;
    std::fs::write(path, svg)?;
    Ok(())
}
