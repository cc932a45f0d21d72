//! Batchwise and dynamic extrapolation over a test region, the
//! range-normalized relative error, report files, and SVG plots.
//!
//! Batchwise mode conditions every block on ground truth; dynamic mode feeds
//! each block's prediction back into the next context.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TimeSeries;
use crate::mixer::{self, ModelError};
use crate::par::{self, Execution};
use crate::tensor::Tensor;
use crate::trainer::Checkpoint;

/// Identifier stamped into every report for the error formula below.
pub const ERROR_FORMULA: &str = "range_normalized_mae_pct";
/// Errors are computed on de-normalized (physical) values.
pub const ERROR_SCALE: &str = "physical";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("range error: {0}")]
    Range(String),
    #[error("channel {channel} is constant over the series; its range is zero")]
    DegenerateRange { channel: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report format error: {0}")]
    Format(String),
}

/// Anything that maps a `channels x context_len` context (physical units)
/// to a `channels x horizon` forecast.
pub trait Forecaster: Sync {
    fn context_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn channels(&self) -> usize;
    /// `origin` is the absolute index of the first forecast sample. Learned
    /// models ignore it; reference forecasters may use it.
    fn forecast(&self, origin: usize, context: &Tensor) -> Result<Tensor, EvalError>;
}

/// A trained checkpoint wrapped as a [`Forecaster`]: normalizes the context,
/// runs the network in evaluation mode, and de-normalizes the output.
pub struct MixerForecaster<'a> {
    pub checkpoint: &'a Checkpoint,
}

impl Forecaster for MixerForecaster<'_> {
    fn context_len(&self) -> usize {
        self.checkpoint.model.context_len
    }

    fn horizon(&self) -> usize {
        self.checkpoint.model.horizon
    }

    fn channels(&self) -> usize {
        self.checkpoint.model.channels
    }

    fn forecast(&self, _origin: usize, context: &Tensor) -> Result<Tensor, EvalError> {
        let ck = self.checkpoint;
        let mut input = context.clone();
        ck.normalization.normalize_tensor(&mut input);
        let mut out = mixer::predict(&ck.params, &ck.model, &input)?;
        ck.normalization.denormalize_tensor(&mut out);
        Ok(out)
    }
}

/// Forecasts by copying the ground truth. Every error it produces is zero.
pub struct TruthOracle<'a> {
    pub series: &'a TimeSeries,
    pub context_len: usize,
    pub horizon: usize,
}

impl Forecaster for TruthOracle<'_> {
    fn context_len(&self) -> usize {
        self.context_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn channels(&self) -> usize {
        self.series.channels()
    }

    fn forecast(&self, origin: usize, _context: &Tensor) -> Result<Tensor, EvalError> {
        Ok(self.series.window(origin, self.horizon))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecastMode {
    Batchwise,
    Dynamic,
}

impl ForecastMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ForecastMode::Batchwise => "batchwise",
            ForecastMode::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for ForecastMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batchwise" => Ok(ForecastMode::Batchwise),
            "dynamic" => Ok(ForecastMode::Dynamic),
            other => Err(format!("unknown mode `{other}` (expected batchwise or dynamic)")),
        }
    }
}

/// One forecast block aligned with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBatch {
    pub origin: usize,
    pub prediction: Tensor,
    pub truth: Tensor,
    pub relative_error_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSummary {
    pub origin: usize,
    pub relative_error_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastReport {
    pub mode: ForecastMode,
    pub error_formula: String,
    pub error_scale: String,
    pub context_len: usize,
    pub horizon: usize,
    pub test_start: usize,
    pub test_end: usize,
    /// Hex SHA-256 of the checkpoint file, when evaluated from one.
    pub checkpoint_sha256: Option<String>,
    pub batches: Vec<BatchSummary>,
    pub mean_pct: f64,
    /// Population standard deviation of the per-batch errors.
    pub std_pct: f64,
}

impl ForecastReport {
    /// Recomputes `(mean, std)` from the per-batch list.
    pub fn recompute_summary(&self) -> (f64, f64) {
        mean_std(&self.batches.iter().map(|b| b.relative_error_pct).collect::<Vec<_>>())
    }
}

pub struct ForecastOutcome {
    pub report: ForecastReport,
    pub batches: Vec<ForecastBatch>,
}

impl ForecastOutcome {
    /// Predictions stitched into one series over the covered test region.
    pub fn forecast_series(&self, source: &TimeSeries) -> TimeSeries {
        let first = self.batches[0].origin;
        let horizon = self.report.horizon;
        let len = self.batches.len() * horizon;
        let channels = source.channels();
        let mut values = vec![0.0; channels * len];
        for (k, b) in self.batches.iter().enumerate() {
            for ch in 0..channels {
                values[ch * len + k * horizon..ch * len + (k + 1) * horizon].copy_from_slice(b.prediction.row(ch));
            }
        }
        TimeSeries::from_channel_major(source.times()[first..first + len].to_vec(), values, source.names().to_vec())
            .expect("stitched forecast is finite and uniform")
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `100 * mean |pred - truth| / range(channel)` over all `channels x horizon` entries.
pub fn relative_error(prediction: &Tensor, truth: &Tensor, channel_ranges: &[f64]) -> Result<f64, EvalError> {
    if prediction.shape() != truth.shape() || prediction.shape().len() != 2 {
        return Err(EvalError::Shape(format!("prediction {:?} vs truth {:?}", prediction.shape(), truth.shape())));
    }
    let (channels, len) = (truth.shape()[0], truth.shape()[1]);
    if channel_ranges.len() != channels {
        return Err(EvalError::Shape(format!("{} ranges for {channels} channels", channel_ranges.len())));
    }
    if let Some(channel) = channel_ranges.iter().position(|r| !(*r > 0.0)) {
        return Err(EvalError::DegenerateRange { channel });
    }
    let mut total = 0.0;
    for ch in 0..channels {
        let r = channel_ranges[ch];
        total += prediction.row(ch).iter().zip(truth.row(ch)).map(|(p, t)| (p - t).abs() / r).sum::<f64>();
    }
    Ok(100.0 * total / (channels * len) as f64)
}

fn check_inputs(
    model: &dyn Forecaster,
    series: &TimeSeries,
    test: &Range<usize>,
) -> Result<(Vec<f64>, usize), EvalError> {
    if model.channels() != series.channels() {
        return Err(EvalError::Incompatible(format!(
            "model has {} channels, series has {}",
            model.channels(),
            series.channels()
        )));
    }
    let (context, horizon) = (model.context_len(), model.horizon());
    if test.end > series.len() || test.start >= test.end {
        return Err(EvalError::Range(format!("test range {test:?} outside series of length {}", series.len())));
    }
    if test.len() < horizon {
        return Err(EvalError::Range(format!(
            "test range of {} samples is shorter than the horizon {horizon}",
            test.len()
        )));
    }
    if test.start < context {
        return Err(EvalError::Range(format!("test start {} leaves fewer than {context} context samples", test.start)));
    }
    let ranges = series.channel_ranges();
    if let Some(channel) = ranges.iter().position(|r| !(*r > 0.0)) {
        return Err(EvalError::DegenerateRange { channel });
    }
    Ok((ranges, test.len() / horizon))
}

fn build_report(
    mode: ForecastMode,
    model: &dyn Forecaster,
    test: &Range<usize>,
    batches: Vec<ForecastBatch>,
) -> ForecastOutcome {
    let summaries: Vec<BatchSummary> =
        batches.iter().map(|b| BatchSummary { origin: b.origin, relative_error_pct: b.relative_error_pct }).collect();
    let (mean_pct, std_pct) = mean_std(&summaries.iter().map(|b| b.relative_error_pct).collect::<Vec<_>>());
    ForecastOutcome {
        report: ForecastReport {
            mode,
            error_formula: ERROR_FORMULA.into(),
            error_scale: ERROR_SCALE.into(),
            context_len: model.context_len(),
            horizon: model.horizon(),
            test_start: test.start,
            test_end: test.end,
            checkpoint_sha256: None,
            batches: summaries,
            mean_pct,
            std_pct,
        },
        batches,
    }
}

fn check_forecast_shape(pred: &Tensor, channels: usize, horizon: usize) -> Result<(), EvalError> {
    if pred.shape() != [channels, horizon] {
        return Err(EvalError::Shape(format!(
            "forecaster returned {:?}, expected [{channels}, {horizon}]",
            pred.shape()
        )));
    }
    Ok(())
}

/// Forecasts `test` in consecutive blocks of `horizon`, each conditioned on
/// the ground-truth samples `[origin - context_len, origin)`. Blocks that
/// would run past the end of `test` are dropped.
pub fn batchwise_forecast(
    model: &dyn Forecaster,
    series: &TimeSeries,
    test: Range<usize>,
) -> Result<ForecastOutcome, EvalError> {
    batchwise_forecast_with(model, series, test, Execution::default())
}

pub fn batchwise_forecast_with(
    model: &dyn Forecaster,
    series: &TimeSeries,
    test: Range<usize>,
    exec: Execution,
) -> Result<ForecastOutcome, EvalError> {
    let (ranges, count) = check_inputs(model, series, &test)?;
    let (context, horizon) = (model.context_len(), model.horizon());
    let results = par::map_indexed_with(exec, count, |k| -> Result<ForecastBatch, EvalError> {
        let origin = test.start + k * horizon;
        let prediction = model.forecast(origin, &series.window(origin - context, context))?;
        check_forecast_shape(&prediction, series.channels(), horizon)?;
        let truth = series.window(origin, horizon);
        let relative_error_pct = relative_error(&prediction, &truth, &ranges)?;
        Ok(ForecastBatch { origin, prediction, truth, relative_error_pct })
    });
    let batches = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(build_report(ForecastMode::Batchwise, model, &test, batches))
}

/// Like [`batchwise_forecast`], but after the first block the newest
/// `horizon` predictions replace the oldest context samples.
pub fn dynamic_forecast(
    model: &dyn Forecaster,
    series: &TimeSeries,
    test: Range<usize>,
) -> Result<ForecastOutcome, EvalError> {
    let (ranges, count) = check_inputs(model, series, &test)?;
    let (context_len, horizon) = (model.context_len(), model.horizon());
    let channels = series.channels();
    let mut context = series.window(test.start - context_len, context_len);
    let mut batches = Vec::with_capacity(count);
    for k in 0..count {
        let origin = test.start + k * horizon;
        let prediction = model.forecast(origin, &context)?;
        check_forecast_shape(&prediction, channels, horizon)?;
        let truth = series.window(origin, horizon);
        let relative_error_pct = relative_error(&prediction, &truth, &ranges)?;

        let mut next = Vec::with_capacity(channels * context_len);
        for ch in 0..channels {
            let old = context.row(ch);
            let new = prediction.row(ch);
            if horizon >= context_len {
                next.extend_from_slice(&new[horizon - context_len..]);
            } else {
                next.extend_from_slice(&old[horizon..]);
                next.extend_from_slice(new);
            }
        }
        context = Tensor::from_vec(&[channels, context_len], next).expect("context shape");
        batches.push(ForecastBatch { origin, prediction, truth, relative_error_pct });
    }
    Ok(build_report(ForecastMode::Dynamic, model, &test, batches))
}

/// Largest `|x(t+1) - x(t)|` per channel.
pub fn max_step_fluctuation(series: &TimeSeries) -> Vec<f64> {
    (0..series.channels())
        .map(|ch| series.channel(ch).windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max))
        .collect()
}

pub fn report_to_json(report: &ForecastReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}

pub fn report_csv(report: &ForecastReport) -> String {
    let mut out = String::from("origin,relative_error_pct\n");
    for b in &report.batches {
        let _ = writeln!(out, "{},{:?}", b.origin, b.relative_error_pct);
    }
    out
}

/// Writes the report as JSON and its per-batch errors as CSV.
pub fn export_report(report: &ForecastReport, json_path: &Path, csv_path: &Path) -> Result<(), EvalError> {
    std::fs::write(json_path, report_to_json(report))?;
    std::fs::write(csv_path, report_csv(report))?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<ForecastReport, EvalError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| EvalError::Format(format!("{}: {e}", path.display())))
}

const PLOT_WIDTH: f64 = 960.0;
const PANE_HEIGHT: f64 = 220.0;
const MARGIN: f64 = 48.0;
const MAX_POINTS: usize = 2000;
const COLORS: [&str; 6] = ["#222222", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Renders one pane per channel with every series overlaid. Each channel is
/// min-max normalized over all series so curves share a [0, 1] axis; the
/// x axis spans the union of the series' time ranges.
pub fn plot_series(series: &[(&str, &TimeSeries)], title: &str, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, render_svg(series, title)?)?;
    Ok(())
}

pub fn render_svg(series: &[(&str, &TimeSeries)], title: &str) -> Result<String, EvalError> {
    let Some((_, first)) = series.first() else {
        return Err(EvalError::Incompatible("nothing to plot".into()));
    };
    let channels = first.channels();
    if let Some((label, _)) = series.iter().find(|(_, s)| s.channels() != channels) {
        return Err(EvalError::Incompatible(format!("series `{label}` has a different channel count")));
    }
    let t_min = series.iter().map(|(_, s)| s.times()[0]).fold(f64::INFINITY, f64::min);
    let t_max = series.iter().map(|(_, s)| *s.times().last().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let t_span = if t_max > t_min { t_max - t_min } else { 1.0 };
    let height = MARGIN + channels as f64 * (PANE_HEIGHT + MARGIN);
    let inner_w = PLOT_WIDTH - 2.0 * MARGIN;
    let inner_h = PANE_HEIGHT;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_WIDTH}" height="{height}" viewBox="0 0 {PLOT_WIDTH} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{:.1}" font-family="sans-serif" font-size="16">{}</text>"#,
        MARGIN * 0.6,
        escape(title)
    );
    for ch in 0..channels {
        let top = MARGIN + ch as f64 * (PANE_HEIGHT + MARGIN);
        let (lo, hi) = series
            .iter()
            .flat_map(|(_, s)| s.channel(ch).iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let _ = writeln!(svg, r#"<g class="pane" data-channel="{}">"#, escape(&first.names()[ch]));
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN}" y="{top:.1}" width="{inner_w}" height="{inner_h}" fill="none" stroke="#999999"/>"##
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{} (normalized)</text>"#,
            MARGIN + 4.0,
            top + 14.0,
            escape(&first.names()[ch])
        );
        for (si, (label, s)) in series.iter().enumerate() {
            let values = s.channel(ch);
            let stride = values.len().div_ceil(MAX_POINTS).max(1);
            let mut points = String::new();
            let mut idx: Vec<usize> = (0..values.len()).step_by(stride).collect();
            if *idx.last().unwrap() != values.len() - 1 {
                idx.push(values.len() - 1);
            }
            for i in idx {
                let x = MARGIN + (s.times()[i] - t_min) / t_span * inner_w;
                let y = top + inner_h - (values[i] - lo) / span * inner_h;
                let _ = write!(points, "{x:.2},{y:.2} ");
            }
            let _ = writeln!(
                svg,
                r#"<polyline data-series="{}" fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
                escape(label),
                COLORS[si % COLORS.len()],
                points.trim_end()
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    let legend_y = height - 12.0;
    for (si, (label, _)) in series.iter().enumerate() {
        let x = MARGIN + si as f64 * 160.0;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{legend_y:.1}" font-family="sans-serif" font-size="12" fill="{}">{}</text>"#,
            COLORS[si % COLORS.len()],
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
