//! Uniformly sampled multichannel series, chronological splits, z-score
//! normalization, sliding windows, and the CSV / metadata file formats.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetics::RateConstants;
use crate::par;
use crate::tensor::Tensor;

/// Smallest standard deviation used by [`NormalizationStats`].
pub const STD_FLOOR: f64 = 1e-12;

/// Relative tolerance on time-grid uniformity.
const UNIFORM_RTOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("split error: {0}")]
    Split(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid series: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A uniformly sampled trajectory stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    times: Vec<f64>,
    values: Vec<f64>,
    names: Vec<String>,
}

impl TimeSeries {
    /// Builds a series from `times` and channel-major `values`
    /// (`values[ch * len + i]`).
    pub fn from_channel_major(times: Vec<f64>, values: Vec<f64>, names: Vec<String>) -> Result<Self, DatasetError> {
        let len = times.len();
        if len == 0 || names.is_empty() {
            return Err(DatasetError::Invalid("series needs at least one sample and one channel".into()));
        }
        if values.len() != len * names.len() {
            return Err(DatasetError::Invalid(format!(
                "{} values for {} channels x {len} samples",
                values.len(),
                names.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::Invalid(format!("non-finite value at flat index {i}")));
        }
        check_uniform(&times).map_err(DatasetError::Invalid)?;
        Ok(TimeSeries { times, values, names })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Sampling interval; zero for a single-sample series.
    pub fn dt(&self) -> f64 {
        if self.len() < 2 {
            0.0
        } else {
            (self.times[self.len() - 1] - self.times[0]) / (self.len() - 1) as f64
        }
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = self.len();
        &self.values[ch * n..(ch + 1) * n]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.len();
        &mut self.values[ch * n..(ch + 1) * n]
    }

    pub fn value(&self, ch: usize, i: usize) -> f64 {
        self.values[ch * self.len() + i]
    }

    /// Copy of samples `range`, preserving absolute times.
    pub fn slice(&self, range: Range<usize>) -> TimeSeries {
        assert!(range.start < range.end && range.end <= self.len(), "slice {range:?} out of bounds");
        let mut values = Vec::with_capacity(self.channels() * range.len());
        for ch in 0..self.channels() {
            values.extend_from_slice(&self.channel(ch)[range.clone()]);
        }
        TimeSeries { times: self.times[range].to_vec(), values, names: self.names.clone() }
    }

    /// `channels x len` tensor of samples `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.channels() * len);
        for ch in 0..self.channels() {
            data.extend_from_slice(&self.channel(ch)[start..start + len]);
        }
        Tensor::from_vec(&[self.channels(), len], data).expect("window shape")
    }

    /// Appends `other`, which must continue the time grid.
    pub fn concat(&self, other: &TimeSeries) -> Result<TimeSeries, DatasetError> {
        if self.names != other.names {
            return Err(DatasetError::Invalid("channel names differ".into()));
        }
        let mut times = self.times.clone();
        times.extend_from_slice(&other.times);
        let mut values = Vec::with_capacity(self.values.len() + other.values.len());
        for ch in 0..self.channels() {
            values.extend_from_slice(self.channel(ch));
            values.extend_from_slice(other.channel(ch));
        }
        TimeSeries::from_channel_major(times, values, self.names.clone())
    }

    /// Per-channel `max - min`.
    pub fn channel_ranges(&self) -> Vec<f64> {
        (0..self.channels())
            .map(|ch| {
                let (lo, hi) = self
                    .channel(ch)
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
                hi - lo
            })
            .collect()
    }
}

fn check_uniform(times: &[f64]) -> Result<(), String> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err("non-finite time".into());
    }
    if times.len() < 2 {
        return Ok(());
    }
    for (i, w) in times.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(format!("times not strictly increasing at row {}", i + 1));
        }
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    for (i, t) in times.iter().enumerate() {
        let expected = times[0] + i as f64 * dt;
        if (t - expected).abs() > UNIFORM_RTOL * t.abs().max(dt) {
            return Err(format!("non-uniform time grid at row {i}: {t} vs expected {expected}"));
        }
    }
    Ok(())
}

/// Train/validation/test fractions, applied in chronological order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(DatasetError::Split(format!("fractions {parts:?} must each lie in (0, 1)")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Split(format!("fractions {parts:?} must sum to 1")));
        }
        Ok(())
    }

    /// Index ranges of the three splits of a length-`total` series:
    /// `floor(train * T)`, `floor(val * T)`, and the remainder.
    pub fn ranges(&self, total: usize) -> Result<[Range<usize>; 3], DatasetError> {
        self.validate()?;
        let count = |f: f64| (f * total as f64 + 1e-9).floor() as usize;
        let n_train = count(self.train);
        let n_val = count(self.val);
        if n_train == 0 || n_val == 0 || n_train + n_val >= total {
            return Err(DatasetError::Split(format!("series of length {total} leaves an empty split under {self:?}")));
        }
        Ok([0..n_train, n_train..n_train + n_val, n_train + n_val..total])
    }
}

pub fn chronological_split(
    series: &TimeSeries,
    spec: &SplitSpec,
) -> Result<(TimeSeries, TimeSeries, TimeSeries), DatasetError> {
    if series.len() < 3 {
        return Err(DatasetError::Split(format!("series of length {} cannot be split", series.len())));
    }
    let [train, val, test] = spec.ranges(series.len())?;
    Ok((series.slice(train), series.slice(val), series.slice(test)))
}

/// Per-channel z-score statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population mean and standard deviation per channel, with the standard
/// deviation floored at [`STD_FLOOR`].
pub fn fit_normalizer(train: &TimeSeries) -> NormalizationStats {
    let n = train.len() as f64;
    let mut mean = Vec::with_capacity(train.channels());
    let mut std = Vec::with_capacity(train.channels());
    for ch in 0..train.channels() {
        let xs = train.channel(ch);
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt().max(STD_FLOOR));
    }
    NormalizationStats { mean, std }
}

impl NormalizationStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_value(&self, ch: usize, x: f64) -> f64 {
        (x - self.mean[ch]) / self.std[ch]
    }

    pub fn denormalize_value(&self, ch: usize, z: f64) -> f64 {
        z * self.std[ch] + self.mean[ch]
    }

    pub fn normalize(&self, series: &TimeSeries) -> TimeSeries {
        let mut out = series.clone();
        for ch in 0..out.channels() {
            out.channel_mut(ch).iter_mut().for_each(|v| *v = self.normalize_value(ch, *v));
        }
        out
    }

    pub fn denormalize(&self, series: &TimeSeries) -> TimeSeries {
        let mut out = series.clone();
        for ch in 0..out.channels() {
            out.channel_mut(ch).iter_mut().for_each(|v| *v = self.denormalize_value(ch, *v));
        }
        out
    }

    /// Normalizes a `channels x len` tensor in place.
    pub fn normalize_tensor(&self, t: &mut Tensor) {
        let cols = t.shape()[1];
        for (ch, row) in t.data_mut().chunks_exact_mut(cols).enumerate() {
            row.iter_mut().for_each(|v| *v = self.normalize_value(ch, *v));
        }
    }

    pub fn denormalize_tensor(&self, t: &mut Tensor) {
        let cols = t.shape()[1];
        for (ch, row) in t.data_mut().chunks_exact_mut(cols).enumerate() {
            row.iter_mut().for_each(|v| *v = self.denormalize_value(ch, *v));
        }
    }
}

/// One supervised example: `context` is immediately followed by `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    /// Index of the first context sample in the source series.
    pub origin: usize,
    pub context: Tensor,
    pub target: Tensor,
}

impl WindowPair {
    /// Index of the first target sample in the source series.
    pub fn target_start(&self) -> usize {
        self.origin + self.context.shape()[1]
    }
}

/// Number of windows `floor((T - H - h) / stride) + 1` for a series of length `total`.
pub fn window_count(total: usize, context: usize, horizon: usize, stride: usize) -> Result<usize, DatasetError> {
    if stride == 0 || context == 0 || horizon == 0 {
        return Err(DatasetError::Split("context, horizon, and stride must be >= 1".into()));
    }
    if total < context + horizon {
        return Err(DatasetError::Split(format!(
            "series of length {total} is shorter than context + horizon = {}",
            context + horizon
        )));
    }
    Ok((total - context - horizon) / stride + 1)
}

pub fn make_windows(
    series: &TimeSeries,
    context: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowPair>, DatasetError> {
    let count = window_count(series.len(), context, horizon, stride)?;
    Ok(par::map_indexed(count, |i| {
        let origin = i * stride;
        WindowPair { origin, context: series.window(origin, context), target: series.window(origin + context, horizon) }
    }))
}

/// Writes `t,<ch1>,<ch2>,...` followed by one row per sample.
pub fn write_csv(series: &TimeSeries, path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "t")?;
    for name in series.names() {
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    for i in 0..series.len() {
        write!(w, "{:?}", series.times[i])?;
        for ch in 0..series.channels() {
            write!(w, ",{:?}", series.value(ch, i))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<TimeSeries, DatasetError> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(true).flexible(false).from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() < 2 || &headers[0] != "t" {
        return Err(DatasetError::Format(format!(
            "{}: header must start with `t,` followed by channel names",
            path.display()
        )));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    if names.iter().any(|n| n.is_empty()) {
        return Err(DatasetError::Format(format!("{}: empty channel name in header", path.display())));
    }
    let mut times = Vec::new();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let parse = |col: usize| -> Result<f64, DatasetError> {
            let cell = &record[col];
            cell.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                DatasetError::Format(format!(
                    "{}: row {} column {}: `{cell}` is not a finite number",
                    path.display(),
                    line + 2,
                    col + 1
                ))
            })
        };
        times.push(parse(0)?);
        for (ch, row) in rows.iter_mut().enumerate() {
            row.push(parse(ch + 1)?);
        }
    }
    if times.is_empty() {
        return Err(DatasetError::Format(format!("{}: no data rows", path.display())));
    }
    check_uniform(&times).map_err(|m| DatasetError::Format(format!("{}: {m}", path.display())))?;
    TimeSeries::from_channel_major(times, rows.concat(), names)
}

fn csv_error(path: &Path, e: csv::Error) -> DatasetError {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => DatasetError::Io(io),
            _ => unreachable!(),
        },
        _ => DatasetError::Format(format!("{}: {e}", path.display())),
    }
}

/// Sidecar describing how a dataset was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMetadata {
    pub generator: String,
    pub generator_version: String,
    pub scenario: String,
    pub rate_constants: RateConstants,
    pub y0: [f64; 3],
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
    pub rtol: f64,
    pub atol: f64,
    pub method: String,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub samples: usize,
}

/// `data.csv` -> `data.meta.json`.
pub fn metadata_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.meta.json"))
}

pub fn write_metadata(meta: &DatasetMetadata, path: &Path) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(meta).map_err(|e| DatasetError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_metadata(path: &Path) -> Result<DatasetMetadata, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Format(format!("{}: {e}", path.display())))
}
