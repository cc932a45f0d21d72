//! Experiment configuration and the generate / train / evaluate steps shared
//! by the command-line tool and the test suites.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{
    self, fit_normalizer, make_windows, DatasetError, DatasetMetadata, NormalizationStats, SplitSpec, TimeSeries,
    WindowPair,
};
use crate::forecast::{self, EvalError, ForecastMode, ForecastOutcome, MixerForecaster};
use crate::integrator::{self, IntegrateError, SamplingSpec, StepControl, ToleranceSpec};
use crate::kinetics::{RateConstants, Rober, StateVector};
use crate::mixer::{self, ModelConfig, ModelError};
use crate::trainer::{self, Checkpoint, DataSignature, FitOutcome, Progress, TrainConfig, TrainError};

pub const CHANNEL_NAMES: [&str; 3] = ["y1", "y2", "y3"];

/// Named initial states. `paper-main`'s third component is printed with a
/// decimal comma in its source and is read as 0.081.
pub const PRESETS: [(&str, [f64; 3]); 3] = [
    ("paper-main", [0.776, 6.913e-5, 0.081]),
    ("appendix-b1", [0.879, 7.816e-5, 0.077]),
    ("appendix-b2", [0.693, 4.254e-5, 0.390]),
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("incompatible {field}: {detail}")]
    Incompatible { field: String, detail: String },
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    fn config(path: &str, message: impl Into<String>) -> Self {
        PipelineError::Config { path: path.into(), message: message.into() }
    }

    /// Process exit code: 1 validation, 2 numerical failure, 3 I/O or file format.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } | PipelineError::Incompatible { .. } => 1,
            PipelineError::Integrate(IntegrateError::InvalidInput(_) | IntegrateError::Range { .. }) => 1,
            PipelineError::Integrate(_) => 2,
            PipelineError::Dataset(DatasetError::Io(_) | DatasetError::Format(_)) => 3,
            PipelineError::Dataset(_) => 1,
            PipelineError::Train(TrainError::NonFinite { .. }) => 2,
            PipelineError::Train(TrainError::Model(ModelError::NonFinite(_))) => 2,
            PipelineError::Train(TrainError::Io(_) | TrainError::Format(_)) => 3,
            PipelineError::Train(_) => 1,
            PipelineError::Eval(EvalError::Model(ModelError::NonFinite(_))) => 2,
            PipelineError::Eval(EvalError::Io(_) | EvalError::Format(_)) => 3,
            PipelineError::Eval(_) => 1,
            PipelineError::Io(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticsConfig {
    /// Preset name, or `custom`.
    pub scenario: String,
    pub rates: RateConstants,
    pub y0: [f64; 3],
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for KineticsConfig {
    fn default() -> Self {
        KineticsConfig::preset("paper-main").expect("built-in preset")
    }
}

impl KineticsConfig {
    /// One of [`PRESETS`] over `[0, 1e5]` s sampled every second.
    pub fn preset(name: &str) -> Option<Self> {
        let (_, y0) = PRESETS.iter().find(|(n, _)| *n == name)?;
        let tol = ToleranceSpec::default();
        Some(KineticsConfig {
            scenario: name.to_string(),
            rates: RateConstants::ROBERTSON,
            y0: *y0,
            t0: 0.0,
            t_end: 1e5,
            dt: 1.0,
            rtol: tol.rtol,
            atol: tol.atol,
        })
    }

    pub fn tolerances(&self) -> ToleranceSpec {
        ToleranceSpec { rtol: self.rtol, atol: self.atol }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if !self.rates.is_valid() {
            return Err(PipelineError::config("kinetics.rates", "rate constants must be finite and > 0"));
        }
        let y0 = StateVector::from(self.y0);
        if !y0.is_physical() {
            return Err(PipelineError::config("kinetics.y0", format!("{:?} must be finite and >= 0", self.y0)));
        }
        if let Err(e) = ToleranceSpec::new(self.rtol, self.atol) {
            let path = if self.rtol > 0.0 && self.rtol < 1.0 { "kinetics.atol" } else { "kinetics.rtol" };
            return Err(PipelineError::config(path, e.to_string()));
        }
        if let Err(e) = SamplingSpec::new(self.t0, self.t_end, self.dt) {
            return Err(PipelineError::config("kinetics.dt", e.to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub split: SplitSpec,
    /// Stride between consecutive training windows.
    pub window_stride: usize,
    /// Stride between validation windows; `null` means the model horizon.
    pub val_stride: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { split: SplitSpec::default(), window_stride: 1, val_stride: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub modes: Vec<ForecastMode>,
    pub plot: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { modes: vec![ForecastMode::Batchwise, ForecastMode::Dynamic], plot: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kinetics: KineticsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kinetics: KineticsConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/paper-main"),
        }
    }
}

/// How much compute an experiment gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Context 512, horizon 100, patches of 8, 300 epochs on every window.
    Paper,
    /// Same windows and horizon with a smaller network, window stride 25 and
    /// 60 epochs, sized to finish in minutes on one core.
    Desk,
}

impl std::str::FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(format!("unknown scale `{other}` (expected paper or desk)")),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str, scale: Scale) -> Option<Self> {
        let mut config = ExperimentConfig {
            kinetics: KineticsConfig::preset(name)?,
            output_dir: PathBuf::from(format!("runs/{name}")),
            ..ExperimentConfig::default()
        };
        if scale == Scale::Desk {
            config.data.window_stride = 25;
            config.model.embed_dim = 32;
            config.model.blocks = 4;
            config.model.dropout = 0.0;
            config.train.epochs = 60;
            config.train.batch_size = 32;
            config.train.learning_rate = 2e-3;
            config.train.weight_decay = 1e-4;
            config.output_dir = PathBuf::from(format!("runs/{name}-desk"));
        }
        Some(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.kinetics.validate()?;
        self.data.split.validate().map_err(|e| PipelineError::config("data.split", e.to_string()))?;
        if self.data.window_stride == 0 {
            return Err(PipelineError::config("data.window_stride", "must be >= 1"));
        }
        if self.data.val_stride == Some(0) {
            return Err(PipelineError::config("data.val_stride", "must be >= 1"));
        }
        if self.model.channels != CHANNEL_NAMES.len() {
            return Err(PipelineError::config(
                "model.channels",
                format!("ROBER data has {} channels, got {}", CHANNEL_NAMES.len(), self.model.channels),
            ));
        }
        self.model.validate().map_err(|e| PipelineError::config(model_key(&e), e.to_string()))?;
        self.train.validate().map_err(|e| PipelineError::config("train", e.to_string()))?;
        if self.eval.modes.is_empty() {
            return Err(PipelineError::config("eval.modes", "at least one mode is required"));
        }
        Ok(())
    }

    pub fn val_stride(&self) -> usize {
        self.data.val_stride.unwrap_or(self.model.horizon)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            PipelineError::Config { path, message: e.into_inner().to_string() }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    /// Applies `key.path=value` overrides. Values are parsed as JSON, falling
    /// back to a plain string. Unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, PipelineError> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) =
                item.split_once('=').ok_or_else(|| PipelineError::config(item, "override must look like key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut node = &mut tree;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|obj| obj.get_mut(part))
                    .ok_or_else(|| PipelineError::config(key, "unknown key"))?;
            }
            *node = value;
        }
        Self::from_json(&tree.to_string())
    }
}

fn model_key(e: &ModelError) -> &'static str {
    match e {
        ModelError::Shape(_) => "model.patch_stride",
        _ => "model",
    }
}

/// Integrates the configured scenario and samples it on the output grid.
pub fn generate(config: &KineticsConfig) -> Result<(TimeSeries, DatasetMetadata), PipelineError> {
    config.validate()?;
    let system = Rober::new(config.rates);
    let tol = config.tolerances();
    let spec = SamplingSpec::new(config.t0, config.t_end, config.dt)?;
    let control = StepControl { stops: Some(spec), ..StepControl::default() };
    let trajectory = integrator::integrate_stiff_with(&system, &config.y0, (config.t0, config.t_end), &tol, &control)?;
    let names = CHANNEL_NAMES.iter().map(|s| s.to_string()).collect();
    let mut series = integrator::sample(&trajectory, &spec, names)?;
    integrator::clamp_small_negatives(&mut series, config.atol)?;
    let meta = DatasetMetadata {
        generator: env!("CARGO_PKG_NAME").into(),
        generator_version: env!("CARGO_PKG_VERSION").into(),
        scenario: config.scenario.clone(),
        rate_constants: config.rates,
        y0: config.y0,
        t0: config.t0,
        t_end: config.t_end,
        dt: config.dt,
        rtol: config.rtol,
        atol: config.atol,
        method: "rosenbrock-ros4".into(),
        accepted_steps: trajectory.accepted_steps,
        rejected_steps: trajectory.rejected_steps,
        samples: series.len(),
    };
    Ok((series, meta))
}

/// Writes `data.csv` and `data.meta.json` into `dir` and returns the CSV path.
pub fn write_dataset(dir: &Path, series: &TimeSeries, meta: &DatasetMetadata) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("data.csv");
    dataset::write_csv(series, &csv)?;
    dataset::write_metadata(meta, &dataset::metadata_path(&csv))?;
    Ok(csv)
}

/// Writes the resolved config as `config.json` into `dir`.
pub fn write_config_echo(dir: &Path, config: &ExperimentConfig) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), config.to_json())?;
    Ok(())
}

/// Normalized training and validation windows for one experiment.
pub struct Prepared {
    pub normalization: NormalizationStats,
    pub train: Vec<WindowPair>,
    pub val: Vec<WindowPair>,
}

pub fn prepare(series: &TimeSeries, config: &ExperimentConfig) -> Result<Prepared, PipelineError> {
    check_channels(series)?;
    let [train_range, val_range, _] = config.data.split.ranges(series.len())?;
    let normalization = fit_normalizer(&series.slice(train_range.clone()));
    let scaled = normalization.normalize(series);
    let (h_ctx, h) = (config.model.context_len, config.model.horizon);
    let train = make_windows(&scaled.slice(train_range), h_ctx, h, config.data.window_stride)?;
    let val = make_windows(&scaled.slice(val_range), h_ctx, h, config.val_stride())?;
    Ok(Prepared { normalization, train, val })
}

fn check_channels(series: &TimeSeries) -> Result<(), PipelineError> {
    if series.names() != CHANNEL_NAMES {
        return Err(PipelineError::Incompatible {
            field: "channels".into(),
            detail: format!("expected {:?}, data has {:?}", CHANNEL_NAMES, series.names()),
        });
    }
    Ok(())
}

/// Trains from the seeded initialization on the configured splits.
pub fn train(
    series: &TimeSeries,
    config: &ExperimentConfig,
    progress: Option<Progress<'_>>,
) -> Result<FitOutcome, PipelineError> {
    config.validate()?;
    let prepared = prepare(series, config)?;
    let params = mixer::init_params(&config.model, config.train.seed);
    let signature = DataSignature { channels: series.names().to_vec(), dt: series.dt() };
    Ok(trainer::fit(
        &config.model,
        params,
        &prepared.train,
        &prepared.val,
        &prepared.normalization,
        &signature,
        &config.train,
        progress,
    )?)
}

/// Writes `best.ckpt`, `last.ckpt`, and `history.csv` into `dir`.
pub fn write_training(dir: &Path, outcome: &FitOutcome) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    trainer::save_checkpoint(&outcome.best, &dir.join("best.ckpt"))?;
    trainer::save_checkpoint(&outcome.last, &dir.join("last.ckpt"))?;
    std::fs::write(dir.join("history.csv"), trainer::history_csv(&outcome.history))?;
    Ok(())
}

/// Rejects a checkpoint whose channels or sampling interval differ from the data's.
pub fn check_compatible(checkpoint: &Checkpoint, series: &TimeSeries) -> Result<(), PipelineError> {
    if checkpoint.data.channels.len() != series.channels() || checkpoint.model.channels != series.channels() {
        return Err(PipelineError::Incompatible {
            field: "channel count".into(),
            detail: format!("checkpoint has {}, data has {}", checkpoint.model.channels, series.channels()),
        });
    }
    if checkpoint.data.channels != series.names() {
        return Err(PipelineError::Incompatible {
            field: "channel names".into(),
            detail: format!("checkpoint has {:?}, data has {:?}", checkpoint.data.channels, series.names()),
        });
    }
    let (a, b) = (checkpoint.data.dt, series.dt());
    if (a - b).abs() > 1e-9 * a.abs().max(b.abs()) {
        return Err(PipelineError::Incompatible {
            field: "dt".into(),
            detail: format!("checkpoint was trained with dt = {a}, data has dt = {b}"),
        });
    }
    Ok(())
}

/// Runs one extrapolation mode over the test split of `series`.
pub fn evaluate(
    checkpoint: &Checkpoint,
    series: &TimeSeries,
    split: &SplitSpec,
    mode: ForecastMode,
) -> Result<ForecastOutcome, PipelineError> {
    check_compatible(checkpoint, series)?;
    let [_, _, test] = split.ranges(series.len())?;
    let model = MixerForecaster { checkpoint };
    Ok(match mode {
        ForecastMode::Batchwise => forecast::batchwise_forecast(&model, series, test)?,
        ForecastMode::Dynamic => forecast::dynamic_forecast(&model, series, test)?,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `report_<mode>.json`, `report_<mode>.csv`, `forecast_<mode>.csv`
/// and, when `plot` is set, `forecast_<mode>.svg` into `dir`.
pub fn write_evaluation(
    dir: &Path,
    outcome: &ForecastOutcome,
    series: &TimeSeries,
    plot: bool,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    let mode = outcome.report.mode.as_str();
    forecast::export_report(
        &outcome.report,
        &dir.join(format!("report_{mode}.json")),
        &dir.join(format!("report_{mode}.csv")),
    )?;
    let predicted = outcome.forecast_series(series);
    dataset::write_csv(&predicted, &dir.join(format!("forecast_{mode}.csv")))?;
    if plot {
        let first = outcome.report.test_start;
        let truth = series.slice(first..first + predicted.len());
        forecast::plot_series(
            &[("ground truth", &truth), (&format!("{mode} forecast"), &predicted)],
            &format!("{mode} extrapolation over the test region"),
            &dir.join(format!("forecast_{mode}.svg")),
        )?;
    }
    Ok(())
}

/// Requires every series to share the channel names and sampling interval of the first.
pub fn check_plot_inputs(series: &[TimeSeries]) -> Result<(), PipelineError> {
    let Some(first) = series.first() else {
        return Err(PipelineError::config("inputs", "at least one series is required"));
    };
    for s in &series[1..] {
        if s.names() != first.names() {
            return Err(
                DatasetError::Format(format!("channel names {:?} differ from {:?}", s.names(), first.names())).into()
            );
        }
        let (a, b) = (first.dt(), s.dt());
        if (a - b).abs() > 1e-9 * a.abs().max(b.abs()) {
            return Err(DatasetError::Format(format!("dt {b} differs from {a}")).into());
        }
    }
    Ok(())
}
