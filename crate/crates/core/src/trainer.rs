//! AdamW training loop with best-validation model selection and a portable
//! JSON checkpoint format.

use std::path::Path;

use base64::Engine;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{NormalizationStats, WindowPair};
use crate::mixer::{self, Mode, ModelConfig, ModelError, Parameters};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "kinmix-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Windows per gradient chunk. Chunks are summed in order, so the reduction
/// tree does not depend on the number of worker threads.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; cosine-decayed to `min_learning_rate` over all steps.
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if !(self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate.max(0.0)) {
            return fail(format!("min_learning_rate {} must lie in [0, learning_rate]", self.min_learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} {b} not in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be > 0".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be >= 0".into());
        }
        Ok(())
    }

    /// Cosine schedule from `learning_rate` (step 0) towards `min_learning_rate`.
    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps <= 1 {
            return self.learning_rate;
        }
        let progress = step as f64 / (total_steps - 1) as f64;
        self.min_learning_rate
            + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Hyperparameters of one AdamW update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(config: &TrainConfig, learning_rate: f64) -> Self {
        AdamW {
            learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            weight_decay: config.weight_decay,
        }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Parameters,
    pub v: Parameters,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: &ModelConfig) -> Self {
        OptimizerState { m: Parameters::zeros(config), v: Parameters::zeros(config), step: 0 }
    }
}

/// AdamW on flat slices at 1-based step `step`; weight decay is applied
/// only when `decay` is set.
pub fn adamw_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, hp: &AdamW, decay: bool) {
    debug_assert!(step >= 1);
    let bc1 = 1.0 - hp.beta1.powf(step as f64);
    let bc2 = 1.0 - hp.beta2.powf(step as f64);
    let wd = if decay { hp.weight_decay } else { 0.0 };
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let old = theta[i];
        theta[i] = old - hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon) - hp.learning_rate * wd * old;
    }
}

/// One AdamW step over every parameter tensor. Biases and layer-norm
/// parameters are excluded from weight decay.
pub fn adamw_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut OptimizerState,
    hp: &AdamW,
) -> Result<(), TrainError> {
    let grad_named = grads.named();
    let kinds: Vec<_> = params.named().iter().map(|(n, k, t)| (n.clone(), *k, t.shape().to_vec())).collect();
    if grad_named.len() != kinds.len()
        || grad_named.iter().zip(&kinds).any(|((_, _, g), (_, _, s))| g.shape() != s.as_slice())
    {
        return Err(TrainError::Shape("gradients do not match parameter shapes".into()));
    }
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    if m.len() != kinds.len() || m.iter().zip(&kinds).any(|(t, (_, _, s))| t.shape() != s.as_slice()) {
        return Err(TrainError::Shape("optimizer state does not match parameter shapes".into()));
    }
    state.step += 1;
    let step = state.step;
    for ((((theta, (_, _, g)), m), v), (_, kind, _)) in
        params.tensors_mut().into_iter().zip(grad_named).zip(m).zip(v).zip(&kinds)
    {
        adamw_update(theta.data_mut(), g.data(), m.data_mut(), v.data_mut(), step, hp, kind.decays());
    }
    Ok(())
}

/// Mean loss and mean gradient over `batch`.
pub struct BatchGradient {
    pub loss: f64,
    pub grads: Parameters,
}

fn dropout_seed(seed: u64, step: u64, position: usize) -> u64 {
    // SplitMix64 finalizer over the combined key.
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (position as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Forward + backward over a mini-batch, run as fixed chunks of windows.
/// Dropout masks depend only on `(seed, step, chunk index)`.
pub fn batch_gradient(
    params: &Parameters,
    config: &ModelConfig,
    batch: &[&WindowPair],
    train_mode: bool,
    seed: u64,
    step: u64,
    exec: Execution,
) -> Result<BatchGradient, ModelError> {
    let chunks = batch.len().div_ceil(GRAD_CHUNK);
    let per_sample = config.channels * config.horizon;
    let partial = par::map_indexed_with(exec, chunks, |ci| -> Result<(f64, Parameters), ModelError> {
        let chunk = &batch[ci * GRAD_CHUNK..((ci + 1) * GRAD_CHUNK).min(batch.len())];
        let contexts: Vec<&Tensor> = chunk.iter().map(|w| &w.context).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed(seed, step, ci));
        let mode = if train_mode { Mode::Train(&mut rng) } else { Mode::Eval };
        let (pred, trace) = mixer::forward_batch(params, config, &contexts, mode)?;
        let mut loss = 0.0;
        let mut d_pred = Vec::with_capacity(pred.len());
        for (w, p) in chunk.iter().zip(pred.data().chunks_exact(per_sample)) {
            if w.target.len() != per_sample {
                return Err(ModelError::Shape(format!(
                    "target {:?} does not match horizon output [{}, {}]",
                    w.target.shape(),
                    config.channels,
                    config.horizon
                )));
            }
            let mut sq = 0.0;
            for (p, t) in p.iter().zip(w.target.data()) {
                sq += (p - t) * (p - t);
                d_pred.push(2.0 * (p - t) / per_sample as f64);
            }
            loss += sq / per_sample as f64;
        }
        let d_pred = Tensor::from_vec(pred.shape(), d_pred).expect("gradient shape");
        let mut grads = Parameters::zeros(config);
        mixer::backward_into(params, trace, &d_pred, &mut grads)?;
        Ok((loss, grads))
    });
    let mut total = Parameters::zeros(config);
    let mut loss = 0.0;
    for p in partial {
        let (l, g) = p?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok(BatchGradient { loss: loss * inv, grads: total })
}

/// Mean evaluation-mode MSE over `windows`.
pub fn evaluate_loss(
    params: &Parameters,
    config: &ModelConfig,
    windows: &[WindowPair],
    exec: Execution,
) -> Result<f64, ModelError> {
    let chunks = windows.len().div_ceil(GRAD_CHUNK);
    let per_sample = config.channels * config.horizon;
    let losses = par::map_indexed_with(exec, chunks, |ci| -> Result<f64, ModelError> {
        let chunk = &windows[ci * GRAD_CHUNK..((ci + 1) * GRAD_CHUNK).min(windows.len())];
        let contexts: Vec<&Tensor> = chunk.iter().map(|w| &w.context).collect();
        let pred = mixer::predict_batch(params, config, &contexts)?;
        let mut sum = 0.0;
        for (w, p) in chunk.iter().zip(pred.data().chunks_exact(per_sample)) {
            let t = Tensor::from_vec(&[config.channels, config.horizon], p.to_vec()).expect("sample shape");
            sum += mixer::mse_loss(&t, &w.target)?;
        }
        Ok(sum)
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / windows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Channel names and sampling interval of the data a model was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSignature {
    pub channels: Vec<String>,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: Parameters,
    pub normalization: NormalizationStats,
    pub train: TrainConfig,
    pub data: DataSignature,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters are stored (1-based; 0 means untrained).
    pub epoch: usize,
}

impl Checkpoint {
    /// Validation loss of the stored parameters, if they came from a recorded epoch.
    pub fn val_loss(&self) -> Option<f64> {
        self.history.iter().find(|r| r.epoch == self.epoch).map(|r| r.val_loss)
    }
}

pub struct FitOutcome {
    /// Parameters with the lowest validation loss.
    pub best: Checkpoint,
    /// Parameters after the final epoch.
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Per-epoch progress callback: `(record, is_new_best)`.
pub type Progress<'a> = &'a mut dyn FnMut(&EpochRecord, bool);

#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &ModelConfig,
    params: Parameters,
    train: &[WindowPair],
    val: &[WindowPair],
    normalization: &NormalizationStats,
    data: &DataSignature,
    config: &TrainConfig,
    progress: Option<Progress<'_>>,
) -> Result<FitOutcome, TrainError> {
    fit_with(model, params, train, val, normalization, data, config, progress, Execution::default())
}

#[allow(clippy::too_many_arguments)]
pub fn fit_with(
    model: &ModelConfig,
    mut params: Parameters,
    train: &[WindowPair],
    val: &[WindowPair],
    normalization: &NormalizationStats,
    data: &DataSignature,
    config: &TrainConfig,
    mut progress: Option<Progress<'_>>,
    exec: Execution,
) -> Result<FitOutcome, TrainError> {
    config.validate()?;
    model.validate()?;
    params.check_shapes(model)?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("training and validation window sets must be nonempty".into()));
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut state = OptimizerState::new(model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Parameters)> = None;

    for epoch in 1..=config.epochs {
        if config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
            order.sort_unstable();
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<&WindowPair> = batch_idx.iter().map(|&i| &train[i]).collect();
            let lr = config.learning_rate_at(state.step as usize, total_steps);
            let bg = batch_gradient(&params, model, &batch, true, config.seed, state.step, exec)
                .map_err(|e| non_finite_in(e, epoch))?;
            if !bg.loss.is_finite() {
                return Err(TrainError::NonFinite { epoch });
            }
            loss_sum += bg.loss * batch.len() as f64;
            adamw_step(&mut params, &bg.grads, &mut state, &AdamW::from_config(config, lr))?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = evaluate_loss(&params, model, val, exec).map_err(|e| non_finite_in(e, epoch))?;
        if !val_loss.is_finite() || !params.is_finite() {
            return Err(TrainError::NonFinite { epoch });
        }
        let record = EpochRecord { epoch, train_loss, val_loss };
        history.push(record);
        let improved = best.as_ref().is_none_or(|(_, v, _)| val_loss < *v);
        if improved {
            best = Some((epoch, val_loss, params.clone()));
        }
        if let Some(cb) = progress.as_mut() {
            cb(&record, improved);
        }
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    let make = |params: Parameters, epoch: usize| Checkpoint {
        model: *model,
        params,
        normalization: normalization.clone(),
        train: *config,
        data: data.clone(),
        history: history.clone(),
        epoch,
    };
    Ok(FitOutcome { best: make(best_params, best_epoch), last: make(params, config.epochs), history: history.clone() })
}

fn non_finite_in(e: ModelError, epoch: usize) -> TrainError {
    match e {
        ModelError::NonFinite(_) => TrainError::NonFinite { epoch },
        other => TrainError::Model(other),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredArray {
    name: String,
    shape: Vec<usize>,
    /// Base64 of little-endian IEEE-754 doubles.
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredCheckpoint {
    format: String,
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    data: DataSignature,
    normalization: NormalizationStats,
    epoch: usize,
    history: Vec<EpochRecord>,
    parameters: Vec<StoredArray>,
}

fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f64s(name: &str, text: &str) -> Result<Vec<f64>, TrainError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| TrainError::Format(format!("array `{name}`: invalid base64 ({e})")))?;
    if bytes.len() % 8 != 0 {
        return Err(TrainError::Format(format!("array `{name}`: byte length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Serializes a checkpoint to its JSON text.
pub fn checkpoint_to_string(ckpt: &Checkpoint) -> String {
    let stored = StoredCheckpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: ckpt.model,
        train: ckpt.train,
        data: ckpt.data.clone(),
        normalization: ckpt.normalization.clone(),
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        parameters: ckpt
            .params
            .named()
            .into_iter()
            .map(|(name, _, t)| StoredArray { name, shape: t.shape().to_vec(), data: encode_f64s(t.data()) })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&stored).expect("checkpoint serializes");
    text.push('\n');
    text
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint, TrainError> {
    let stored: StoredCheckpoint =
        serde_json::from_str(text).map_err(|e| TrainError::Format(format!("invalid checkpoint JSON: {e}")))?;
    if stored.format != CHECKPOINT_FORMAT {
        return Err(TrainError::Format(format!("unknown format `{}`", stored.format)));
    }
    if stored.version != CHECKPOINT_VERSION {
        return Err(TrainError::Format(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            stored.version
        )));
    }
    stored.model.validate().map_err(|e| TrainError::Format(e.to_string()))?;
    let mut params = Parameters::zeros(&stored.model);
    let expected: Vec<(String, Vec<usize>)> =
        params.named().into_iter().map(|(n, _, t)| (n, t.shape().to_vec())).collect();
    if stored.parameters.len() != expected.len() {
        return Err(TrainError::Format(format!(
            "{} parameter arrays stored, config requires {}",
            stored.parameters.len(),
            expected.len()
        )));
    }
    for ((slot, (name, shape)), array) in params.tensors_mut().into_iter().zip(&expected).zip(&stored.parameters) {
        if &array.name != name {
            return Err(TrainError::Format(format!("expected array `{name}`, found `{}`", array.name)));
        }
        if &array.shape != shape {
            return Err(TrainError::Format(format!(
                "array `{name}` has shape {:?}, config requires {shape:?}",
                array.shape
            )));
        }
        let values = decode_f64s(name, &array.data)?;
        if values.len() != slot.len() {
            return Err(TrainError::Format(format!(
                "array `{name}` holds {} values, config requires {}",
                values.len(),
                slot.len()
            )));
        }
        *slot = Tensor::from_vec(shape, values).expect("checked length");
    }
    if stored.normalization.channels() != stored.model.channels
        || stored.normalization.std.len() != stored.model.channels
    {
        return Err(TrainError::Format("normalization statistics do not match the channel count".into()));
    }
    if stored.data.channels.len() != stored.model.channels {
        return Err(TrainError::Format("data signature does not match the channel count".into()));
    }
    Ok(Checkpoint {
        model: stored.model,
        params,
        normalization: stored.normalization,
        train: stored.train,
        data: stored.data,
        history: stored.history,
        epoch: stored.epoch,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, checkpoint_to_string(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let text = std::fs::read_to_string(path)?;
    checkpoint_from_str(&text).map_err(|e| match e {
        TrainError::Format(m) => TrainError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// `epoch,train_loss,val_loss` rows.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        out.push_str(&format!("{},{:?},{:?}\n", r.epoch, r.train_loss, r.val_loss));
    }
    out
}
