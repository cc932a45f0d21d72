//! Patch-based MLP-Mixer forecaster with a hand-written reverse pass.
//!
//! Pipeline for one `channels x context_len` input:
//!
//! ```text
//! patchify -> linear patch embedding (p -> d)
//!          -> blocks x [ LN -> MLP across patches    (+ residual)
//!                        LN -> MLP across features   (+ residual)
//!                        LN -> MLP across channels   (+ residual) ]
//!          -> per-channel flatten (N * d) -> linear head -> channels x horizon
//! ```
//!
//! Activations are stored channel-major as `(channels, patches, embed_dim)`.
//! Viewed as a `(channels * patches) x embed_dim` matrix each row is a token;
//! viewed as `channels x (patches * embed_dim)` the channel MLP mixes rows.
//! Every weight matrix is stored `fan_in x fan_out`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{gemm, Mat, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("trace does not match: {0}")]
    TraceMismatch(String),
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub expansion: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// Three channels, context 512, horizon 100, patches of 8.
    fn default() -> Self {
        ModelConfig {
            channels: 3,
            context_len: 512,
            horizon: 100,
            patch_len: 8,
            patch_stride: 8,
            embed_dim: 64,
            blocks: 8,
            expansion: 2,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("channels", self.channels),
            ("context_len", self.context_len),
            ("horizon", self.horizon),
            ("patch_len", self.patch_len),
            ("patch_stride", self.patch_stride),
            ("embed_dim", self.embed_dim),
            ("expansion", self.expansion),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be >= 1")));
        }
        if self.patch_len > self.context_len {
            return Err(ModelError::Config(format!(
                "patch_len {} exceeds context_len {}",
                self.patch_len, self.context_len
            )));
        }
        if !(self.context_len - self.patch_len).is_multiple_of(self.patch_stride) {
            return Err(ModelError::Shape(format!(
                "context_len - patch_len = {} is not divisible by patch_stride {}",
                self.context_len - self.patch_len,
                self.patch_stride
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// `N = (H - p) / s + 1`.
    pub fn num_patches(&self) -> usize {
        (self.context_len - self.patch_len) / self.patch_stride + 1
    }

    fn tokens(&self) -> usize {
        self.channels * self.num_patches()
    }
}

/// What a parameter tensor is, for weight-decay grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormOffset,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_in x fan_out`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn zeros(width: usize, expansion: usize) -> Self {
        Mlp { fc1: Linear::zeros(width, width * expansion), fc2: Linear::zeros(width * expansion, width) }
    }

    fn hidden(&self) -> usize {
        self.fc1.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Tensor,
    pub offset: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerBlock {
    pub patch_norm: LayerNorm,
    pub patch_mlp: Mlp,
    pub feature_norm: LayerNorm,
    pub feature_mlp: Mlp,
    pub channel_norm: LayerNorm,
    pub channel_mlp: Mlp,
}

/// All learnable tensors. The same type doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub embed: Linear,
    pub blocks: Vec<MixerBlock>,
    pub head: Linear,
}

impl Parameters {
    /// Zero-filled parameters (layer-norm scales included) shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let n = config.num_patches();
        let d = config.embed_dim;
        let e = config.expansion;
        let zero_norm = || LayerNorm { scale: Tensor::zeros(&[d]), offset: Tensor::zeros(&[d]) };
        Parameters {
            embed: Linear::zeros(config.patch_len, d),
            blocks: (0..config.blocks)
                .map(|_| MixerBlock {
                    patch_norm: zero_norm(),
                    patch_mlp: Mlp::zeros(n, e),
                    feature_norm: zero_norm(),
                    feature_mlp: Mlp::zeros(d, e),
                    channel_norm: zero_norm(),
                    channel_mlp: Mlp::zeros(config.channels, e),
                })
                .collect(),
            head: Linear::zeros(n * d, config.horizon),
        }
    }

    /// Tensors with their stable names and kinds, in a fixed order.
    pub fn named(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = Vec::new();
        push_linear(&mut out, "embed".into(), &self.embed);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            push_norm(&mut out, format!("{p}.patch_norm"), &b.patch_norm);
            push_mlp(&mut out, format!("{p}.patch_mlp"), &b.patch_mlp);
            push_norm(&mut out, format!("{p}.feature_norm"), &b.feature_norm);
            push_mlp(&mut out, format!("{p}.feature_mlp"), &b.feature_mlp);
            push_norm(&mut out, format!("{p}.channel_norm"), &b.channel_norm);
            push_mlp(&mut out, format!("{p}.channel_mlp"), &b.channel_mlp);
        }
        push_linear(&mut out, "head".into(), &self.head);
        out
    }

    /// Mutable tensors in the same order as [`Parameters::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed.weight, &mut self.embed.bias];
        for b in &mut self.blocks {
            for (norm, mlp) in [
                (&mut b.patch_norm, &mut b.patch_mlp),
                (&mut b.feature_norm, &mut b.feature_mlp),
                (&mut b.channel_norm, &mut b.channel_mlp),
            ] {
                out.push(&mut norm.scale);
                out.push(&mut norm.offset);
                out.push(&mut mlp.fc1.weight);
                out.push(&mut mlp.fc1.bias);
                out.push(&mut mlp.fc2.weight);
                out.push(&mut mlp.fc2.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, _, t)| t.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.tensors_mut().into_iter().for_each(|t| t.fill(value));
    }

    pub fn add_assign(&mut self, other: &Parameters) {
        let theirs = other.named();
        for (mine, (_, _, t)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(factor));
    }

    /// Checks that every tensor has the shape `config` requires.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let expect = Parameters::zeros(config);
        if self.blocks.len() != expect.blocks.len() {
            return Err(ModelError::Shape(format!(
                "{} mixer blocks, config requires {}",
                self.blocks.len(),
                expect.blocks.len()
            )));
        }
        for ((name, _, got), (_, _, want)) in self.named().into_iter().zip(expect.named()) {
            if got.shape() != want.shape() {
                return Err(ModelError::Shape(format!(
                    "{name} has shape {:?}, config requires {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }
}

fn push_linear<'a>(out: &mut Vec<(String, ParamKind, &'a Tensor)>, prefix: String, l: &'a Linear) {
    out.push((format!("{prefix}.weight"), ParamKind::Weight, &l.weight));
    out.push((format!("{prefix}.bias"), ParamKind::Bias, &l.bias));
}

fn push_mlp<'a>(out: &mut Vec<(String, ParamKind, &'a Tensor)>, prefix: String, m: &'a Mlp) {
    push_linear(out, format!("{prefix}.fc1"), &m.fc1);
    push_linear(out, format!("{prefix}.fc2"), &m.fc2);
}

fn push_norm<'a>(out: &mut Vec<(String, ParamKind, &'a Tensor)>, prefix: String, n: &'a LayerNorm) {
    out.push((format!("{prefix}.scale"), ParamKind::NormScale, &n.scale));
    out.push((format!("{prefix}.offset"), ParamKind::NormOffset, &n.offset));
}

/// Glorot-uniform weights, zero biases, unit layer-norm scales.
pub fn init_params(config: &ModelConfig, seed: u64) -> Parameters {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::zeros(config);
    let kinds: Vec<ParamKind> = params.named().iter().map(|(_, k, _)| *k).collect();
    for (t, kind) in params.tensors_mut().into_iter().zip(kinds) {
        match kind {
            ParamKind::Weight => {
                let (fan_in, fan_out) = (t.shape()[0], t.shape()[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
            }
            ParamKind::NormScale => t.fill(1.0),
            ParamKind::Bias | ParamKind::NormOffset => t.fill(0.0),
        }
    }
    params
}

/// Splits a `channels x H` context into `channels x N x p` patches.
pub fn patchify(context: &Tensor, patch_len: usize, stride: usize) -> Result<Tensor, ModelError> {
    if context.shape().len() != 2 {
        return Err(ModelError::Shape(format!("context must be 2-D, got {:?}", context.shape())));
    }
    let (c, h) = (context.shape()[0], context.shape()[1]);
    if patch_len == 0 || stride == 0 || patch_len > h || !(h - patch_len).is_multiple_of(stride) {
        return Err(ModelError::Shape(format!("cannot patch length {h} with patch {patch_len} and stride {stride}")));
    }
    let n = (h - patch_len) / stride + 1;
    let mut data = Vec::with_capacity(c * n * patch_len);
    for ch in 0..c {
        let row = context.row(ch);
        for j in 0..n {
            data.extend_from_slice(&row[j * stride..j * stride + patch_len]);
        }
    }
    Ok(Tensor::from_vec(&[c, n, patch_len], data).expect("patch shape"))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `e^x` for `|x| <= 40`: Cody-Waite reduction by ln 2 and a degree-13
/// Taylor polynomial, within 3e-16 relative. Branch-free so loops over it
/// vectorize.
#[inline(always)]
fn exp_bounded(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5 * 2^52 rounds to an integer held in the low mantissa bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let shifted = x * std::f64::consts::LOG2_E + SHIFTER;
    let k = shifted - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    p * f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52)
}

/// Writes `gelu_tanh(pre)` into `tanh` and the GELU output into `act`.
#[inline(always)]
fn gelu_kernel(pre: &[f64], tanh: &mut [f64], act: &mut [f64]) {
    for ((x, th), a) in pre.iter().zip(tanh.iter_mut()).zip(act.iter_mut()) {
        let z = GELU_K * (x + 0.044715 * x * x * x);
        // tanh(z) = 1 - 2 / (e^{2z} + 1); |z| > 20 already rounds to +-1.
        let z = z.max(-20.0).min(20.0);
        *th = 1.0 - 2.0 / (exp_bounded(2.0 * z) + 1.0);
        *a = 0.5 * x * (1.0 + *th);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gelu_kernel_avx2(pre: &[f64], tanh: &mut [f64], act: &mut [f64]) {
    gelu_kernel(pre, tanh, act)
}

/// GELU over a slice, vectorized with AVX2 where available. Rust does not
/// contract `a * b + c` into fused operations, so both paths round identically.
fn gelu_slice(pre: &[f64], tanh: &mut [f64], act: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { gelu_kernel_avx2(pre, tanh, act) };
    }
    gelu_kernel(pre, tanh, act)
}

#[cfg(test)]
fn gelu(x: f64) -> f64 {
    let (mut th, mut a) = ([0.0], [0.0]);
    gelu_kernel(&[x], &mut th, &mut a);
    a[0]
}

fn gelu_grad_from(x: f64, th: f64) -> f64 {
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Forward-pass mode. Training mode applies inverted dropout with masks drawn from `rng`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn rand::RngCore),
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct MlpCache {
    norm: NormCache,
    /// Layer-norm output fed to the MLP.
    normed: Vec<f64>,
    /// Hidden pre-activation.
    pre: Vec<f64>,
    /// `gelu_tanh(pre)`.
    tanh: Vec<f64>,
    /// Hidden activation after GELU and dropout.
    act: Vec<f64>,
    /// Inverted-dropout multipliers, absent in evaluation mode.
    mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    patch: MlpCache,
    feature: MlpCache,
    channel: MlpCache,
}

/// Activations cached by [`forward`] for one [`backward`] call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    config: ModelConfig,
    batch: usize,
    patches: Vec<f64>,
    blocks: Vec<BlockCache>,
    /// Block-stack output, `channels x (N * d)`.
    features: Vec<f64>,
}

fn layer_norm_forward(x: &[f64], width: usize, norm: &LayerNorm) -> (Vec<f64>, NormCache) {
    let rows = x.len() / width;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    let (scale, offset) = (norm.scale.data(), norm.offset.data());
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..width {
            let xh = (row[j] - mean) * rs;
            xhat[r * width + j] = xh;
            out[r * width + j] = xh * scale[j] + offset[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

/// Accumulates scale/offset gradients and adds the input gradient into `dx`.
fn layer_norm_backward(
    dout: &[f64],
    width: usize,
    norm: &LayerNorm,
    cache: &NormCache,
    grad: &mut LayerNorm,
    dx: &mut [f64],
) {
    let scale = norm.scale.data();
    let rows = dout.len() / width;
    let mut dxhat = vec![0.0; width];
    for r in 0..rows {
        let go = &dout[r * width..(r + 1) * width];
        let xh = &cache.xhat[r * width..(r + 1) * width];
        {
            let gs = grad.scale.data_mut();
            for j in 0..width {
                gs[j] += go[j] * xh[j];
            }
        }
        {
            let gb = grad.offset.data_mut();
            for j in 0..width {
                gb[j] += go[j];
            }
        }
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..width {
            dxhat[j] = go[j] * scale[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= width as f64;
        mean_dx /= width as f64;
        let rs = cache.rstd[r];
        let dxr = &mut dx[r * width..(r + 1) * width];
        for j in 0..width {
            dxr[j] += rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
}

/// Which axis of a `rows x cols` matrix an MLP mixes.
#[derive(Clone, Copy)]
enum MixAxis {
    /// Mix along each row (each row is a token of `cols` features).
    Rows,
    /// Mix down each column (the MLP width equals `rows`).
    Cols,
}

fn bias_add(out: &mut [f64], bias: &[f64], rows: usize, cols: usize, axis: MixAxis) {
    match axis {
        MixAxis::Rows => {
            for r in 0..rows {
                out[r * cols..(r + 1) * cols].iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        MixAxis::Cols => {
            for (r, b) in bias.iter().enumerate().take(rows) {
                out[r * cols..(r + 1) * cols].iter_mut().for_each(|o| *o += b);
            }
        }
    }
}

fn bias_grad(dout: &[f64], grad: &mut [f64], rows: usize, cols: usize, axis: MixAxis) {
    match axis {
        MixAxis::Rows => {
            for r in 0..rows {
                grad.iter_mut().zip(&dout[r * cols..(r + 1) * cols]).for_each(|(g, d)| *g += d);
            }
        }
        MixAxis::Cols => {
            for (r, g) in grad.iter_mut().enumerate().take(rows) {
                *g += dout[r * cols..(r + 1) * cols].iter().sum::<f64>();
            }
        }
    }
}

/// `y = x W + b` (Rows) or `y = W^T x + b[row]` (Cols) for a `rows x cols` matrix `x`.
/// Returns the output and its `(rows, cols)` shape.
fn linear_forward(lin: &Linear, x: &[f64], rows: usize, cols: usize, axis: MixAxis) -> (Vec<f64>, usize, usize) {
    let (fan_in, fan_out) = (lin.weight.shape()[0], lin.weight.shape()[1]);
    let w = Mat::new(lin.weight.data(), fan_in, fan_out);
    match axis {
        MixAxis::Rows => {
            debug_assert_eq!(cols, fan_in);
            let mut y = vec![0.0; rows * fan_out];
            gemm(1.0, Mat::new(x, rows, cols), w, 0.0, &mut y);
            bias_add(&mut y, lin.bias.data(), rows, fan_out, axis);
            (y, rows, fan_out)
        }
        MixAxis::Cols => {
            debug_assert_eq!(rows, fan_in);
            let mut y = vec![0.0; fan_out * cols];
            gemm(1.0, w.t(), Mat::new(x, rows, cols), 0.0, &mut y);
            bias_add(&mut y, lin.bias.data(), fan_out, cols, axis);
            (y, fan_out, cols)
        }
    }
}

/// Backward of [`linear_forward`]: accumulates weight/bias gradients and, if
/// requested, writes the input gradient (`rows x cols` of the input).
fn linear_backward(
    lin: &Linear,
    x: &[f64],
    rows: usize,
    cols: usize,
    dy: &[f64],
    axis: MixAxis,
    grad: &mut Linear,
    dx: Option<&mut [f64]>,
) {
    let (fan_in, fan_out) = (lin.weight.shape()[0], lin.weight.shape()[1]);
    let w = Mat::new(lin.weight.data(), fan_in, fan_out);
    match axis {
        MixAxis::Rows => {
            let dym = Mat::new(dy, rows, fan_out);
            gemm(1.0, Mat::new(x, rows, cols).t(), dym, 1.0, grad.weight.data_mut());
            bias_grad(dy, grad.bias.data_mut(), rows, fan_out, axis);
            if let Some(dx) = dx {
                gemm(1.0, dym, w.t(), 0.0, dx);
            }
        }
        MixAxis::Cols => {
            let dym = Mat::new(dy, fan_out, cols);
            gemm(1.0, Mat::new(x, rows, cols), dym.t(), 1.0, grad.weight.data_mut());
            bias_grad(dy, grad.bias.data_mut(), fan_out, cols, axis);
            if let Some(dx) = dx {
                gemm(1.0, w, dym, 0.0, dx);
            }
        }
    }
}

/// `(groups, rows, cols)` -> `(rows, groups * cols)`.
fn group_to_wide(x: &[f64], groups: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for g in 0..groups {
        for r in 0..rows {
            let src = (g * rows + r) * cols;
            let dst = (r * groups + g) * cols;
            out[dst..dst + cols].copy_from_slice(&x[src..src + cols]);
        }
    }
    out
}

/// Inverse of [`group_to_wide`], written into `out`.
fn wide_to_group(wide: &[f64], groups: usize, rows: usize, cols: usize, out: &mut [f64]) {
    for g in 0..groups {
        for r in 0..rows {
            let dst = (g * rows + r) * cols;
            let src = (r * groups + g) * cols;
            out[dst..dst + cols].copy_from_slice(&wide[src..src + cols]);
        }
    }
}

/// Pre-norm residual MLP applied to `x` in place, over `groups` stacked
/// `rows x cols` matrices.
#[allow(clippy::too_many_arguments)]
fn mixer_forward(
    x: &mut [f64],
    width_for_norm: usize,
    norm: &LayerNorm,
    mlp: &Mlp,
    groups: usize,
    rows: usize,
    cols: usize,
    axis: MixAxis,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> MlpCache {
    if let (MixAxis::Cols, true) = (axis, groups > 1) {
        // Lay the groups side by side so one wide product replaces `groups`
        // small ones. Layer norm acts on contiguous tokens, which the
        // permutation keeps intact.
        let mut wide = group_to_wide(x, groups, rows, cols);
        let cache = mixer_forward(&mut wide, width_for_norm, norm, mlp, 1, rows, groups * cols, axis, dropout, mode);
        wide_to_group(&wide, groups, rows, cols, x);
        return cache;
    }
    let (normed, norm_cache) = layer_norm_forward(x, width_for_norm, norm);
    let hidden = mlp.hidden();
    let per_group_hidden = match axis {
        MixAxis::Rows => rows * hidden,
        MixAxis::Cols => hidden * cols,
    };
    let mut pre = Vec::with_capacity(groups * per_group_hidden);
    let group_len = rows * cols;
    for g in 0..groups {
        let (h, _, _) = linear_forward(&mlp.fc1, &normed[g * group_len..(g + 1) * group_len], rows, cols, axis);
        pre.extend_from_slice(&h);
    }
    let mut tanh = vec![0.0; pre.len()];
    let mut act = vec![0.0; pre.len()];
    gelu_slice(&pre, &mut tanh, &mut act);
    let mask = match mode {
        Mode::Train(rng) if dropout > 0.0 => {
            let keep = 1.0 / (1.0 - dropout);
            let m: Vec<f64> = (0..act.len()).map(|_| if rng.gen::<f64>() < dropout { 0.0 } else { keep }).collect();
            act.iter_mut().zip(&m).for_each(|(a, k)| *a *= k);
            Some(m)
        }
        _ => None,
    };
    let (h_rows, h_cols) = match axis {
        MixAxis::Rows => (rows, hidden),
        MixAxis::Cols => (hidden, cols),
    };
    for g in 0..groups {
        let (y, _, _) =
            linear_forward(&mlp.fc2, &act[g * per_group_hidden..(g + 1) * per_group_hidden], h_rows, h_cols, axis);
        x[g * group_len..(g + 1) * group_len].iter_mut().zip(&y).for_each(|(a, b)| *a += b);
    }
    MlpCache { norm: norm_cache, normed, pre, tanh, act, mask }
}

/// Backward of [`mixer_forward`]. `dx` holds the gradient w.r.t. the block
/// output on entry and w.r.t. the block input on exit.
#[allow(clippy::too_many_arguments)]
fn mixer_backward(
    dx: &mut [f64],
    width_for_norm: usize,
    norm: &LayerNorm,
    mlp: &Mlp,
    cache: &MlpCache,
    groups: usize,
    rows: usize,
    cols: usize,
    axis: MixAxis,
    grad_norm: &mut LayerNorm,
    grad_mlp: &mut Mlp,
) {
    if let (MixAxis::Cols, true) = (axis, groups > 1) {
        let mut wide = group_to_wide(dx, groups, rows, cols);
        mixer_backward(&mut wide, width_for_norm, norm, mlp, cache, 1, rows, groups * cols, axis, grad_norm, grad_mlp);
        wide_to_group(&wide, groups, rows, cols, dx);
        return;
    }
    let hidden = mlp.hidden();
    let (h_rows, h_cols) = match axis {
        MixAxis::Rows => (rows, hidden),
        MixAxis::Cols => (hidden, cols),
    };
    let hlen = h_rows * h_cols;
    let glen = rows * cols;
    let mut dact = vec![0.0; groups * hlen];
    for g in 0..groups {
        linear_backward(
            &mlp.fc2,
            &cache.act[g * hlen..(g + 1) * hlen],
            h_rows,
            h_cols,
            &dx[g * glen..(g + 1) * glen],
            axis,
            &mut grad_mlp.fc2,
            Some(&mut dact[g * hlen..(g + 1) * hlen]),
        );
    }
    if let Some(mask) = &cache.mask {
        dact.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
    }
    for ((d, x), th) in dact.iter_mut().zip(&cache.pre).zip(&cache.tanh) {
        *d *= gelu_grad_from(*x, *th);
    }
    let mut dnormed = vec![0.0; groups * glen];
    for g in 0..groups {
        linear_backward(
            &mlp.fc1,
            &cache.normed[g * glen..(g + 1) * glen],
            rows,
            cols,
            &dact[g * hlen..(g + 1) * hlen],
            axis,
            &mut grad_mlp.fc1,
            Some(&mut dnormed[g * glen..(g + 1) * glen]),
        );
    }
    // Residual: dx already carries the identity path; add the norm path.
    layer_norm_backward(&dnormed, width_for_norm, norm, &cache.norm, grad_norm, dx);
}

fn check_input(params: &Parameters, config: &ModelConfig, context: &Tensor) -> Result<(), ModelError> {
    config.validate()?;
    if context.shape() != [config.channels, config.context_len] {
        return Err(ModelError::Shape(format!(
            "context has shape {:?}, expected [{}, {}]",
            context.shape(),
            config.channels,
            config.context_len
        )));
    }
    if params.blocks.len() != config.blocks
        || params.embed.weight.shape() != [config.patch_len, config.embed_dim]
        || params.head.weight.shape() != [config.num_patches() * config.embed_dim, config.horizon]
    {
        return params.check_shapes(config);
    }
    Ok(())
}

/// Runs the network on one `channels x context_len` input and returns the
/// `channels x horizon` prediction with the trace needed by [`backward`].
pub fn forward(
    params: &Parameters,
    config: &ModelConfig,
    context: &Tensor,
    mode: Mode<'_>,
) -> Result<(Tensor, ForwardTrace), ModelError> {
    let (pred, trace) = forward_batch(params, config, &[context], mode)?;
    let pred = Tensor::from_vec(&[config.channels, config.horizon], pred.into_data()).expect("head shape");
    Ok((pred, trace))
}

/// Runs the network on a batch of contexts at once and returns a
/// `batch x channels x horizon` prediction. Each sample's output equals
/// [`forward`] on that sample alone, up to floating-point reassociation
/// inside the matrix products; dropout masks are drawn across the batch.
pub fn forward_batch(
    params: &Parameters,
    config: &ModelConfig,
    contexts: &[&Tensor],
    mut mode: Mode<'_>,
) -> Result<(Tensor, ForwardTrace), ModelError> {
    if contexts.is_empty() {
        return Err(ModelError::Shape("empty batch".into()));
    }
    for context in contexts {
        check_input(params, config, context)?;
    }
    let batch = contexts.len();
    let c = config.channels;
    let n = config.num_patches();
    let d = config.embed_dim;
    let tokens = batch * config.tokens();

    let mut patches = Vec::with_capacity(tokens * config.patch_len);
    for context in contexts {
        patches.extend_from_slice(patchify(context, config.patch_len, config.patch_stride)?.data());
    }
    let (mut x, _, _) = linear_forward(&params.embed, &patches, tokens, config.patch_len, MixAxis::Rows);

    let mut blocks = Vec::with_capacity(config.blocks);
    for block in &params.blocks {
        let patch = mixer_forward(
            &mut x,
            d,
            &block.patch_norm,
            &block.patch_mlp,
            batch * c,
            n,
            d,
            MixAxis::Cols,
            config.dropout,
            &mut mode,
        );
        let feature = mixer_forward(
            &mut x,
            d,
            &block.feature_norm,
            &block.feature_mlp,
            1,
            tokens,
            d,
            MixAxis::Rows,
            config.dropout,
            &mut mode,
        );
        let channel = mixer_forward(
            &mut x,
            d,
            &block.channel_norm,
            &block.channel_mlp,
            batch,
            c,
            n * d,
            MixAxis::Cols,
            config.dropout,
            &mut mode,
        );
        blocks.push(BlockCache { patch, feature, channel });
    }

    let (y, _, _) = linear_forward(&params.head, &x, batch * c, n * d, MixAxis::Rows);
    let prediction = Tensor::from_vec(&[batch, c, config.horizon], y).expect("head shape");
    if !prediction.is_finite() {
        return Err(ModelError::NonFinite("forward output".into()));
    }
    Ok((prediction, ForwardTrace { config: *config, batch, patches, blocks, features: x }))
}

/// Reverse pass: returns `d loss / d parameter` for every parameter given
/// `d loss / d prediction`.
pub fn backward(params: &Parameters, trace: ForwardTrace, d_pred: &Tensor) -> Result<Parameters, ModelError> {
    let mut grads = Parameters::zeros(&trace.config);
    backward_into(params, trace, d_pred, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but adds the gradients into `grads`.
pub fn backward_into(
    params: &Parameters,
    trace: ForwardTrace,
    d_pred: &Tensor,
    grads: &mut Parameters,
) -> Result<(), ModelError> {
    let config = trace.config;
    let batch = trace.batch;
    let shape_ok = d_pred.shape() == [batch, config.channels, config.horizon]
        || (batch == 1 && d_pred.shape() == [config.channels, config.horizon]);
    if !shape_ok {
        return Err(ModelError::TraceMismatch(format!(
            "upstream gradient shape {:?} does not match trace output [{batch}, {}, {}]",
            d_pred.shape(),
            config.channels,
            config.horizon
        )));
    }
    if trace.blocks.len() != params.blocks.len() || params.check_shapes(&config).is_err() {
        return Err(ModelError::TraceMismatch("parameters do not match the traced configuration".into()));
    }
    if grads.check_shapes(&config).is_err() {
        return Err(ModelError::TraceMismatch("gradient buffer does not match the traced configuration".into()));
    }
    let c = config.channels;
    let n = config.num_patches();
    let d = config.embed_dim;
    let tokens = batch * config.tokens();

    let mut dx = vec![0.0; tokens * d];
    linear_backward(
        &params.head,
        &trace.features,
        batch * c,
        n * d,
        d_pred.data(),
        MixAxis::Rows,
        &mut grads.head,
        Some(&mut dx),
    );

    for ((block, cache), gblock) in params.blocks.iter().zip(&trace.blocks).zip(grads.blocks.iter_mut()).rev() {
        mixer_backward(
            &mut dx,
            d,
            &block.channel_norm,
            &block.channel_mlp,
            &cache.channel,
            batch,
            c,
            n * d,
            MixAxis::Cols,
            &mut gblock.channel_norm,
            &mut gblock.channel_mlp,
        );
        mixer_backward(
            &mut dx,
            d,
            &block.feature_norm,
            &block.feature_mlp,
            &cache.feature,
            1,
            tokens,
            d,
            MixAxis::Rows,
            &mut gblock.feature_norm,
            &mut gblock.feature_mlp,
        );
        mixer_backward(
            &mut dx,
            d,
            &block.patch_norm,
            &block.patch_mlp,
            &cache.patch,
            batch * c,
            n,
            d,
            MixAxis::Cols,
            &mut gblock.patch_norm,
            &mut gblock.patch_mlp,
        );
    }

    linear_backward(
        &params.embed,
        &trace.patches,
        tokens,
        config.patch_len,
        &dx,
        MixAxis::Rows,
        &mut grads.embed,
        None,
    );
    Ok(())
}

/// Mean squared error over all entries.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64, ModelError> {
    if pred.shape() != target.shape() {
        return Err(ModelError::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let n = pred.len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Gradient of [`mse_loss`] with respect to `pred`.
pub fn mse_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor, ModelError> {
    if pred.shape() != target.shape() {
        return Err(ModelError::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let scale = 2.0 / pred.len() as f64;
    let data = pred.data().iter().zip(target.data()).map(|(p, t)| scale * (p - t)).collect();
    Ok(Tensor::from_vec(pred.shape(), data).expect("same shape"))
}

/// Evaluation-mode prediction without keeping the trace.
pub fn predict(params: &Parameters, config: &ModelConfig, context: &Tensor) -> Result<Tensor, ModelError> {
    forward(params, config, context, Mode::Eval).map(|(p, _)| p)
}

/// Evaluation-mode prediction for a batch; returns `batch x channels x horizon`.
pub fn predict_batch(params: &Parameters, config: &ModelConfig, contexts: &[&Tensor]) -> Result<Tensor, ModelError> {
    forward_batch(params, config, contexts, Mode::Eval).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 2,
            context_len: 8,
            horizon: 2,
            patch_len: 4,
            patch_stride: 4,
            embed_dim: 3,
            blocks: 1,
            expansion: 2,
            dropout: 0.0,
        }
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Perturb every parameter so biases, offsets, and scales are non-trivial.
    fn perturbed(config: &ModelConfig, seed: u64) -> Parameters {
        let mut p = init_params(config, seed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        p
    }

    #[test]
    fn gelu_kernel_matches_std_formulas() {
        for i in 0..=80_000 {
            let x = -40.0 + i as f64 * 1e-3;
            let e = x.exp();
            assert!(((exp_bounded(x) - e) / e).abs() < 1e-15, "exp({x})");
        }
        let xs: Vec<f64> = (0..=20_000).map(|i| -10.0 + i as f64 * 1e-3).collect();
        for x in &xs {
            let reference = 0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh());
            assert!((gelu(*x) - reference).abs() < 1e-15 * (1.0 + x.abs()), "gelu({x})");
        }
        assert_eq!(gelu(1e6), 1e6);
        assert_eq!(gelu(-1e6), 0.0);
        // Dispatched and portable kernels agree bit for bit.
        let (mut t1, mut a1) = (vec![0.0; xs.len()], vec![0.0; xs.len()]);
        let (mut t2, mut a2) = (vec![0.0; xs.len()], vec![0.0; xs.len()]);
        gelu_slice(&xs, &mut t1, &mut a1);
        gelu_kernel(&xs, &mut t2, &mut a2);
        assert!(a1.iter().zip(&a2).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(t1.iter().zip(&t2).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn patch_shapes() {
        let ctx = random_tensor(&[3, 512], 1);
        let p = patchify(&ctx, 8, 8).unwrap();
        assert_eq!(p.shape(), &[3, 64, 8]);
        assert_eq!(p.data(), ctx.data());
        let whole = patchify(&ctx, 512, 3).unwrap();
        assert_eq!(whole.shape(), &[3, 1, 512]);
        assert_eq!(whole.data(), ctx.data());
        assert!(matches!(patchify(&ctx, 8, 5), Err(ModelError::Shape(_))));
        let overlap = patchify(&random_tensor(&[1, 8], 2), 4, 2).unwrap();
        assert_eq!(overlap.shape(), &[1, 3, 4]);
        assert_eq!(&overlap.data()[4..8], &random_tensor(&[1, 8], 2).data()[2..6]);
    }

    #[test]
    fn paper_output_shape_and_determinism() {
        let config = ModelConfig { blocks: 1, embed_dim: 8, ..ModelConfig::default() };
        let params = init_params(&config, 3);
        let ctx = random_tensor(&[3, 512], 4);
        let a = predict(&params, &config, &ctx).unwrap();
        let b = predict(&params, &config, &ctx).unwrap();
        assert_eq!(a.shape(), &[3, 100]);
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_params_give_zero_output() {
        let config = tiny();
        let params = Parameters::zeros(&config);
        let out = predict(&params, &config, &random_tensor(&[2, 8], 9)).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mse_examples() {
        let t = random_tensor(&[2, 3], 1);
        assert_eq!(mse_loss(&t, &t).unwrap(), 0.0);
        let mut shifted = t.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 2.0);
        assert!((mse_loss(&shifted, &t).unwrap() - 4.0).abs() < 1e-12);
        let p = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let q = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(mse_loss(&p, &q).unwrap(), 0.5);
        assert!(mse_loss(&p, &t).is_err());
    }

    fn loss_at(params: &Parameters, config: &ModelConfig, ctx: &Tensor, target: &Tensor) -> f64 {
        mse_loss(&predict(params, config, ctx).unwrap(), target).unwrap()
    }

    fn check_gradients(seed: u64) {
        let config = tiny();
        let params = perturbed(&config, seed);
        let ctx = random_tensor(&[2, 8], seed + 100);
        let target = random_tensor(&[2, 2], seed + 200);
        let (pred, trace) = forward(&params, &config, &ctx, Mode::Eval).unwrap();
        let grads = backward(&params, trace, &mse_grad(&pred, &target).unwrap()).unwrap();

        let step = 1e-6;
        let names: Vec<String> = params.named().into_iter().map(|(n, _, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grads.named().into_iter().map(|(_, _, t)| t.data().to_vec()).collect();
        for (ti, name) in names.iter().enumerate() {
            for k in 0..analytic[ti].len() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data_mut()[k] += step;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data_mut()[k] -= step;
                let fd =
                    (loss_at(&plus, &config, &ctx, &target) - loss_at(&minus, &config, &ctx, &target)) / (2.0 * step);
                let a = analytic[ti][k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-5, "seed {seed} {name}[{k}]: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [1, 2, 3] {
            check_gradients(seed);
        }
    }

    #[test]
    fn backward_linearity() {
        let config = tiny();
        let params = perturbed(&config, 5);
        let ctx = random_tensor(&[2, 8], 6);
        let (_, trace) = forward(&params, &config, &ctx, Mode::Eval).unwrap();
        let zero = backward(&params, trace.clone(), &Tensor::zeros(&[2, 2])).unwrap();
        assert!(zero.named().iter().all(|(_, _, t)| t.data().iter().all(|v| *v == 0.0)));
        let up = random_tensor(&[2, 2], 7);
        let mut up2 = up.clone();
        up2.scale(2.0);
        let g1 = backward(&params, trace.clone(), &up).unwrap();
        let g2 = backward(&params, trace.clone(), &up2).unwrap();
        for ((_, _, a), (_, _, b)) in g1.named().into_iter().zip(g2.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-12));
            }
        }
        assert!(matches!(backward(&params, trace, &Tensor::zeros(&[2, 3])), Err(ModelError::TraceMismatch(_))));
    }

    #[test]
    fn init_is_seeded() {
        let config = tiny();
        assert_eq!(init_params(&config, 11), init_params(&config, 11));
        assert_ne!(init_params(&config, 11), init_params(&config, 12));
        let p = init_params(&config, 11);
        for (name, kind, t) in p.named() {
            match kind {
                ParamKind::NormScale => assert!(t.data().iter().all(|v| *v == 1.0), "{name}"),
                ParamKind::Bias | ParamKind::NormOffset => assert!(t.data().iter().all(|v| *v == 0.0)),
                ParamKind::Weight => {
                    let b = (6.0 / (t.shape()[0] + t.shape()[1]) as f64).sqrt();
                    assert!(t.data().iter().all(|v| v.abs() <= b));
                }
            }
        }
    }

    #[test]
    fn paper_parameter_count() {
        // Hand count for c=3, H=512, h=100, p=8, d=64, L=8, e=2 (N = 64):
        //   embedding      8*64 + 64                         =    576
        //   per block      3 norms * (64 + 64)               =    384
        //                  patch MLP 64*128+128 + 128*64+64  = 16_576
        //                  feature MLP (same widths)         = 16_576
        //                  channel MLP 3*6+6 + 6*3+3         =     45
        //                  block total                       = 33_581, x8 = 268_648
        //   head           4096*100 + 100                    = 409_700
        let config = ModelConfig::default();
        assert_eq!(config.num_patches(), 64);
        assert_eq!(init_params(&config, 0).count(), 576 + 268_648 + 409_700);
    }

    #[test]
    fn residual_identity_when_output_layers_zero() {
        let config = ModelConfig { blocks: 2, ..tiny() };
        let mut params = perturbed(&config, 21);
        for b in &mut params.blocks {
            for mlp in [&mut b.patch_mlp, &mut b.feature_mlp, &mut b.channel_mlp] {
                mlp.fc2.weight.fill(0.0);
                mlp.fc2.bias.fill(0.0);
            }
        }
        let ctx = random_tensor(&[2, 8], 22);
        let (_, trace) = forward(&params, &config, &ctx, Mode::Eval).unwrap();
        let patches = patchify(&ctx, 4, 4).unwrap();
        let (embedded, _, _) = linear_forward(&params.embed, patches.data(), 4, 4, MixAxis::Rows);
        assert_eq!(trace.features, embedded);
    }

    fn swap_channels(t: &Tensor) -> Tensor {
        let mut out = t.clone();
        let cols = t.shape()[1];
        out.row_mut(0).copy_from_slice(t.row(1));
        out.row_mut(1).copy_from_slice(&t.data()[..cols]);
        out
    }

    #[test]
    fn channel_mixing_breaks_permutation_equivariance() {
        let config = tiny();
        let ctx = random_tensor(&[2, 8], 31);
        let mut params = perturbed(&config, 30);
        let mixed = predict(&params, &config, &ctx).unwrap();
        let swapped = predict(&params, &config, &swap_channels(&ctx)).unwrap();
        let diff =
            swap_channels(&mixed).data().iter().zip(swapped.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6);

        for b in &mut params.blocks {
            b.channel_mlp.fc2.weight.fill(0.0);
            b.channel_mlp.fc2.bias.fill(0.0);
        }
        let mixed = predict(&params, &config, &ctx).unwrap();
        let swapped = predict(&params, &config, &swap_channels(&ctx)).unwrap();
        for (a, b) in swap_channels(&mixed).data().iter().zip(swapped.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let config = ModelConfig { dropout: 0.5, ..tiny() };
        let params = perturbed(&config, 40);
        let ctx = random_tensor(&[2, 8], 41);
        let eval = predict(&params, &config, &ctx).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (train, trace) = forward(&params, &config, &ctx, Mode::Train(&mut rng)).unwrap();
        assert_ne!(eval, train);
        assert!(trace.blocks[0].patch.mask.is_some());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (again, _) = forward(&params, &config, &ctx, Mode::Train(&mut rng)).unwrap();
        assert_eq!(train, again);
    }

    #[test]
    fn dropout_gradients_match_fixed_mask() {
        // With a fixed RNG stream the training-mode loss is a smooth function of the
        // parameters, so finite differences still apply.
        let config = ModelConfig { dropout: 0.3, ..tiny() };
        let params = perturbed(&config, 50);
        let ctx = random_tensor(&[2, 8], 51);
        let target = random_tensor(&[2, 2], 52);
        let run = |p: &Parameters| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
            let (pred, trace) = forward(p, &config, &ctx, Mode::Train(&mut rng)).unwrap();
            (mse_loss(&pred, &target).unwrap(), pred, trace)
        };
        let (_, pred, trace) = run(&params);
        let grads = backward(&params, trace, &mse_grad(&pred, &target).unwrap()).unwrap();
        let a = grads.blocks[0].feature_mlp.fc1.weight.data()[1];
        let mut plus = params.clone();
        plus.blocks[0].feature_mlp.fc1.weight.data_mut()[1] += 1e-6;
        let mut minus = params.clone();
        minus.blocks[0].feature_mlp.fc1.weight.data_mut()[1] -= 1e-6;
        let fd = (run(&plus).0 - run(&minus).0) / 2e-6;
        assert!((a - fd).abs() / a.abs().max(1e-6) < 1e-5, "{a} vs {fd}");
    }

    #[test]
    fn batched_pass_matches_per_sample_passes() {
        let config = ModelConfig {
            channels: 3,
            context_len: 20,
            patch_len: 8,
            patch_stride: 4,
            embed_dim: 5,
            blocks: 2,
            ..tiny()
        };
        let params = perturbed(&config, 60);
        let contexts: Vec<Tensor> = (0..5).map(|i| random_tensor(&[3, 20], 61 + i)).collect();
        let refs: Vec<&Tensor> = contexts.iter().collect();
        let (batched, trace) = forward_batch(&params, &config, &refs, Mode::Eval).unwrap();
        assert_eq!(batched.shape(), &[5, 3, 2]);
        let upstream = random_tensor(&[5, 3, 2], 70);
        let grads = backward(&params, trace, &upstream).unwrap();

        let mut summed = Parameters::zeros(&config);
        for (b, ctx) in contexts.iter().enumerate() {
            let (single, trace) = forward(&params, &config, ctx, Mode::Eval).unwrap();
            for (x, y) in single.data().iter().zip(&batched.data()[b * 6..(b + 1) * 6]) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "sample {b}: {x} vs {y}");
            }
            let up = Tensor::from_vec(&[3, 2], upstream.data()[b * 6..(b + 1) * 6].to_vec()).unwrap();
            summed.add_assign(&backward(&params, trace, &up).unwrap());
        }
        for ((name, _, a), (_, _, b)) in grads.named().into_iter().zip(summed.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let config = tiny();
        let params = init_params(&config, 1);
        assert!(matches!(predict(&params, &config, &random_tensor(&[2, 9], 1)), Err(ModelError::Shape(_))));
        let other = ModelConfig { embed_dim: 4, ..config };
        assert!(predict(&params, &other, &random_tensor(&[2, 8], 1)).is_err());
        assert!(ModelConfig { patch_stride: 3, ..config }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..config }.validate().is_err());
    }

    fn config_strategy() -> impl Strategy<Value = ModelConfig> {
        (1usize..4, 1usize..5, 1usize..4, 1usize..5, 1usize..4, 0usize..3, 1usize..3, 1usize..6).prop_map(
            |(c, p, s, n_minus, d, l, e, h)| ModelConfig {
                channels: c,
                context_len: p + s * n_minus,
                horizon: h,
                patch_len: p,
                patch_stride: s,
                embed_dim: d,
                blocks: l,
                expansion: e,
                dropout: 0.0,
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn shape_algebra(config in config_strategy(), seed in 0u64..1000) {
            prop_assert!(config.validate().is_ok());
            prop_assert_eq!(config.num_patches(), (config.context_len - config.patch_len) / config.patch_stride + 1);
            let params = init_params(&config, seed);
            let out = predict(&params, &config, &random_tensor(&[config.channels, config.context_len], seed)).unwrap();
            prop_assert_eq!(out.shape(), &[config.channels, config.horizon]);
        }
    }
}
