//! Noise-prediction network with hand-written backpropagation.
//!
//! The input is a `K × L × 2` grid: lane one carries observed values (or the
//! noisy targets `x_t` at masked positions, zeros where unobserved), lane two
//! the conditioning bit. Each position is embedded to width `d`, summed with
//! a timestep encoding, a learned channel embedding and a projected diffusion
//! step embedding, then passed through `R` residual blocks:
//!
//! ```text
//! h += TemporalMix(LayerNorm(h))    // self-attention over L, per channel
//! h += FeatureMix(LayerNorm(h))     // K×K channel mixing + SiLU MLP, per timestep
//! ```
//!
//! A final layer norm and a `d → 1` projection produce one noise estimate per
//! position. The projection starts at zero, so a fresh model predicts `ε̂ = 0`.
//!
//! Everything is generic over [`Scalar`]: training and sampling run in `f32`,
//! gradient checks in `f64`.

mod adam;
mod layers;
mod persist;

pub use adam::{optimizer_step, AdamConfig, OptimizerState};
pub use persist::{load_optimizer, load_weights, save_optimizer, save_weights, TensorEntry, WeightsManifest};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::Mask;
use crate::series::TimeSeriesWindow;
use layers::*;

/// Floating-point element type of the network.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Debug
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// `exp` used on hot paths (softmax, SiLU).
    #[inline(always)]
    fn exp_fast(self) -> Self {
        self.exp()
    }
}

impl Scalar for f32 {
    #[inline(always)]
    fn exp_fast(self) -> Self {
        layers::exp_f32(self)
    }
}

impl Scalar for f64 {}

#[inline]
fn cast<S: Scalar>(x: f64) -> S {
    S::from_f64(x).unwrap()
}

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("diffusion step {step} outside [1, {max}]")]
    StepOutOfRange { step: usize, max: usize },
    #[error("mask has no target positions")]
    EmptyTarget,
    #[error("weights format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMixing {
    #[default]
    Attention,
    /// Three-tap dilated causal convolution; block `r` uses dilation `2^r`.
    DilatedConv,
}

pub(crate) const CONV_TAPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub diffusion_steps: usize,
    #[serde(default)]
    pub temporal: TemporalMixing,
}

impl DenoiserConfig {
    pub fn new(channels: usize, width: usize, blocks: usize, diffusion_steps: usize) -> Self {
        Self {
            channels,
            width,
            blocks,
            heads: 1,
            diffusion_steps,
            temporal: TemporalMixing::Attention,
        }
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: String| Err(DenoiserError::InvalidShape(m));
        if self.channels < 2 {
            return bad(format!("need K >= 2, got {}", self.channels));
        }
        if self.width < 4 || !self.width.is_multiple_of(2) {
            return bad(format!("width must be even and >= 4, got {}", self.width));
        }
        if self.blocks < 1 {
            return bad("need at least one residual block".into());
        }
        if self.heads < 1 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide width {}", self.heads, self.width));
        }
        if self.diffusion_steps < 1 {
            return bad("diffusion_steps must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S> {
    pub norm1_gain: Array2<S>,
    pub norm1_bias: Array2<S>,
    /// Attention: `[query, key, value, output]`, each `d × d`.
    /// Convolution: one `3d × d` tap matrix.
    pub temporal_w: Vec<Array2<S>>,
    pub temporal_b: Array2<S>,
    pub norm2_gain: Array2<S>,
    pub norm2_bias: Array2<S>,
    /// `K × K` mixing across channel lanes.
    pub channel_mix: Array2<S>,
    pub ff_w1: Array2<S>,
    pub ff_b1: Array2<S>,
    pub ff_w2: Array2<S>,
    pub ff_b2: Array2<S>,
}

/// All learnable tensors. Bias and gain vectors are stored as `1 × n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<S> {
    pub config: DenoiserConfig,
    pub input_w: Array2<S>,
    pub input_b: Array2<S>,
    pub channel_embedding: Array2<S>,
    pub step_w: Array2<S>,
    pub step_b: Array2<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub out_norm_gain: Array2<S>,
    pub out_norm_bias: Array2<S>,
    pub out_w: Array2<S>,
    pub out_b: Array2<S>,
}

fn temporal_names(kind: TemporalMixing) -> &'static [&'static str] {
    match kind {
        TemporalMixing::Attention => &["attn.query", "attn.key", "attn.value", "attn.output"],
        TemporalMixing::DilatedConv => &["conv.taps"],
    }
}

impl<S: Scalar> DenoiserParams<S> {
    /// Same architecture, every tensor zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(S::zero());
        }
        out
    }

    /// Named tensors in canonical order (also the persistence order).
    pub fn tensors(&self) -> Vec<(String, &Array2<S>)> {
        let mut out = vec![
            ("input.w".to_string(), &self.input_w),
            ("input.b".to_string(), &self.input_b),
            ("channel_embedding".to_string(), &self.channel_embedding),
            ("step.w".to_string(), &self.step_w),
            ("step.b".to_string(), &self.step_b),
        ];
        let names = temporal_names(self.config.temporal);
        for (r, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{r}");
            out.push((format!("{p}.norm1.gain"), &b.norm1_gain));
            out.push((format!("{p}.norm1.bias"), &b.norm1_bias));
            for (name, w) in names.iter().zip(&b.temporal_w) {
                out.push((format!("{p}.{name}"), w));
            }
            out.push((format!("{p}.temporal.bias"), &b.temporal_b));
            out.push((format!("{p}.norm2.gain"), &b.norm2_gain));
            out.push((format!("{p}.norm2.bias"), &b.norm2_bias));
            out.push((format!("{p}.channel_mix"), &b.channel_mix));
            out.push((format!("{p}.ff.w1"), &b.ff_w1));
            out.push((format!("{p}.ff.b1"), &b.ff_b1));
            out.push((format!("{p}.ff.w2"), &b.ff_w2));
            out.push((format!("{p}.ff.b2"), &b.ff_b2));
        }
        out.push(("output.norm.gain".to_string(), &self.out_norm_gain));
        out.push(("output.norm.bias".to_string(), &self.out_norm_bias));
        out.push(("output.w".to_string(), &self.out_w));
        out.push(("output.b".to_string(), &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<S>)> {
        let mut out = vec![
            ("input.w".to_string(), &mut self.input_w),
            ("input.b".to_string(), &mut self.input_b),
            ("channel_embedding".to_string(), &mut self.channel_embedding),
            ("step.w".to_string(), &mut self.step_w),
            ("step.b".to_string(), &mut self.step_b),
        ];
        let names = temporal_names(self.config.temporal);
        for (r, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{r}");
            out.push((format!("{p}.norm1.gain"), &mut b.norm1_gain));
            out.push((format!("{p}.norm1.bias"), &mut b.norm1_bias));
            for (name, w) in names.iter().zip(b.temporal_w.iter_mut()) {
                out.push((format!("{p}.{name}"), w));
            }
            out.push((format!("{p}.temporal.bias"), &mut b.temporal_b));
            out.push((format!("{p}.norm2.gain"), &mut b.norm2_gain));
            out.push((format!("{p}.norm2.bias"), &mut b.norm2_bias));
            out.push((format!("{p}.channel_mix"), &mut b.channel_mix));
            out.push((format!("{p}.ff.w1"), &mut b.ff_w1));
            out.push((format!("{p}.ff.b1"), &mut b.ff_b1));
            out.push((format!("{p}.ff.w2"), &mut b.ff_w2));
            out.push((format!("{p}.ff.b2"), &mut b.ff_b2));
        }
        out.push(("output.norm.gain".to_string(), &mut self.out_norm_gain));
        out.push(("output.norm.bias".to_string(), &mut self.out_norm_bias));
        out.push(("output.w".to_string(), &mut self.out_w));
        out.push(("output.b".to_string(), &mut self.out_b));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> DenoiserParams<T> {
        let c = |a: &Array2<S>| a.mapv(|v| T::from_f64(v.to_f64().unwrap()).unwrap());
        DenoiserParams {
            config: self.config.clone(),
            input_w: c(&self.input_w),
            input_b: c(&self.input_b),
            channel_embedding: c(&self.channel_embedding),
            step_w: c(&self.step_w),
            step_b: c(&self.step_b),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    norm1_gain: c(&b.norm1_gain),
                    norm1_bias: c(&b.norm1_bias),
                    temporal_w: b.temporal_w.iter().map(c).collect(),
                    temporal_b: c(&b.temporal_b),
                    norm2_gain: c(&b.norm2_gain),
                    norm2_bias: c(&b.norm2_bias),
                    channel_mix: c(&b.channel_mix),
                    ff_w1: c(&b.ff_w1),
                    ff_b1: c(&b.ff_b1),
                    ff_w2: c(&b.ff_w2),
                    ff_b2: c(&b.ff_b2),
                })
                .collect(),
            out_norm_gain: c(&self.out_norm_gain),
            out_norm_bias: c(&self.out_norm_bias),
            out_w: c(&self.out_w),
            out_b: c(&self.out_b),
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), DenoiserError> {
        let a = self.tensors();
        let b = other.tensors();
        if a.len() != b.len() {
            return Err(DenoiserError::ShapeMismatch(format!(
                "{} vs {} tensors",
                a.len(),
                b.len()
            )));
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.dim() != tb.dim() {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "{na} {:?} vs {nb} {:?}",
                    ta.dim(),
                    tb.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Seeded initialization: hidden weights ~ N(0, 1/fan_in), gains one,
/// biases and the output projection zero.
pub fn init_params<S: Scalar>(
    config: &DenoiserConfig,
    seed: u64,
) -> Result<DenoiserParams<S>, DenoiserError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d) = (config.channels, config.width);
    let mut normal = |rows: usize, cols: usize, fan_in: usize| {
        let scale = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            cast::<S>(z * scale)
        })
    };
    let row = |n: usize, v: f64| Array2::from_elem((1, n), cast::<S>(v));

    let input_w = normal(2, d, 2);
    let channel_embedding = normal(k, d, k);
    let step_w = normal(d, d, d);
    let mut blocks = Vec::with_capacity(config.blocks);
    for _ in 0..config.blocks {
        let temporal_w = match config.temporal {
            TemporalMixing::Attention => (0..4).map(|_| normal(d, d, d)).collect(),
            TemporalMixing::DilatedConv => vec![normal(CONV_TAPS * d, d, CONV_TAPS * d)],
        };
        blocks.push(BlockParams {
            norm1_gain: row(d, 1.0),
            norm1_bias: row(d, 0.0),
            temporal_w,
            temporal_b: row(d, 0.0),
            norm2_gain: row(d, 1.0),
            norm2_bias: row(d, 0.0),
            channel_mix: normal(k, k, k),
            ff_w1: normal(d, d, d),
            ff_b1: row(d, 0.0),
            ff_w2: normal(d, d, d),
            ff_b2: row(d, 0.0),
        });
    }
    Ok(DenoiserParams {
        config: config.clone(),
        input_w,
        input_b: row(d, 0.0),
        channel_embedding,
        step_w,
        step_b: row(d, 0.0),
        blocks,
        out_norm_gain: row(d, 1.0),
        out_norm_bias: row(d, 0.0),
        out_w: Array2::zeros((d, 1)),
        out_b: Array2::zeros((1, 1)),
    })
}

/// Network input for one window.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseInput<'a> {
    /// Normalized window; only observed, non-target entries are read.
    pub window: &'a TimeSeriesWindow,
    pub mask: &'a Mask,
    /// Noisy values at the mask's target positions, in `Mask::positions` order.
    pub x_t: &'a [f64],
    pub step: usize,
}

/// One training item: input plus the injected noise at target positions.
#[derive(Debug, Clone, Copy)]
pub struct TrainingExample<'a> {
    pub input: DenoiseInput<'a>,
    pub noise: &'a [f64],
}

/// Precomputed timestep encoding for windows of one length.
pub struct Encodings<S> {
    positions: Array2<S>,
}

impl<S: Scalar> Encodings<S> {
    pub fn new(len: usize, width: usize) -> Self {
        Self {
            positions: position_table(len, width),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.nrows() == 0
    }
}

struct Lanes<S> {
    /// `N × 2`: value lane and conditioning bit, rows `k·L + l`.
    grid: Array2<S>,
    targets: Vec<usize>,
}

fn build_lanes<S: Scalar>(
    config: &DenoiserConfig,
    input: &DenoiseInput<'_>,
) -> Result<Lanes<S>, DenoiserError> {
    let (k, len) = input.window.values.dim();
    if k != config.channels {
        return Err(DenoiserError::ShapeMismatch(format!(
            "window has {k} channels, model expects {}",
            config.channels
        )));
    }
    if input.mask.target.dim() != (k, len) {
        return Err(DenoiserError::ShapeMismatch(format!(
            "mask {:?} vs window {:?}",
            input.mask.target.dim(),
            (k, len)
        )));
    }
    if input.step < 1 || input.step > config.diffusion_steps {
        return Err(DenoiserError::StepOutOfRange {
            step: input.step,
            max: config.diffusion_steps,
        });
    }
    let positions = input.mask.positions();
    if positions.len() != input.x_t.len() {
        return Err(DenoiserError::ShapeMismatch(format!(
            "{} noisy values for {} targets",
            input.x_t.len(),
            positions.len()
        )));
    }
    let mut grid = Array2::zeros((k * len, 2));
    for c in 0..k {
        for l in 0..len {
            if input.window.observed[[c, l]] && !input.mask.target[[c, l]] {
                grid[[c * len + l, 0]] = cast(input.window.values[[c, l]]);
                grid[[c * len + l, 1]] = S::one();
            }
        }
    }
    let mut targets = Vec::with_capacity(positions.len());
    for (&(c, l), &x) in positions.iter().zip(input.x_t) {
        grid[[c * len + l, 0]] = cast(x);
        targets.push(c * len + l);
    }
    Ok(Lanes { grid, targets })
}

enum TemporalCache<S> {
    Attention {
        query: Array2<S>,
        key: Array2<S>,
        value: Array2<S>,
        /// Softmax weights per (channel, head), channel-major.
        probs: Vec<Array2<S>>,
        context: Array2<S>,
    },
    Conv {
        gathered: Vec<Array2<S>>,
    },
}

struct BlockCache<S> {
    norm1: NormCache<S>,
    u1: Array2<S>,
    temporal: TemporalCache<S>,
    norm2: NormCache<S>,
    u2: Array2<S>,
    mixed: Array2<S>,
    pre_act: Array2<S>,
    act: Array2<S>,
}

struct ForwardCache<S> {
    grid: Array2<S>,
    step_emb: Array2<S>,
    step_pre: Array2<S>,
    blocks: Vec<BlockCache<S>>,
    out_norm: NormCache<S>,
    out_u: Array2<S>,
}

fn dilation(block: usize, len: usize) -> usize {
    (1usize << block.min(20)).min(len.max(1))
}

impl<S: Scalar> DenoiserParams<S> {
    fn forward(
        &self,
        lanes: &Lanes<S>,
        enc: &Encodings<S>,
        step: usize,
        len: usize,
    ) -> (Array2<S>, ForwardCache<S>) {
        let cfg = &self.config;
        let (k, d) = (cfg.channels, cfg.width);
        let n = k * len;
        debug_assert_eq!(enc.len(), len);

        let step_emb = sinusoid(step as f64, d).mapv(cast::<S>).insert_axis(Axis(0));
        let step_pre = step_emb.dot(&self.step_w) + &self.step_b;
        let step_vec = step_pre.mapv(silu);

        let mut h = lanes.grid.dot(&self.input_w) + &self.input_b + &step_vec;
        for c in 0..k {
            let mut rows = h.slice_mut(s![c * len..(c + 1) * len, ..]);
            rows += &enc.positions;
            rows += &self.channel_embedding.row(c);
        }

        let mut caches = Vec::with_capacity(self.blocks.len());
        for (r, block) in self.blocks.iter().enumerate() {
            let (u1, norm1) = layer_norm(&h, &block.norm1_gain, &block.norm1_bias);
            let (temporal_out, temporal) = match cfg.temporal {
                TemporalMixing::Attention => {
                    let query = u1.dot(&block.temporal_w[0]);
                    let key = u1.dot(&block.temporal_w[1]);
                    let value = u1.dot(&block.temporal_w[2]);
                    let dh = d / cfg.heads;
                    let scale = cast::<S>(1.0 / (dh as f64).sqrt());
                    let mut context = Array2::zeros((n, d));
                    let mut probs = Vec::with_capacity(k * cfg.heads);
                    for c in 0..k {
                        for head in 0..cfg.heads {
                            let rows = c * len..(c + 1) * len;
                            let cols = head * dh..(head + 1) * dh;
                            let q = query.slice(s![rows.clone(), cols.clone()]);
                            let kk = key.slice(s![rows.clone(), cols.clone()]);
                            let v = value.slice(s![rows.clone(), cols.clone()]);
                            let mut p = Array2::zeros((len, len));
                            general_mat_mul(scale, &q, &kk.t(), S::zero(), &mut p);
                            softmax_rows(&mut p);
                            let mut ctx = context.slice_mut(s![rows, cols]);
                            general_mat_mul(S::one(), &p, &v, S::zero(), &mut ctx);
                            probs.push(p);
                        }
                    }
                    let out = context.dot(&block.temporal_w[3]) + &block.temporal_b;
                    (
                        out,
                        TemporalCache::Attention {
                            query,
                            key,
                            value,
                            probs,
                            context,
                        },
                    )
                }
                TemporalMixing::DilatedConv => {
                    let dil = dilation(r, len);
                    let mut out = Array2::zeros((n, d));
                    let mut gathered = Vec::with_capacity(k);
                    for c in 0..k {
                        let rows = c * len..(c + 1) * len;
                        let g = gather_taps(&u1.slice(s![rows.clone(), ..]), CONV_TAPS, dil);
                        let mut o = out.slice_mut(s![rows, ..]);
                        general_mat_mul(S::one(), &g, &block.temporal_w[0], S::zero(), &mut o);
                        o += &block.temporal_b;
                        gathered.push(g);
                    }
                    (out, TemporalCache::Conv { gathered })
                }
            };
            h += &temporal_out;

            let (u2, norm2) = layer_norm(&h, &block.norm2_gain, &block.norm2_bias);
            let u2r = u2.view().into_shape_with_order((k, len * d)).unwrap();
            let mixed = block
                .channel_mix
                .dot(&u2r)
                .into_shape_with_order((n, d))
                .unwrap();
            let pre_act = mixed.dot(&block.ff_w1) + &block.ff_b1;
            let act = pre_act.mapv(silu);
            let ff = act.dot(&block.ff_w2) + &block.ff_b2;
            h += &ff;

            caches.push(BlockCache {
                norm1,
                u1,
                temporal,
                norm2,
                u2,
                mixed,
                pre_act,
                act,
            });
        }

        let (out_u, out_norm) = layer_norm(&h, &self.out_norm_gain, &self.out_norm_bias);
        let out = out_u.dot(&self.out_w) + &self.out_b;
        (
            out,
            ForwardCache {
                grid: lanes.grid.clone(),
                step_emb,
                step_pre,
                blocks: caches,
                out_norm,
                out_u,
            },
        )
    }

    /// Accumulates parameter gradients for an upstream gradient `d_out`
    /// (`N × 1`) into `grads`.
    fn backward(
        &self,
        d_out: &Array2<S>,
        cache: &ForwardCache<S>,
        len: usize,
        grads: &mut DenoiserParams<S>,
    ) {
        let cfg = &self.config;
        let (k, d) = (cfg.channels, cfg.width);
        let n = k * len;

        matmul_acc(&cache.out_u.t(), &d_out.view(), &mut grads.out_w.view_mut());
        add_col_sums(d_out, &mut grads.out_b);
        let d_u = d_out.dot(&self.out_w.t());
        let mut dh = layer_norm_backward(
            &d_u,
            &self.out_norm_gain,
            &cache.out_norm,
            &mut grads.out_norm_gain,
            &mut grads.out_norm_bias,
        );

        for (r, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut grads.blocks[r];

            // feature mixing
            matmul_acc(&bc.act.t(), &dh.view(), &mut gb.ff_w2.view_mut());
            add_col_sums(&dh, &mut gb.ff_b2);
            let d_act = dh.dot(&block.ff_w2.t());
            let d_pre = &d_act * &bc.pre_act.mapv(silu_grad);
            matmul_acc(&bc.mixed.t(), &d_pre.view(), &mut gb.ff_w1.view_mut());
            add_col_sums(&d_pre, &mut gb.ff_b1);
            let d_mixed = d_pre.dot(&block.ff_w1.t());
            let d_mixed_r = d_mixed.view().into_shape_with_order((k, len * d)).unwrap();
            let u2r = bc.u2.view().into_shape_with_order((k, len * d)).unwrap();
            matmul_acc(&d_mixed_r, &u2r.t(), &mut gb.channel_mix.view_mut());
            let d_u2 = block
                .channel_mix
                .t()
                .dot(&d_mixed_r)
                .into_shape_with_order((n, d))
                .unwrap();
            dh += &layer_norm_backward(
                &d_u2,
                &block.norm2_gain,
                &bc.norm2,
                &mut gb.norm2_gain,
                &mut gb.norm2_bias,
            );

            // temporal mixing
            add_col_sums(&dh, &mut gb.temporal_b);
            let d_u1 = match &bc.temporal {
                TemporalCache::Attention {
                    query,
                    key,
                    value,
                    probs,
                    context,
                } => {
                    matmul_acc(&context.t(), &dh.view(), &mut gb.temporal_w[3].view_mut());
                    let d_ctx = dh.dot(&block.temporal_w[3].t());
                    let dhd = d / cfg.heads;
                    let scale = cast::<S>(1.0 / (dhd as f64).sqrt());
                    let mut d_q = Array2::zeros((n, d));
                    let mut d_k = Array2::zeros((n, d));
                    let mut d_v = Array2::zeros((n, d));
                    for c in 0..k {
                        for head in 0..cfg.heads {
                            let rows = c * len..(c + 1) * len;
                            let cols = head * dhd..(head + 1) * dhd;
                            let p = &probs[c * cfg.heads + head];
                            let dc = d_ctx.slice(s![rows.clone(), cols.clone()]);
                            let q = query.slice(s![rows.clone(), cols.clone()]);
                            let kk = key.slice(s![rows.clone(), cols.clone()]);
                            let v = value.slice(s![rows.clone(), cols.clone()]);
                            let dp = dc.dot(&v.t());
                            general_mat_mul(
                                S::one(),
                                &p.t(),
                                &dc,
                                S::zero(),
                                &mut d_v.slice_mut(s![rows.clone(), cols.clone()]),
                            );
                            let ds = softmax_backward(p, &dp);
                            general_mat_mul(
                                scale,
                                &ds,
                                &kk,
                                S::zero(),
                                &mut d_q.slice_mut(s![rows.clone(), cols.clone()]),
                            );
                            general_mat_mul(
                                scale,
                                &ds.t(),
                                &q,
                                S::zero(),
                                &mut d_k.slice_mut(s![rows, cols]),
                            );
                        }
                    }
                    let u1t = bc.u1.t();
                    matmul_acc(&u1t, &d_q.view(), &mut gb.temporal_w[0].view_mut());
                    matmul_acc(&u1t, &d_k.view(), &mut gb.temporal_w[1].view_mut());
                    matmul_acc(&u1t, &d_v.view(), &mut gb.temporal_w[2].view_mut());
                    let mut d_u1 = d_q.dot(&block.temporal_w[0].t());
                    matmul_acc(&d_k.view(), &block.temporal_w[1].t(), &mut d_u1.view_mut());
                    matmul_acc(&d_v.view(), &block.temporal_w[2].t(), &mut d_u1.view_mut());
                    d_u1
                }
                TemporalCache::Conv { gathered } => {
                    let dil = dilation(r, len);
                    let mut d_u1 = Array2::zeros((n, d));
                    for (c, g) in gathered.iter().enumerate() {
                        let rows = c * len..(c + 1) * len;
                        let d_o = dh.slice(s![rows.clone(), ..]);
                        matmul_acc(&g.t(), &d_o, &mut gb.temporal_w[0].view_mut());
                        let d_g = d_o.dot(&block.temporal_w[0].t());
                        scatter_taps(&d_g, CONV_TAPS, dil, &mut d_u1.slice_mut(s![rows, ..]));
                    }
                    d_u1
                }
            };
            dh += &layer_norm_backward(
                &d_u1,
                &block.norm1_gain,
                &bc.norm1,
                &mut gb.norm1_gain,
                &mut gb.norm1_bias,
            );
        }

        // input embedding
        matmul_acc(&cache.grid.t(), &dh.view(), &mut grads.input_w.view_mut());
        add_col_sums(&dh, &mut grads.input_b);
        for c in 0..k {
            let sums = dh.slice(s![c * len..(c + 1) * len, ..]).sum_axis(Axis(0));
            let mut row = grads.channel_embedding.row_mut(c);
            row += &sums;
        }
        let d_step = dh.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_step_pre = &d_step * &cache.step_pre.mapv(silu_grad);
        matmul_acc(&cache.step_emb.t(), &d_step_pre.view(), &mut grads.step_w.view_mut());
        let mut sb = grads.step_b.view_mut();
        sb += &d_step_pre;
    }

    /// Noise estimate at the mask's target positions.
    pub fn predict_noise(&self, input: &DenoiseInput<'_>) -> Result<Vec<f64>, DenoiserError> {
        let enc = Encodings::new(input.window.len(), self.config.width);
        self.predict_noise_with(input, &enc)
    }

    /// [`predict_noise`](Self::predict_noise) with a reusable encoding table.
    pub fn predict_noise_with(
        &self,
        input: &DenoiseInput<'_>,
        enc: &Encodings<S>,
    ) -> Result<Vec<f64>, DenoiserError> {
        let len = input.window.len();
        if enc.len() != len {
            return Err(DenoiserError::ShapeMismatch(format!(
                "encoding for length {} used on length {len}",
                enc.len()
            )));
        }
        let lanes = build_lanes(&self.config, input)?;
        let (out, _) = self.forward(&lanes, enc, input.step, len);
        Ok(lanes
            .targets
            .iter()
            .map(|&i| out[[i, 0]].to_f64().unwrap())
            .collect())
    }

    fn example_loss(
        &self,
        ex: &TrainingExample<'_>,
        enc: &Encodings<S>,
    ) -> Result<(f64, Lanes<S>, Array2<S>, ForwardCache<S>), DenoiserError> {
        let len = ex.input.window.len();
        let lanes = build_lanes(&self.config, &ex.input)?;
        if lanes.targets.is_empty() {
            return Err(DenoiserError::EmptyTarget);
        }
        if ex.noise.len() != lanes.targets.len() {
            return Err(DenoiserError::ShapeMismatch(format!(
                "{} noise values for {} targets",
                ex.noise.len(),
                lanes.targets.len()
            )));
        }
        let (out, cache) = self.forward(&lanes, enc, ex.input.step, len);
        let m = lanes.targets.len() as f64;
        let loss = lanes
            .targets
            .iter()
            .zip(ex.noise)
            .map(|(&i, &e)| (out[[i, 0]].to_f64().unwrap() - e).powi(2))
            .sum::<f64>()
            / m;
        Ok((loss, lanes, out, cache))
    }

    /// Mean over the batch of the per-example masked noise MSE.
    pub fn loss(&self, batch: &[TrainingExample<'_>]) -> Result<f64, DenoiserError> {
        if batch.is_empty() {
            return Err(DenoiserError::EmptyTarget);
        }
        let mut total = 0.0;
        let mut enc: Option<Encodings<S>> = None;
        for ex in batch {
            let len = ex.input.window.len();
            if enc.as_ref().is_none_or(|e| e.len() != len) {
                enc = Some(Encodings::new(len, self.config.width));
            }
            total += self.example_loss(ex, enc.as_ref().unwrap())?.0;
        }
        Ok(total / batch.len() as f64)
    }

    fn example_grad(
        &self,
        ex: &TrainingExample<'_>,
        enc: &Encodings<S>,
        batch_len: usize,
        grads: &mut DenoiserParams<S>,
    ) -> Result<f64, DenoiserError> {
        let len = ex.input.window.len();
        let (loss, lanes, out, cache) = self.example_loss(ex, enc)?;
        let scale = 2.0 / (lanes.targets.len() as f64 * batch_len as f64);
        let mut d_out = Array2::zeros((out.nrows(), 1));
        for (&i, &e) in lanes.targets.iter().zip(ex.noise) {
            d_out[[i, 0]] = cast((out[[i, 0]].to_f64().unwrap() - e) * scale);
        }
        self.backward(&d_out, &cache, len, grads);
        Ok(loss)
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        batch: &[TrainingExample<'_>],
    ) -> Result<(f64, DenoiserParams<S>), DenoiserError> {
        let len = batch.first().map_or(0, |ex| ex.input.window.len());
        self.loss_and_grad_with(batch, &Encodings::new(len, self.config.width))
    }

    /// [`loss_and_grad`](Self::loss_and_grad) with a reusable encoding table;
    /// every window in the batch must match its length.
    pub fn loss_and_grad_with(
        &self,
        batch: &[TrainingExample<'_>],
        enc: &Encodings<S>,
    ) -> Result<(f64, DenoiserParams<S>), DenoiserError> {
        if batch.is_empty() {
            return Err(DenoiserError::EmptyTarget);
        }
        let mut grads = self.zeros_like();
        let mut total = 0.0;
        for ex in batch {
            let len = ex.input.window.len();
            if enc.len() != len {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "encoding for length {} used on length {len}",
                    enc.len()
                )));
            }
            total += self.example_grad(ex, enc, batch.len(), &mut grads)?;
        }
        Ok((total / batch.len() as f64, grads))
    }
}
