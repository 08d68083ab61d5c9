//! Training and inference orchestration: segmentor pre-training, the
//! per-batch alternating update of refiner and segmentor, checkpointing,
//! and reverse-process sampling.
//!
//! Reproducibility contract: every random decision is drawn from a
//! substream derived from the run seed and the purpose — parameter
//! initialization, the batch composition of iteration `i`, and the noise
//! of iteration `i` each have their own stream. Batch composition
//! therefore depends only on `(seed, i)`, which is what makes an
//! alternation with the diffusion weight zeroed reproduce a pre-training
//! continuation bit for bit.

mod checkpoint;
mod infer;
mod train;

pub use checkpoint::Checkpoint;
pub use infer::{infer, InferOptions, InferResult, InferSession};
pub use train::{pretrain_segmentor, train_alternate, AlternateRun, PretrainRun};

use crate::error::{Error, Result};
use crate::map::BinaryMask;
use crate::rng::RngState;
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, ArrayD, IxDyn};

/// Cosine-schedule offset used by every run.
pub const COSINE_OFFSET: f64 = 0.008;

/// Substream carrying parameter initialization draws.
const INIT_STREAM: u64 = 1;
/// Base of the per-iteration batch-composition substreams.
const BATCH_STREAM_BASE: u64 = 1 << 32;
/// Base of the per-iteration noise substreams (step indices and flips).
const NOISE_STREAM_BASE: u64 = 2 << 32;

/// How the last reverse step turns the mean mask into a hard mask. Only
/// meaningful for single-channel masks; multi-class output is always the
/// per-pixel argmax over channel probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FinalDraw {
    /// Threshold the final mean at 0.5 (deterministic given the mean).
    #[default]
    Threshold,
    /// Draw the final mask from the mean probabilities.
    Sample,
}

impl std::str::FromStr for FinalDraw {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(FinalDraw::Threshold),
            "sample" => Ok(FinalDraw::Sample),
            other => Err(Error::InvalidArg(format!(
                "final draw must be `threshold` or `sample`, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for FinalDraw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FinalDraw::Threshold => "threshold",
            FinalDraw::Sample => "sample",
        })
    }
}

/// Reverse-process sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Ancestral sampling from the calibrated posterior.
    Ddpm,
    /// The deterministic-leaning strategy with its closed-form mixture.
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::InvalidArg(format!(
                "sampler must be `ddpm` or `ddim`, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        })
    }
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Diffusion step count T of the training schedule.
    pub diffusion_steps: usize,
    /// Default reverse-step count for sampling (respaced when < T).
    pub sampler_steps: usize,
    pub batch_size: usize,
    pub pretrain_iters: usize,
    pub alternate_iters: usize,
    /// Alternation iterations that update only the refiner before the
    /// segmentor updates start.
    pub g_warmup_iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Focal exponent.
    pub gamma: f64,
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub lambda_diff: f64,
    pub seed: u64,
    /// Build the refiner interior from binarized blocks.
    pub binarized: bool,
    pub final_draw: FinalDraw,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            diffusion_steps: 10,
            sampler_steps: 10,
            batch_size: 32,
            pretrain_iters: 500,
            alternate_iters: 2000,
            g_warmup_iters: 0,
            lr: 1e-4,
            weight_decay: 0.01,
            gamma: 2.0,
            lambda_dice: 1.0,
            lambda_focal: 1.0,
            lambda_diff: 1.0,
            seed: 0,
            binarized: false,
            final_draw: FinalDraw::Threshold,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.diffusion_steps == 0 {
            return Err(Error::InvalidArg("diffusion_steps must be positive".into()));
        }
        if self.sampler_steps > self.diffusion_steps {
            return Err(Error::InvalidArg(format!(
                "sampler_steps {} exceeds diffusion_steps {}",
                self.sampler_steps, self.diffusion_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch_size must be positive".into()));
        }
        if self.g_warmup_iters > self.alternate_iters {
            return Err(Error::InvalidArg(format!(
                "g_warmup_iters {} exceeds alternate_iters {}",
                self.g_warmup_iters, self.alternate_iters
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArg(format!("learning rate {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArg(format!("weight decay {}", self.weight_decay)));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda_dice", self.lambda_dice),
            ("lambda_focal", self.lambda_focal),
            ("lambda_diff", self.lambda_diff),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArg(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// RNG for parameter initialization.
    fn init_rng(&self) -> RngState {
        RngState::new(self.seed).substream(INIT_STREAM)
    }

    /// RNG deciding which samples make up batch `iter`.
    fn batch_rng(&self, iter: u64) -> RngState {
        RngState::new(self.seed).substream(BATCH_STREAM_BASE + iter)
    }

    /// RNG for the diffusion draws (step indices, flip noise) of iteration
    /// `iter`.
    fn noise_rng(&self, iter: u64) -> RngState {
        RngState::new(self.seed).substream(NOISE_STREAM_BASE + iter)
    }
}

/// `(H, W)` image to a `(1, 1, H, W)` network input.
fn image_tensor<S: Scalar>(img: &Array2<S>) -> ArrayD<S> {
    let (h, w) = img.dim();
    img.clone()
        .into_shape_with_order(IxDyn(&[1, 1, h, w]))
        .expect("same element count")
}

/// `(H, W, C)` mask to a `(1, C, H, W)` probability tensor.
fn mask_tensor<S: Scalar>(mask: &BinaryMask) -> ArrayD<S> {
    let (h, w, c) = mask.shape();
    let mut out = ArrayD::<S>::zeros(IxDyn(&[1, c, h, w]));
    for ((i, j, k), &v) in mask.data().indexed_iter() {
        out[[0, k, i, j]] = S::of_usize(v as usize);
    }
    out
}

/// `(1, C, H, W)` probability tensor back to an `(H, W, C)` map.
fn tensor_to_array3<S: Scalar>(t: &ArrayD<S>) -> Result<Array3<S>> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::InvalidArg(format!(
            "expected a (1, C, H, W) tensor, got {s:?}"
        )));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = Array3::<S>::zeros((h, w, c));
    for ((n, k, i, j), &v) in t.indexed_iter() {
        debug_assert_eq!(n, 0);
        out[(i, j, k)] = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
