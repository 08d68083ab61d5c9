//! Reference networks: the discriminative segmentor, the denoising
//! refiner, and the cross-attention feature exchange between them.
//!
//! Parameters live in a shared [`ParamStore`]; each network remembers the
//! handles of its own tensors plus the contiguous index range it occupies,
//! so a training step can bind the whole store into a graph while marking
//! only one network's slice as trainable. Forward code takes the bound
//! tensor list and is pure: same parameters, same inputs, same outputs.

mod refiner;
mod segmentor;

pub use refiner::{time_embedding, Refiner, RefinerOut, XFormer, XFormerOut};
pub use segmentor::Segmentor;

use crate::autodiff::{Graph, ParamId, ParamStore, TensorId};
use crate::bitops::{conv2d_cost, matmul_cost, CostReport};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};

/// Shape and capacity choices for the model pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCfg {
    /// Mask channels: 1 = single-foreground sigmoid head, otherwise a
    /// softmax head whose channel 0 is background.
    pub classes: usize,
    /// Channels of the input image.
    pub image_channels: usize,
    /// Square image extent; two pooling stages require a multiple of 4.
    pub image_size: usize,
    /// Segmentor base width; levels run at (base, 2 base, 3 base).
    pub seg_base: usize,
    /// Refiner base width; levels run at (base, 2 base).
    pub ref_base: usize,
    /// Refiner bottleneck width (the exchanged feature f_p).
    pub ref_bottleneck: usize,
    /// Cross-attention model width.
    pub attn_dim: usize,
    /// Cross-attention head count; must divide `attn_dim`.
    pub attn_heads: usize,
    /// Sinusoidal time-embedding width; must be even.
    pub time_dim: usize,
    /// Diffusion step count T, used to normalize t for the conditioning
    /// affines.
    pub diffusion_steps: usize,
    /// Build the refiner interior and the exchange projections from
    /// binarized blocks (TB, XNOR convolution, TA).
    pub binarized: bool,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            classes: 2,
            image_channels: 1,
            image_size: 32,
            seg_base: 16,
            ref_base: 12,
            ref_bottleneck: 32,
            attn_dim: 64,
            attn_heads: 4,
            time_dim: 16,
            diffusion_steps: 10,
            binarized: false,
        }
    }
}

impl ModelCfg {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::InvalidArg("classes must be at least 1".into()));
        }
        if self.image_channels == 0 {
            return Err(Error::InvalidArg("image_channels must be at least 1".into()));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::InvalidArg(format!(
                "image_size must be a multiple of 4 and at least 8, got {}",
                self.image_size
            )));
        }
        if self.seg_base == 0 || self.ref_base == 0 || self.ref_bottleneck == 0 {
            return Err(Error::InvalidArg("channel widths must be positive".into()));
        }
        if self.attn_heads == 0 || self.attn_dim % self.attn_heads != 0 {
            return Err(Error::InvalidArg(format!(
                "attention width {} must be a positive multiple of head count {}",
                self.attn_dim, self.attn_heads
            )));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::InvalidArg(format!(
                "time_dim must be even and at least 2, got {}",
                self.time_dim
            )));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::InvalidArg("diffusion_steps must be positive".into()));
        }
        Ok(())
    }

    /// Segmentor level widths.
    fn seg_widths(&self) -> (usize, usize, usize) {
        (self.seg_base, 2 * self.seg_base, 3 * self.seg_base)
    }

    /// Refiner level widths.
    fn ref_widths(&self) -> (usize, usize, usize) {
        (self.ref_base, 2 * self.ref_base, self.ref_bottleneck)
    }
}

/// He-normal convolution weight `(cout, cin, k, k)`.
fn conv_init<S: Scalar>(
    rng: &mut RngState,
    cout: usize,
    cin: usize,
    k: usize,
) -> ArrayD<S> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    ArrayD::from_shape_vec(
        IxDyn(&[cout, cin, k, k]),
        (0..cout * cin * k * k)
            .map(|_| S::of(rng.normal_f64() * std))
            .collect(),
    )
    .expect("shape/len agree")
}

/// Xavier-uniform linear weight `(rows, cols)`.
fn linear_init<S: Scalar>(rng: &mut RngState, rows: usize, cols: usize) -> ArrayD<S> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    ArrayD::from_shape_vec(
        IxDyn(&[rows, cols]),
        (0..rows * cols)
            .map(|_| S::of((rng.uniform_f64() * 2.0 - 1.0) * limit))
            .collect(),
    )
    .expect("shape/len agree")
}

fn vec_init<S: Scalar>(len: usize, v: f64) -> ArrayD<S> {
    ArrayD::from_elem(IxDyn(&[len]), S::of(v))
}

/// Record every parameter of `store` as a graph leaf, in store order;
/// `trainable` selects which indices are differentiation targets.
pub fn bind_params<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    trainable: impl Fn(usize) -> bool,
) -> Result<Vec<TensorId>> {
    let mut out = Vec::with_capacity(store.len());
    for i in 0..store.len() {
        let value = store.value(ParamId(i)).clone();
        out.push(g.leaf(value, trainable(i))?);
    }
    Ok(out)
}

/// Convolution weight + bias handles.
#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: ParamId,
    b: ParamId,
}

impl ConvP {
    fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut RngState,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
    ) -> Result<ConvP> {
        let w = store.add(&format!("{name}.w"), conv_init(rng, cout, cin, k))?;
        let b = store.add(&format!("{name}.b"), vec_init(cout, 0.0))?;
        Ok(ConvP { w, b })
    }
}

/// Index range `[start, end)` of a network's parameters within the store.
#[derive(Debug, Clone, Copy)]
pub struct ParamRange {
    pub start: usize,
    pub end: usize,
}

impl ParamRange {
    pub fn contains(&self, index: usize) -> bool {
        index >= self.start && index < self.end
    }

    /// Total element count of this range within `store`.
    pub fn element_count<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        (self.start..self.end)
            .map(|i| store.value(ParamId(i)).len())
            .sum()
    }
}

/// Build the reference segmentor/refiner pair into `store`. The refiner
/// includes the cross-attention exchange and consumes the segmentor's mid
/// feature on every forward pass.
pub fn build_reference_models<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut RngState,
    cfg: ModelCfg,
) -> Result<(Segmentor, Refiner)> {
    cfg.validate()?;
    let seg = Segmentor::init(store, rng, cfg)?;
    let refiner = Refiner::init(store, rng, cfg)?;
    Ok((seg, refiner))
}

/// Per-layer operation counts for one forward pass of both networks at the
/// configured image size, batch 1.
pub fn cost_report(cfg: &ModelCfg) -> Result<CostReport> {
    cfg.validate()?;
    let mut report = CostReport::default();
    let size = cfg.image_size as u64;
    let (s1, s2, s3) = cfg.seg_widths();
    let (s1, s2, s3) = (s1 as u64, s2 as u64, s3 as u64);
    let (half, quarter) = (size / 2, size / 4);
    let cin = cfg.image_channels as u64;
    let c = cfg.classes as u64;

    report.push("seg.enc1a", conv2d_cost(size, size, cin, s1, 3, false));
    report.push("seg.enc1b", conv2d_cost(size, size, s1, s1, 3, false));
    report.push("seg.enc2a", conv2d_cost(half, half, s1, s2, 3, false));
    report.push("seg.enc2b", conv2d_cost(half, half, s2, s2, 3, false));
    report.push("seg.mid_a", conv2d_cost(quarter, quarter, s2, s3, 3, false));
    report.push("seg.mid_b", conv2d_cost(quarter, quarter, s3, s3, 3, false));
    report.push("seg.dec1a", conv2d_cost(half, half, s3 + s2, s2, 3, false));
    report.push("seg.dec1b", conv2d_cost(half, half, s2, s2, 3, false));
    report.push("seg.dec2a", conv2d_cost(size, size, s2 + s1, s1, 3, false));
    report.push("seg.dec2b", conv2d_cost(size, size, s1, s1, 3, false));
    report.push("seg.head", conv2d_cost(size, size, s1, c, 1, false));

    let (r1, r2, rb) = cfg.ref_widths();
    let (r1, r2, rb) = (r1 as u64, r2 as u64, rb as u64);
    let bin = cfg.binarized;
    report.push("ref.enc1", conv2d_cost(size, size, 2 * c, r1, 3, false));
    report.push("ref.enc2", conv2d_cost(half, half, r1, r2, 3, bin));
    report.push("ref.bott1", conv2d_cost(quarter, quarter, r2, rb, 3, bin));
    report.push("ref.bott2", conv2d_cost(quarter, quarter, rb, rb, 3, bin));

    let d = cfg.attn_dim as u64;
    let tokens = quarter * quarter;
    report.push("xf.proj_d", conv2d_cost(quarter, quarter, s3, d, 1, bin));
    report.push("xf.proj_p", conv2d_cost(quarter, quarter, rb, d, 1, bin));
    for blk in ["xf.a", "xf.b"] {
        // q, k, v, o projections plus the two feed-forward linears and the
        // two attention products; all on float tokens.
        let proj = matmul_cost(tokens, d, d, false) * 4;
        let ffn = matmul_cost(tokens, d, 2 * d, false) * 2;
        let attn = matmul_cost(tokens, d, tokens, false) * 2;
        report.push(&format!("{blk}.proj"), proj);
        report.push(&format!("{blk}.ffn"), ffn);
        report.push(&format!("{blk}.attn"), attn);
    }
    report.push("xf.unproj_d", conv2d_cost(quarter, quarter, d, s3, 1, bin));
    report.push("xf.unproj_p", conv2d_cost(quarter, quarter, d, rb, 1, bin));

    report.push("ref.fuse", conv2d_cost(quarter, quarter, rb + s3, rb, 1, false));
    report.push("ref.up1", conv2d_cost(half, half, rb + r2, r2, 3, bin));
    report.push("ref.up2", conv2d_cost(size, size, r2 + r1, r1, 3, false));
    report.push("ref.out", conv2d_cost(size, size, r1, c, 3, false));
    Ok(report)
}
