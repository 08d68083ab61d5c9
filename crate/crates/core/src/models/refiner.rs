//! Denoising refiner and the cross-attention feature exchange.
//!
//! The refiner is a small encoder–decoder over the concatenated noisy
//! mask and prior mask, conditioned on the diffusion step and on the
//! segmentor's mid feature. The exchange projects both bottleneck-depth
//! features to a shared width, runs two pre-norm cross-attention blocks,
//! and projects back, preserving both feature shapes.
//!
//! Every interior block can be built binarized: the step-conditioned
//! threshold binarizes the block input, the convolution runs on packed
//! ±1 operands, and the step-conditioned two-slope activation follows.
//! The step enters each block twice: as a learned bias computed from a
//! sinusoidal embedding, and through the per-layer affines in tau = t/T
//! that produce the threshold and activation parameters.

use super::{linear_init, vec_init, ConvP, ModelCfg, ParamRange};
use crate::autodiff::{Graph, ParamId, ParamStore, TensorId};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};

/// Sinusoidal step embedding: `dim/2` sine values followed by `dim/2`
/// cosine values over geometrically spaced frequencies.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let omega = |i: usize| 10_000f64.powf(-(i as f64) / half as f64);
    let mut out = Vec::with_capacity(2 * half);
    out.extend((0..half).map(|i| (t as f64 * omega(i)).sin()));
    out.extend((0..half).map(|i| (t as f64 * omega(i)).cos()));
    out
}

/// Per-channel affine in the normalized step tau: `w * tau + b`.
#[derive(Debug, Clone, Copy)]
struct TauAffine {
    w: ParamId,
    b: ParamId,
}

impl TauAffine {
    fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        bias: f64,
    ) -> Result<TauAffine> {
        let w = store.add(&format!("{name}.w"), vec_init(channels, 0.0))?;
        let b = store.add(&format!("{name}.b"), vec_init(channels, bias))?;
        Ok(TauAffine { w, b })
    }

    fn eval<S: Scalar>(&self, g: &mut Graph<S>, p: &[TensorId], tau: f64) -> Result<TensorId> {
        let scaled = g.scale(p[self.w.index()], tau)?;
        g.add(scaled, p[self.b.index()])
    }
}

/// Learned per-channel bias computed from the step embedding.
#[derive(Debug, Clone, Copy)]
struct TimeMod {
    w: ParamId,
    b: ParamId,
}

impl TimeMod {
    fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut RngState,
        name: &str,
        time_dim: usize,
        channels: usize,
    ) -> Result<TimeMod> {
        let w = store.add(&format!("{name}.time.w"), linear_init(rng, time_dim, channels))?;
        let b = store.add(&format!("{name}.time.b"), vec_init(channels, 0.0))?;
        Ok(TimeMod { w, b })
    }

    fn bias<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &[TensorId],
        emb: TensorId,
    ) -> Result<TensorId> {
        let m = g.matmul(emb, p[self.w.index()])?;
        let c = g.shape(m)[1];
        let flat = g.reshape(m, &[c])?;
        g.add(flat, p[self.b.index()])
    }
}

/// Step-conditioned binarization parameters of one block: the input
/// threshold (per input channel) and the two-slope activation's knee,
/// shift, and lower slope (per output channel).
#[derive(Debug, Clone, Copy)]
struct BinP {
    alpha: TauAffine,
    gamma: TauAffine,
    zeta: TauAffine,
    beta: TauAffine,
}

impl BinP {
    fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<BinP> {
        Ok(BinP {
            alpha: TauAffine::init(store, &format!("{name}.alpha"), cin, 0.0)?,
            gamma: TauAffine::init(store, &format!("{name}.gamma"), cout, 0.0)?,
            zeta: TauAffine::init(store, &format!("{name}.zeta"), cout, 0.0)?,
            beta: TauAffine::init(store, &format!("{name}.beta"), cout, 0.25)?,
        })
    }
}

/// Activation of a float block.
#[derive(Debug, Clone, Copy)]
enum Act {
    Silu,
    Linear,
}

/// One convolution block: float (conv, step bias, SiLU) or binarized
/// (threshold, packed ±1 conv, step bias, two-slope activation).
#[derive(Debug, Clone)]
struct Block {
    conv: ConvP,
    time: Option<TimeMod>,
    bin: Option<BinP>,
    pad: usize,
    act: Act,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut RngState,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        time_dim: Option<usize>,
        binarized: bool,
        act: Act,
    ) -> Result<Block> {
        let conv = ConvP::init(store, rng, name, cout, cin, k)?;
        let time = match time_dim {
            Some(dt) => Some(TimeMod::init(store, rng, name, dt, cout)?),
            None => None,
        };
        let bin = if binarized {
            Some(BinP::init(store, name, cin, cout)?)
        } else {
            None
        };
        Ok(Block { conv, time, bin, pad: k / 2, act })
    }

    fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &[TensorId],
        x: TensorId,
        emb: Option<TensorId>,
        tau: f64,
    ) -> Result<TensorId> {
        let (w, b) = (p[self.conv.w.index()], p[self.conv.b.index()]);
        let mut y = match &self.bin {
            Some(bp) => {
                let alpha = bp.alpha.eval(g, p, tau)?;
                g.bin_conv2d(x, w, alpha, b, self.pad)?
            }
            None => g.conv2d(x, w, b, self.pad)?,
        };
        match (&self.time, emb) {
            (Some(tm), Some(e)) => {
                let tb = tm.bias(g, p, e)?;
                y = g.add_bias(y, tb, 1)?;
            }
            (Some(_), None) => {
                return Err(Error::InvalidArg(
                    "step-conditioned block run without an embedding".into(),
                ));
            }
            (None, _) => {}
        }
        match &self.bin {
            Some(bp) => {
                let gamma = bp.gamma.eval(g, p, tau)?;
                let zeta = bp.zeta.eval(g, p, tau)?;
                let beta = bp.beta.eval(g, p, tau)?;
                g.ta_activate(y, gamma, zeta, beta)
            }
            None => match self.act {
                Act::Silu => g.silu(y),
                Act::Linear => Ok(y),
            },
        }
    }
}

/// One pre-norm cross-attention block with a feed-forward tail, both on
/// residual paths: `x = q + MHA(LN(q), LN(kv))`, `x = x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub(crate) struct CrossBlock {
    ln_q_g: ParamId,
    ln_q_b: ParamId,
    ln_kv_g: ParamId,
    ln_kv_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln_f_g: ParamId,
    ln_f_b: ParamId,
    ffn1_w: ParamId,
    ffn1_b: ParamId,
    ffn2_w: ParamId,
    ffn2_b: ParamId,
}

impl CrossBlock {
    pub(crate) fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut RngState,
        name: &str,
        dim: usize,
    ) -> Result<CrossBlock> {
        let add_vec = |store: &mut ParamStore<S>, suffix: &str, v: f64, len: usize| {
            store.add(&format!("{name}.{suffix}"), vec_init(len, v))
        };
        let ln_q_g = add_vec(store, "ln_q.g", 1.0, dim)?;
        let ln_q_b = add_vec(store, "ln_q.b", 0.0, dim)?;
        let ln_kv_g = add_vec(store, "ln_kv.g", 1.0, dim)?;
        let ln_kv_b = add_vec(store, "ln_kv.b", 0.0, dim)?;
        let wq = store.add(&format!("{name}.wq"), linear_init(rng, dim, dim))?;
        let wk = store.add(&format!("{name}.wk"), linear_init(rng, dim, dim))?;
        let wv = store.add(&format!("{name}.wv"), linear_init(rng, dim, dim))?;
        let wo = store.add(&format!("{name}.wo"), linear_init(rng, dim, dim))?;
        let ln_f_g = add_vec(store, "ln_f.g", 1.0, dim)?;
        let ln_f_b = add_vec(store, "ln_f.b", 0.0, dim)?;
        let ffn1_w = store.add(&format!("{name}.ffn1.w"), linear_init(rng, dim, 2 * dim))?;
        let ffn1_b = add_vec(store, "ffn1.b", 0.0, 2 * dim)?;
        let ffn2_w = store.add(&format!("{name}.ffn2.w"), linear_init(rng, 2 * dim, dim))?;
        let ffn2_b = add_vec(store, "ffn2.b", 0.0, dim)?;
        Ok(CrossBlock {
            ln_q_g,
            ln_q_b,
            ln_kv_g,
            ln_kv_b,
            wq,
            wk,
            wv,
            wo,
            ln_f_g,
            ln_f_b,
            ffn1_w,
            ffn1_b,
            ffn2_w,
            ffn2_b,
        })
    }

    /// Queries come from `q_tok`, keys and values from `kv_tok`; both are
    /// `(N, tokens, dim)`. Returns the block output and the attention
    /// probabilities `(N * heads, q_tokens, kv_tokens)`.
    pub(crate) fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &[TensorId],
        q_tok: TensorId,
        kv_tok: TensorId,
        heads: usize,
    ) -> Result<(TensorId, TensorId)> {
        let dim = *g.shape(q_tok).last().expect("token tensors are rank 3");
        let dh = dim / heads;

        let qn = g.layer_norm(q_tok, p[self.ln_q_g.index()], p[self.ln_q_b.index()])?;
        let kn = g.layer_norm(kv_tok, p[self.ln_kv_g.index()], p[self.ln_kv_b.index()])?;
        let q = tok_lin(g, qn, p[self.wq.index()])?;
        let k = tok_lin(g, kn, p[self.wk.index()])?;
        let v = tok_lin(g, kn, p[self.wv.index()])?;

        let qh = split_heads(g, q, heads)?;
        let kh = split_heads(g, k, heads)?;
        let vh = split_heads(g, v, heads)?;
        let logits = g.batch_matmul(qh, kh, true)?;
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(logits, 2)?;
        let ctx = g.batch_matmul(attn, vh, false)?;
        let n = g.shape(q_tok)[0];
        let merged = merge_heads(g, ctx, n, heads)?;
        let o = tok_lin(g, merged, p[self.wo.index()])?;
        let x = g.add(q_tok, o)?;

        let fn_in = g.layer_norm(x, p[self.ln_f_g.index()], p[self.ln_f_b.index()])?;
        let h1 = tok_lin(g, fn_in, p[self.ffn1_w.index()])?;
        let h1 = g.add_bias(h1, p[self.ffn1_b.index()], 2)?;
        let h1 = g.silu(h1)?;
        let h2 = tok_lin(g, h1, p[self.ffn2_w.index()])?;
        let h2 = g.add_bias(h2, p[self.ffn2_b.index()], 2)?;
        let out = g.add(x, h2)?;
        Ok((out, attn))
    }
}

/// Apply a `(cin, cout)` linear map to every token of `(N, tokens, cin)`.
fn tok_lin<S: Scalar>(g: &mut Graph<S>, x: TensorId, w: TensorId) -> Result<TensorId> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = g.matmul(flat, w)?;
    let cout = g.shape(y)[1];
    g.reshape(y, &[s[0], s[1], cout])
}

/// `(N, tokens, dim)` to `(N * heads, tokens, dim / heads)`.
fn split_heads<S: Scalar>(g: &mut Graph<S>, x: TensorId, heads: usize) -> Result<TensorId> {
    let s = g.shape(x).to_vec();
    let (n, t, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[n, t, heads, d / heads])?;
    let tr = g.transpose(r, &[0, 2, 1, 3])?;
    g.reshape(tr, &[n * heads, t, d / heads])
}

/// Inverse of [`split_heads`].
fn merge_heads<S: Scalar>(
    g: &mut Graph<S>,
    x: TensorId,
    n: usize,
    heads: usize,
) -> Result<TensorId> {
    let s = g.shape(x).to_vec();
    let (t, dh) = (s[1], s[2]);
    let r = g.reshape(x, &[n, heads, t, dh])?;
    let tr = g.transpose(r, &[0, 2, 1, 3])?;
    g.reshape(tr, &[n, t, heads * dh])
}

/// `(N, C, H, W)` feature map to `(N, H * W, C)` token matrix.
fn to_tokens<S: Scalar>(g: &mut Graph<S>, x: TensorId) -> Result<TensorId> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.transpose(r, &[0, 2, 1])
}

/// Inverse of [`to_tokens`] for a known spatial extent.
fn to_map<S: Scalar>(g: &mut Graph<S>, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
    let s = g.shape(x).to_vec();
    let tr = g.transpose(x, &[0, 2, 1])?;
    g.reshape(tr, &[s[0], s[2], h, w])
}

/// Output of the feature exchange: both features with their input shapes,
/// plus the two attention maps for inspection.
#[derive(Debug, Clone)]
pub struct XFormerOut {
    /// Exchanged segmentor feature, same shape as the input `f_d`.
    pub f_d: TensorId,
    /// Exchanged refiner feature, same shape as the input `f_p`.
    pub f_p: TensorId,
    /// Attention probabilities of the two blocks, `(N * heads, q, kv)`.
    pub attn: Vec<TensorId>,
}

/// Cross-attention exchange between the segmentor feature `f_d` and the
/// refiner bottleneck feature `f_p`. Block 1 refines `f_p` with queries
/// from it and keys/values from `f_d`; block 2 refines `f_d` against the
/// updated `f_p`. When the binarized flag is set, the four 1x1
/// projections are binarized blocks; attention itself stays float.
#[derive(Debug, Clone)]
pub struct XFormer {
    heads: usize,
    proj_d: Block,
    proj_p: Block,
    block_a: CrossBlock,
    block_b: CrossBlock,
    unproj_d: Block,
    unproj_p: Block,
}

impl XFormer {
    fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut RngState,
        cfg: &ModelCfg,
    ) -> Result<XFormer> {
        let (_, _, s3) = cfg.seg_widths();
        let rb = cfg.ref_bottleneck;
        let d = cfg.attn_dim;
        let bin = cfg.binarized;
        Ok(XFormer {
            heads: cfg.attn_heads,
            proj_d: Block::init(store, rng, "xf.proj_d", d, s3, 1, None, bin, Act::Linear)?,
            proj_p: Block::init(store, rng, "xf.proj_p", d, rb, 1, None, bin, Act::Linear)?,
            block_a: CrossBlock::init(store, rng, "xf.a", d)?,
            block_b: CrossBlock::init(store, rng, "xf.b", d)?,
            unproj_d: Block::init(store, rng, "xf.unproj_d", s3, d, 1, None, bin, Act::Linear)?,
            unproj_p: Block::init(store, rng, "xf.unproj_p", rb, d, 1, None, bin, Act::Linear)?,
        })
    }

    /// Exchange information between the two features. Either spatial grid
    /// may be coarser; the smaller one is bilinearly resized up for the
    /// exchange and back down afterwards, so output shapes always equal
    /// input shapes.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &[TensorId],
        f_d: TensorId,
        f_p: TensorId,
        tau: f64,
    ) -> Result<XFormerOut> {
        let (sd, sp) = (g.shape(f_d).to_vec(), g.shape(f_p).to_vec());
        if sd.len() != 4 || sp.len() != 4 || sd[0] != sp[0] {
            return Err(Error::InvalidArg(format!(
                "feature exchange expects two (N, C, H, W) batches, got {sd:?} and {sp:?}"
            )));
        }
        let d64 = self.proj_d.forward(g, p, f_d, None, tau)?;
        let p64 = self.proj_p.forward(g, p, f_p, None, tau)?;
        let (h, w) = (sd[2].max(sp[2]), sd[3].max(sp[3]));
        let d64 = resize_to(g, d64, h, w)?;
        let p64 = resize_to(g, p64, h, w)?;

        let d_tok = to_tokens(g, d64)?;
        let p_tok = to_tokens(g, p64)?;
        let (p_tok, attn_a) = self.block_a.forward(g, p, p_tok, d_tok, self.heads)?;
        let (d_tok, attn_b) = self.block_b.forward(g, p, d_tok, p_tok, self.heads)?;

        let d_map = to_map(g, d_tok, h, w)?;
        let p_map = to_map(g, p_tok, h, w)?;
        let d_map = resize_to(g, d_map, sd[2], sd[3])?;
        let p_map = resize_to(g, p_map, sp[2], sp[3])?;
        let f_d_out = self.unproj_d.forward(g, p, d_map, None, tau)?;
        let f_p_out = self.unproj_p.forward(g, p, p_map, None, tau)?;
        Ok(XFormerOut {
            f_d: f_d_out,
            f_p: f_p_out,
            attn: vec![attn_a, attn_b],
        })
    }
}

fn resize_to<S: Scalar>(
    g: &mut Graph<S>,
    x: TensorId,
    h: usize,
    w: usize,
) -> Result<TensorId> {
    let s = g.shape(x);
    if s[2] == h && s[3] == w {
        Ok(x)
    } else {
        g.resize_bilinear(x, h, w)
    }
}

/// Output of one refiner forward pass.
#[derive(Debug, Clone)]
pub struct RefinerOut {
    /// Predicted flip-noise probabilities, same shape as the noisy mask.
    pub eps_hat: TensorId,
    /// Refiner bottleneck feature before the exchange,
    /// `(N, ref_bottleneck, H/4, W/4)`.
    pub f_p: TensorId,
    /// Attention probabilities of the exchange blocks.
    pub attn: Vec<TensorId>,
}

/// Step-conditioned denoising network. Input is the noisy mask and the
/// prior mask; the segmentor's mid feature enters through the exchange at
/// the bottleneck. Output is the per-pixel flip-noise probability.
#[derive(Debug, Clone)]
pub struct Refiner {
    cfg: ModelCfg,
    enc1: Block,
    enc2: Block,
    bott1: Block,
    bott2: Block,
    xformer: XFormer,
    fuse: Block,
    up1: Block,
    up2: Block,
    out: ConvP,
    range: ParamRange,
}

impl Refiner {
    pub(super) fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut RngState,
        cfg: ModelCfg,
    ) -> Result<Refiner> {
        let (r1, r2, rb) = cfg.ref_widths();
        let (_, _, s3) = cfg.seg_widths();
        let c = cfg.classes;
        let dt = Some(cfg.time_dim);
        let bin = cfg.binarized;
        let start = store.len();
        let enc1 = Block::init(store, rng, "ref.enc1", r1, 2 * c, 3, dt, false, Act::Silu)?;
        let enc2 = Block::init(store, rng, "ref.enc2", r2, r1, 3, dt, bin, Act::Silu)?;
        let bott1 = Block::init(store, rng, "ref.bott1", rb, r2, 3, dt, bin, Act::Silu)?;
        let bott2 = Block::init(store, rng, "ref.bott2", rb, rb, 3, dt, bin, Act::Silu)?;
        let xformer = XFormer::init(store, rng, &cfg)?;
        let fuse = Block::init(store, rng, "ref.fuse", rb, rb + s3, 1, None, false, Act::Silu)?;
        let up1 = Block::init(store, rng, "ref.up1", r2, rb + r2, 3, dt, bin, Act::Silu)?;
        let up2 = Block::init(store, rng, "ref.up2", r1, r2 + r1, 3, dt, false, Act::Silu)?;
        let out = ConvP::init(store, rng, "ref.out", c, r1, 3)?;
        let range = ParamRange { start, end: store.len() };
        Ok(Refiner {
            cfg,
            enc1,
            enc2,
            bott1,
            bott2,
            xformer,
            fuse,
            up1,
            up2,
            out,
            range,
        })
    }

    pub fn cfg(&self) -> &ModelCfg {
        &self.cfg
    }

    /// Store indices of this network's parameters (exchange included).
    pub fn params(&self) -> ParamRange {
        self.range
    }

    /// The feature exchange, exposed for direct inspection.
    pub fn xformer(&self) -> &XFormer {
        &self.xformer
    }

    /// Denoise one step. `y_t` and `prior` are `(N, classes, H, W)` maps
    /// with H = W = configured size, `f_d` is the segmentor mid feature,
    /// and `t` is the diffusion step, `1 <= t <= diffusion_steps`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &[TensorId],
        y_t: TensorId,
        prior: TensorId,
        f_d: TensorId,
        t: usize,
    ) -> Result<RefinerOut> {
        let steps = self.cfg.diffusion_steps;
        if t < 1 || t > steps {
            return Err(Error::InvalidArg(format!(
                "diffusion step {t} outside 1..={steps}"
            )));
        }
        let size = self.cfg.image_size;
        for (name, id) in [("noisy mask", y_t), ("prior mask", prior)] {
            let s = g.shape(id);
            if s.len() != 4 || s[1] != self.cfg.classes || s[2] != size || s[3] != size {
                return Err(Error::InvalidArg(format!(
                    "refiner {name} has shape {s:?}, expected (N, {}, {size}, {size})",
                    self.cfg.classes
                )));
            }
        }
        let tau = t as f64 / steps as f64;
        let emb_values: Vec<S> = time_embedding(t, self.cfg.time_dim)
            .into_iter()
            .map(S::of)
            .collect();
        let emb = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, self.cfg.time_dim]), emb_values)
                .expect("embedding length matches time_dim"),
        )?;
        let emb = Some(emb);

        let x = g.concat(1, &[y_t, prior])?;
        let e1 = self.enc1.forward(g, p, x, emb, tau)?;
        let q1 = g.avg_pool2(e1)?;
        let e2 = self.enc2.forward(g, p, q1, emb, tau)?;
        let q2 = g.avg_pool2(e2)?;
        let b1 = self.bott1.forward(g, p, q2, emb, tau)?;
        let f_p = self.bott2.forward(g, p, b1, emb, tau)?;

        let exchanged = self.xformer.forward(g, p, f_d, f_p, tau)?;
        let cat = g.concat(1, &[exchanged.f_p, exchanged.f_d])?;
        let fused = self.fuse.forward(g, p, cat, None, tau)?;

        let u1 = g.upsample2(fused)?;
        let c1 = g.concat(1, &[u1, e2])?;
        let d1 = self.up1.forward(g, p, c1, emb, tau)?;
        let u2 = g.upsample2(d1)?;
        let c2 = g.concat(1, &[u2, e1])?;
        let d2 = self.up2.forward(g, p, c2, emb, tau)?;

        let logits = g.conv2d(d2, p[self.out.w.index()], p[self.out.b.index()], 1)?;
        let eps_hat = g.sigmoid(logits)?;
        Ok(RefinerOut {
            eps_hat,
            f_p,
            attn: exchanged.attn,
        })
    }
}
