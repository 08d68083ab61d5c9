//! Discriminative segmentor: a small three-level encoder–decoder that
//! maps an image to a per-pixel class-probability map (the prior mask)
//! and exposes its deepest feature for the cross-attention exchange.

use super::{ConvP, ModelCfg, ParamRange};
use crate::autodiff::{Graph, ParamStore, TensorId};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;

/// Encoder–decoder segmentor. All convolutions are 3x3 float with ReLU,
/// except the 1x1 head; downsampling is 2x2 mean pooling, upsampling is
/// nearest-neighbour.
#[derive(Debug, Clone)]
pub struct Segmentor {
    cfg: ModelCfg,
    enc1a: ConvP,
    enc1b: ConvP,
    enc2a: ConvP,
    enc2b: ConvP,
    mid_a: ConvP,
    mid_b: ConvP,
    dec1a: ConvP,
    dec1b: ConvP,
    dec2a: ConvP,
    dec2b: ConvP,
    head: ConvP,
    range: ParamRange,
}

impl Segmentor {
    pub(super) fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut RngState,
        cfg: ModelCfg,
    ) -> Result<Segmentor> {
        let (s1, s2, s3) = cfg.seg_widths();
        let cin = cfg.image_channels;
        let start = store.len();
        let enc1a = ConvP::init(store, rng, "seg.enc1a", s1, cin, 3)?;
        let enc1b = ConvP::init(store, rng, "seg.enc1b", s1, s1, 3)?;
        let enc2a = ConvP::init(store, rng, "seg.enc2a", s2, s1, 3)?;
        let enc2b = ConvP::init(store, rng, "seg.enc2b", s2, s2, 3)?;
        let mid_a = ConvP::init(store, rng, "seg.mid_a", s3, s2, 3)?;
        let mid_b = ConvP::init(store, rng, "seg.mid_b", s3, s3, 3)?;
        let dec1a = ConvP::init(store, rng, "seg.dec1a", s2, s3 + s2, 3)?;
        let dec1b = ConvP::init(store, rng, "seg.dec1b", s2, s2, 3)?;
        let dec2a = ConvP::init(store, rng, "seg.dec2a", s1, s2 + s1, 3)?;
        let dec2b = ConvP::init(store, rng, "seg.dec2b", s1, s1, 3)?;
        let head = ConvP::init(store, rng, "seg.head", cfg.classes, s1, 1)?;
        let range = ParamRange { start, end: store.len() };
        Ok(Segmentor {
            cfg,
            enc1a,
            enc1b,
            enc2a,
            enc2b,
            mid_a,
            mid_b,
            dec1a,
            dec1b,
            dec2a,
            dec2b,
            head,
            range,
        })
    }

    pub fn cfg(&self) -> &ModelCfg {
        &self.cfg
    }

    /// Store indices of this network's parameters.
    pub fn params(&self) -> ParamRange {
        self.range
    }

    fn conv_relu<S: Scalar>(
        g: &mut Graph<S>,
        p: &[TensorId],
        layer: ConvP,
        x: TensorId,
        pad: usize,
    ) -> Result<TensorId> {
        let y = g.conv2d(x, p[layer.w.index()], p[layer.b.index()], pad)?;
        g.relu(y)
    }

    /// Run the network on an image batch `(N, image_channels, H, W)` with
    /// H = W = configured size. Returns the prior probability map
    /// `(N, classes, H, W)` and the mid feature `(N, 3*seg_base, H/4, W/4)`.
    ///
    /// With one class the head is a sigmoid (foreground probability);
    /// otherwise it is a channel softmax whose channel 0 is background.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &[TensorId],
        image: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let shape = g.shape(image).to_vec();
        let size = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != self.cfg.image_channels || shape[2] != size || shape[3] != size {
            return Err(Error::ShapeMismatch {
                ctx: "segmentor input",
                expected: vec![shape.first().copied().unwrap_or(1), self.cfg.image_channels, size, size],
                got: shape,
            });
        }

        let e1 = Self::conv_relu(g, p, self.enc1a, image, 1)?;
        let e1 = Self::conv_relu(g, p, self.enc1b, e1, 1)?;
        let d1 = g.avg_pool2(e1)?;
        let e2 = Self::conv_relu(g, p, self.enc2a, d1, 1)?;
        let e2 = Self::conv_relu(g, p, self.enc2b, e2, 1)?;
        let d2 = g.avg_pool2(e2)?;
        let m = Self::conv_relu(g, p, self.mid_a, d2, 1)?;
        let f_d = Self::conv_relu(g, p, self.mid_b, m, 1)?;

        let u1 = g.upsample2(f_d)?;
        let c1 = g.concat(1, &[u1, e2])?;
        let x1 = Self::conv_relu(g, p, self.dec1a, c1, 1)?;
        let x1 = Self::conv_relu(g, p, self.dec1b, x1, 1)?;
        let u2 = g.upsample2(x1)?;
        let c2 = g.concat(1, &[u2, e1])?;
        let x2 = Self::conv_relu(g, p, self.dec2a, c2, 1)?;
        let x2 = Self::conv_relu(g, p, self.dec2b, x2, 1)?;

        let logits = g.conv2d(x2, p[self.head.w.index()], p[self.head.b.index()], 0)?;
        let prior = if self.cfg.classes == 1 {
            g.sigmoid(logits)?
        } else {
            g.softmax(logits, 1)?
        };
        Ok((prior, f_d))
    }
}
