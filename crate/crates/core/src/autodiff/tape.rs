//! Reverse-mode differentiation on a flat tape.
//!
//! A [`Graph`] records one forward computation as a sequence of primitive
//! ops over n-d arrays; node handles are [`TensorId`]s indexing the tape.
//! [`Graph::backward`] walks the tape once in reverse, accumulating
//! gradients for every node that (transitively) requires them. A graph is
//! built, evaluated, differentiated and dropped per training step;
//! parameters live outside and enter as leaves.
//!
//! Every op validates operand shapes and fails on non-finite outputs.
//! Convolution is im2col + matrix product; the binarized variant routes the
//! product through the bit-packed XNOR path and backpropagates with the
//! straight-through estimator (clip window 1 around the binarization
//! threshold, weight-scale factors treated as constants).

use crate::bitops;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, ArrayD, Axis, IxDyn};

/// Handle to one node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Neg(TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Abs(TensorId),
    Ln(TensorId),
    PowConst(TensorId, f64),
    Clamp(TensorId, f64, f64),
    Relu(TensorId),
    Silu(TensorId),
    Sigmoid(TensorId),
    Softmax(TensorId, usize),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    AddBias {
        x: TensorId,
        b: TensorId,
        axis: usize,
    },
    Matmul(TensorId, TensorId),
    BatchMatmul {
        a: TensorId,
        b: TensorId,
        transpose_b: bool,
    },
    Transpose(TensorId, Vec<usize>),
    Reshape(TensorId),
    Concat {
        axis: usize,
        parts: Vec<TensorId>,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        pad: usize,
    },
    BinConv2d {
        x: TensorId,
        w: TensorId,
        alpha: TensorId,
        b: TensorId,
        pad: usize,
    },
    TbBinarize {
        x: TensorId,
        alpha: TensorId,
    },
    TaActivate {
        x: TensorId,
        gamma: TensorId,
        zeta: TensorId,
        beta: TensorId,
    },
    AvgPool2(TensorId),
    Upsample2(TensorId),
    ResizeBilinear(TensorId),
    SpatialSum(TensorId),
    Mean(TensorId),
}

/// Per-output-index source pair and interpolation weight for a bilinear
/// resize with half-pixel-centre sampling, edges clamped.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// One recorded forward computation.
pub struct Graph<S: Scalar> {
    values: Vec<ArrayD<S>>,
    grads: Vec<Option<ArrayD<S>>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
}

fn ensure_finite<S: Scalar>(op: &'static str, arr: &ArrayD<S>) -> Result<()> {
    if arr.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(ctx: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            ctx,
            expected: a.to_vec(),
            got: b.to_vec(),
        })
    }
}

/// Unfold `(N, C, H, W)` into patch rows `(N * Ho * Wo, C * k * k)` for a
/// stride-1 convolution with a `pad`-wide border of `fill` values. The
/// float path pads with zero; the binarized path pads with -1, the
/// binarization of an inactive input.
fn im2col<S: Scalar>(x: &ArrayD<S>, k: usize, pad: usize, fill: S) -> Array2<S> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut cols = Array2::<S>::from_elem((n * ho * wo, c * k * k), fill);
    for ni in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let row = (ni * ho + i) * wo + j;
                for ci in 0..c {
                    for dy in 0..k {
                        let sy = (i + dy) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = (j + dx) as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            cols[(row, (ci * k + dy) * k + dx)] =
                                x[[ni, ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch-row gradients back onto the input grid; adjoint of [`im2col`].
fn col2im<S: Scalar>(
    cols: &Array2<S>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> ArrayD<S> {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut x = ArrayD::<S>::zeros(IxDyn(&[n, c, h, w]));
    for ni in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let row = (ni * ho + i) * wo + j;
                for ci in 0..c {
                    for dy in 0..k {
                        let sy = (i + dy) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = (j + dx) as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            x[[ni, ci, sy as usize, sx as usize]] +=
                                cols[(row, (ci * k + dy) * k + dx)];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(N*Ho*Wo, Cout)` rows to `(N, Cout, Ho, Wo)`.
fn rows_to_nchw<S: Scalar>(rows: &Array2<S>, n: usize, ho: usize, wo: usize) -> ArrayD<S> {
    let cout = rows.ncols();
    let mut out = ArrayD::<S>::zeros(IxDyn(&[n, cout, ho, wo]));
    for ni in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let row = (ni * ho + i) * wo + j;
                for co in 0..cout {
                    out[[ni, co, i, j]] = rows[(row, co)];
                }
            }
        }
    }
    out
}

/// Inverse of [`rows_to_nchw`].
fn nchw_to_rows<S: Scalar>(x: &ArrayD<S>) -> Array2<S> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut rows = Array2::<S>::zeros((n * h * w, c));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let row = (ni * h + i) * w + j;
                for co in 0..c {
                    rows[(row, co)] = x[[ni, co, i, j]];
                }
            }
        }
    }
    rows
}

fn as_2d<S: Scalar>(a: &ArrayD<S>) -> Array2<S> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d operand")
        .to_owned()
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<S>, op: Op, requires: bool) -> TensorId {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        TensorId(self.values.len() - 1)
    }

    fn rg(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|i| self.requires[i.0])
    }

    /// Record an input; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: ArrayD<S>, requires_grad: bool) -> Result<TensorId> {
        ensure_finite("leaf", &value)?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Record a constant input.
    pub fn constant(&mut self, value: ArrayD<S>) -> Result<TensorId> {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<S> {
        &self.values[id.0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&ArrayD<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.values[id.0].shape()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> Result<S> {
        let v = &self.values[id.0];
        if v.len() != 1 {
            return Err(Error::InvalidArg(format!(
                "scalar_value on tensor of {} elements",
                v.len()
            )));
        }
        Ok(*v.iter().next().expect("one element"))
    }

    fn finish(&mut self, op: &'static str, value: ArrayD<S>, node: Op, inputs: &[TensorId]) -> Result<TensorId> {
        ensure_finite(op, &value)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, node, rg))
    }

    // ----- elementwise binary -----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let v = &self.values[a.0] + &self.values[b.0];
        self.finish("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let v = &self.values[a.0] - &self.values[b.0];
        self.finish("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let v = &self.values[a.0] * &self.values[b.0];
        self.finish("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        same_shape("div", self.shape(a), self.shape(b))?;
        let v = &self.values[a.0] / &self.values[b.0];
        self.finish("div", v, Op::Div(a, b), &[a, b])
    }

    // ----- elementwise unary -----

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.values[a.0].mapv(|x| -x);
        self.finish("neg", v, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let cs = S::of(c);
        let v = self.values[a.0].mapv(|x| x * cs);
        self.finish("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let cs = S::of(c);
        let v = self.values[a.0].mapv(|x| x + cs);
        self.finish("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.values[a.0].mapv(|x| x.abs());
        self.finish("abs", v, Op::Abs(a), &[a])
    }

    pub fn ln(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.values[a.0].mapv(|x| x.ln());
        self.finish("ln", v, Op::Ln(a), &[a])
    }

    pub fn pow_const(&mut self, a: TensorId, p: f64) -> Result<TensorId> {
        let ps = S::of(p);
        let v = self.values[a.0].mapv(|x| x.powf(ps));
        self.finish("pow_const", v, Op::PowConst(a, p), &[a])
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if !(lo <= hi) {
            return Err(Error::InvalidArg(format!("clamp bounds [{lo}, {hi}]")));
        }
        let (l, h) = (S::of(lo), S::of(hi));
        let v = self.values[a.0].mapv(|x| x.max(l).min(h));
        self.finish("clamp", v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.values[a.0].mapv(|x| x.max(S::zero()));
        self.finish("relu", v, Op::Relu(a), &[a])
    }

    pub fn silu(&mut self, a: TensorId) -> Result<TensorId> {
        let one = S::one();
        let v = self.values[a.0].mapv(|x| x / (one + (-x).exp()));
        self.finish("silu", v, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let one = S::one();
        let v = self.values[a.0].mapv(|x| one / (one + (-x).exp()));
        self.finish("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    // ----- structured -----

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        if axis >= self.shape(a).len() {
            return Err(Error::InvalidArg(format!(
                "softmax axis {axis} out of range for rank {}",
                self.shape(a).len()
            )));
        }
        let mut v = self.values[a.0].clone();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let m = lane.iter().fold(S::neg_infinity(), |acc, &x| acc.max(x));
            lane.mapv_inplace(|x| (x - m).exp());
            let s: S = lane.iter().copied().sum();
            lane.mapv_inplace(|x| x / s);
        }
        self.finish("softmax", v, Op::Softmax(a, axis), &[a])
    }

    /// Layer normalization over the last axis with per-feature affine
    /// parameters; `gamma` and `beta` have the last-axis extent.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::InvalidArg("layer_norm on 0-d".into()))?;
        same_shape("layer_norm gamma", &[c], self.shape(gamma))?;
        same_shape("layer_norm beta", &[c], self.shape(beta))?;
        let eps = S::of(1e-5);
        let gamma_v = self.values[gamma.0].clone();
        let beta_v = self.values[beta.0].clone();
        let mut v = self.values[x.0].clone();
        let last = shape.len() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let n = S::of_usize(lane.len());
            let mean: S = lane.iter().copied().sum::<S>() / n;
            let var: S = lane.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
            let inv = (var + eps).sqrt().recip();
            for (i, x) in lane.iter_mut().enumerate() {
                *x = (*x - mean) * inv * gamma_v[[i]] + beta_v[[i]];
            }
        }
        self.finish("layer_norm", v, Op::LayerNorm { x, gamma, beta }, &[x, gamma, beta])
    }

    /// Broadcast-add a `(C,)` bias along `axis` of `x`.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArg(format!("add_bias axis {axis} out of range")));
        }
        same_shape("add_bias", &[shape[axis]], self.shape(b))?;
        let bv = self.values[b.0].clone();
        let mut v = self.values[x.0].clone();
        for (i, mut sub) in v.axis_iter_mut(Axis(axis)).enumerate() {
            let bi = bv[[i]];
            sub.mapv_inplace(|x| x + bi);
        }
        self.finish("add_bias", v, Op::AddBias { x, b, axis }, &[x, b])
    }

    /// `(M, K) x (K, N)` product.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                ctx: "matmul",
                expected: sa,
                got: sb,
            });
        }
        let av = as_2d(&self.values[a.0]);
        let bv = as_2d(&self.values[b.0]);
        let v = av.dot(&bv).into_dyn();
        self.finish("matmul", v, Op::Matmul(a, b), &[a, b])
    }

    /// Batched product over leading axis: `(B, M, K) x (B, K, N)`, or
    /// `(B, M, K) x (B, N, K)` with `transpose_b`.
    pub fn batch_matmul(&mut self, a: TensorId, b: TensorId, transpose_b: bool) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::ShapeMismatch {
                ctx: "batch_matmul",
                expected: sa,
                got: sb,
            });
        }
        let bsz = sa[0];
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut v = ArrayD::<S>::zeros(IxDyn(&[bsz, sa[1], n]));
        for i in 0..bsz {
            let ai = self.values[a.0]
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .expect("3-d operand")
                .to_owned();
            let bi = self.values[b.0]
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .expect("3-d operand")
                .to_owned();
            let prod = if transpose_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
            v.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.finish(
            "batch_matmul",
            v,
            Op::BatchMatmul { a, b, transpose_b },
            &[a, b],
        )
    }

    pub fn transpose(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArg(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let v = self.values[a.0]
            .view()
            .permuted_axes(IxDyn(perm))
            .to_owned();
        self.finish("transpose", v, Op::Transpose(a, perm.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.values[a.0].len() {
            return Err(Error::ShapeMismatch {
                ctx: "reshape",
                expected: self.shape(a).to_vec(),
                got: shape.to_vec(),
            });
        }
        let flat: Vec<S> = self.values[a.0].iter().copied().collect();
        let v = ArrayD::from_shape_vec(IxDyn(shape), flat).expect("length checked");
        self.finish("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat of zero tensors".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| Error::InvalidArg(format!("concat: {e}")))?;
        self.finish(
            "concat",
            v,
            Op::Concat { axis, parts: parts.to_vec() },
            parts,
        )
    }

    /// Stride-1 `k x k` convolution with `pad` border zeros:
    /// `(N, Cin, H, W) * (Cout, Cin, k, k) + (Cout,)`.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId, pad: usize) -> Result<TensorId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                ctx: "conv2d",
                expected: sx,
                got: sw,
            });
        }
        same_shape("conv2d bias", &[sw[0]], self.shape(b))?;
        let k = sw[2];
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(Error::InvalidArg(format!(
                "conv2d kernel {k} exceeds padded input {:?}",
                &sx[2..]
            )));
        }
        let (n, ho, wo) = (sx[0], sx[2] + 2 * pad + 1 - k, sx[3] + 2 * pad + 1 - k);
        let cols = im2col(&self.values[x.0], k, pad, S::zero());
        let wmat = as_2d(
            &self.values[w.0]
                .view()
                .into_shape_with_order(IxDyn(&[sw[0], sw[1] * k * k]))
                .expect("contiguous weight")
                .to_owned(),
        );
        let rows = cols.dot(&wmat.t());
        let mut v = rows_to_nchw(&rows, n, ho, wo);
        let bv = self.values[b.0].clone();
        for (i, mut sub) in v.axis_iter_mut(Axis(1)).enumerate() {
            let bi = bv[[i]];
            sub.mapv_inplace(|x| x + bi);
        }
        self.finish("conv2d", v, Op::Conv2d { x, w, b, pad }, &[x, w, b])
    }

    /// Binarized convolution: inputs are binarized channel-wise against the
    /// `alpha` thresholds, weights by sign with a per-output-channel scale
    /// `mean |W|`, and the patch product runs on the bit-packed XNOR path.
    /// Border padding is -1, the binarization of an inactive input — a ±1
    /// convolution has no zero to pad with. Backward uses the
    /// straight-through estimator for both binarizations (clip window 1)
    /// and treats the scales as constants.
    pub fn bin_conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        alpha: TensorId,
        b: TensorId,
        pad: usize,
    ) -> Result<TensorId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                ctx: "bin_conv2d",
                expected: sx,
                got: sw,
            });
        }
        same_shape("bin_conv2d alpha", &[sx[1]], self.shape(alpha))?;
        same_shape("bin_conv2d bias", &[sw[0]], self.shape(b))?;
        let k = sw[2];
        let (n, ho, wo) = (sx[0], sx[2] + 2 * pad + 1 - k, sx[3] + 2 * pad + 1 - k);
        let (xb, wsign, kappa) = self.binarize_operands(x, w, alpha);
        // Bit-packed product of the ±1 operands.
        let cols = im2col(&xb, k, pad, -S::one());
        let wmat = as_2d(
            &wsign
                .view()
                .into_shape_with_order(IxDyn(&[sw[0], sw[1] * k * k]))
                .expect("contiguous weight")
                .to_owned(),
        );
        let pa = bitops::pack(cols.view())?;
        let pb = bitops::pack(wmat.view())?;
        let prod = bitops::xnor_gemm(&pa, &pb)?;
        let mut rows = Array2::<S>::zeros(prod.dim());
        for ((i, j), &p) in prod.indexed_iter() {
            rows[(i, j)] = S::of(p as f64) * kappa[j];
        }
        let mut v = rows_to_nchw(&rows, n, ho, wo);
        let bv = self.values[b.0].clone();
        for (i, mut sub) in v.axis_iter_mut(Axis(1)).enumerate() {
            let bi = bv[[i]];
            sub.mapv_inplace(|x| x + bi);
        }
        self.finish(
            "bin_conv2d",
            v,
            Op::BinConv2d { x, w, alpha, b, pad },
            &[x, w, alpha, b],
        )
    }

    /// Shared forward pieces of the binarized conv: ±1 input, ±1 weight
    /// sign, per-output-channel scale `mean |W|`.
    fn binarize_operands(
        &self,
        x: TensorId,
        w: TensorId,
        alpha: TensorId,
    ) -> (ArrayD<S>, ArrayD<S>, Vec<S>) {
        let xv = &self.values[x.0];
        let av = &self.values[alpha.0];
        let mut xb = xv.clone();
        for (c, mut sub) in xb.axis_iter_mut(Axis(1)).enumerate() {
            let t = av[[c]];
            sub.mapv_inplace(|u| if u > t { S::one() } else { -S::one() });
        }
        let wv = &self.values[w.0];
        let wsign = wv.mapv(|u| if u >= S::zero() { S::one() } else { -S::one() });
        let cout = wv.shape()[0];
        let per = wv.len() / cout;
        let mut kappa = Vec::with_capacity(cout);
        for c in 0..cout {
            let s: S = wv
                .index_axis(Axis(0), c)
                .iter()
                .map(|v| v.abs())
                .sum();
            kappa.push(s / S::of_usize(per));
        }
        (xb, wsign, kappa)
    }

    /// Channel-wise binarization: `+1` iff `x > alpha_c`, else `-1`;
    /// straight-through backward with clip window 1 (gradients flow to both
    /// the input and the thresholds).
    pub fn tb_binarize(&mut self, x: TensorId, alpha: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::InvalidArg("tb_binarize expects (N, C, H, W)".into()));
        }
        same_shape("tb_binarize alpha", &[sx[1]], self.shape(alpha))?;
        let av = self.values[alpha.0].clone();
        let mut v = self.values[x.0].clone();
        for (c, mut sub) in v.axis_iter_mut(Axis(1)).enumerate() {
            let t = av[[c]];
            sub.mapv_inplace(|u| if u > t { S::one() } else { -S::one() });
        }
        self.finish("tb_binarize", v, Op::TbBinarize { x, alpha }, &[x, alpha])
    }

    /// Piecewise-linear time-conditioned activation over `(N, C, H, W)`:
    /// upper branch `x - gamma_c + zeta_c` when `x > gamma_c`, lower branch
    /// `beta_c (x - gamma_c) + zeta_c` otherwise.
    pub fn ta_activate(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        zeta: TensorId,
        beta: TensorId,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::InvalidArg("ta_activate expects (N, C, H, W)".into()));
        }
        for (name, id) in [("gamma", gamma), ("zeta", zeta), ("beta", beta)] {
            if self.shape(id) != [sx[1]] {
                return Err(Error::InvalidArg(format!(
                    "ta_activate {name} must have shape [{}], got {:?}",
                    sx[1],
                    self.shape(id)
                )));
            }
        }
        let gv = self.values[gamma.0].clone();
        let zv = self.values[zeta.0].clone();
        let bv = self.values[beta.0].clone();
        let mut v = self.values[x.0].clone();
        for (c, mut sub) in v.axis_iter_mut(Axis(1)).enumerate() {
            let (g, z, be) = (gv[[c]], zv[[c]], bv[[c]]);
            sub.mapv_inplace(|u| {
                let d = u - g;
                if d > S::zero() {
                    d + z
                } else {
                    be * d + z
                }
            });
        }
        self.finish(
            "ta_activate",
            v,
            Op::TaActivate { x, gamma, zeta, beta },
            &[x, gamma, zeta, beta],
        )
    }

    /// 2x2 stride-2 average pooling; extents must be even.
    pub fn avg_pool2(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::InvalidArg(format!("avg_pool2 on shape {s:?}")));
        }
        let x = &self.values[a.0];
        let quarter = S::of(0.25);
        let mut v = ArrayD::<S>::zeros(IxDyn(&[s[0], s[1], s[2] / 2, s[3] / 2]));
        for n in 0..s[0] {
            for c in 0..s[1] {
                for i in 0..s[2] / 2 {
                    for j in 0..s[3] / 2 {
                        let sum = x[[n, c, 2 * i, 2 * j]]
                            + x[[n, c, 2 * i, 2 * j + 1]]
                            + x[[n, c, 2 * i + 1, 2 * j]]
                            + x[[n, c, 2 * i + 1, 2 * j + 1]];
                        v[[n, c, i, j]] = sum * quarter;
                    }
                }
            }
        }
        self.finish("avg_pool2", v, Op::AvgPool2(a), &[a])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidArg(format!("upsample2 on shape {s:?}")));
        }
        let x = &self.values[a.0];
        let mut v = ArrayD::<S>::zeros(IxDyn(&[s[0], s[1], s[2] * 2, s[3] * 2]));
        for n in 0..s[0] {
            for c in 0..s[1] {
                for i in 0..s[2] * 2 {
                    for j in 0..s[3] * 2 {
                        v[[n, c, i, j]] = x[[n, c, i / 2, j / 2]];
                    }
                }
            }
        }
        self.finish("upsample2", v, Op::Upsample2(a), &[a])
    }

    /// Bilinear spatial resampling of `(N, C, H, W)` to `(N, C, out_h,
    /// out_w)`, sampling at half-pixel centres with clamped edges. Equal
    /// sizes copy the input exactly.
    pub fn resize_bilinear(&mut self, a: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArg(format!(
                "resize_bilinear of shape {s:?} to ({out_h}, {out_w})"
            )));
        }
        let x = &self.values[a.0];
        let taps_y = resize_taps(s[2], out_h);
        let taps_x = resize_taps(s[3], out_w);
        let mut v = ArrayD::<S>::zeros(IxDyn(&[s[0], s[1], out_h, out_w]));
        for n in 0..s[0] {
            for c in 0..s[1] {
                for (i, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                    for (j, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                        let (wy, wx) = (S::of(wy), S::of(wx));
                        let one = S::one();
                        v[[n, c, i, j]] = (one - wy) * (one - wx) * x[[n, c, y0, x0]]
                            + (one - wy) * wx * x[[n, c, y0, x1]]
                            + wy * (one - wx) * x[[n, c, y1, x0]]
                            + wy * wx * x[[n, c, y1, x1]];
                    }
                }
            }
        }
        self.finish("resize_bilinear", v, Op::ResizeBilinear(a), &[a])
    }

    /// Sum over the spatial axes: `(N, C, H, W)` to `(N, C)`.
    pub fn spatial_sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidArg(format!("spatial_sum on shape {s:?}")));
        }
        let x = &self.values[a.0];
        let mut v = ArrayD::<S>::zeros(IxDyn(&[s[0], s[1]]));
        for n in 0..s[0] {
            for c in 0..s[1] {
                let mut sum = S::zero();
                for i in 0..s[2] {
                    for j in 0..s[3] {
                        sum += x[[n, c, i, j]];
                    }
                }
                v[[n, c]] = sum;
            }
        }
        self.finish("spatial_sum", v, Op::SpatialSum(a), &[a])
    }

    /// Mean of all elements, as a 0-d tensor.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let x = &self.values[a.0];
        if x.is_empty() {
            return Err(Error::InvalidArg("mean of empty tensor".into()));
        }
        let m: S = x.iter().copied().sum::<S>() / S::of_usize(x.len());
        let v = ArrayD::from_elem(IxDyn(&[]), m);
        self.finish("mean", v, Op::Mean(a), &[a])
    }

    // ----- backward -----

    fn acc(&mut self, id: TensorId, delta: ArrayD<S>) {
        if !self.requires[id.0] {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Accumulate gradients of `loss` (a single-element tensor) into every
    /// node that requires them.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward target has {} elements, expected 1",
                self.values[loss.0].len()
            )));
        }
        if !self.requires[loss.0] {
            return Err(Error::InvalidArg(
                "backward target does not depend on any differentiation target".into(),
            ));
        }
        let seed_shape = self.values[loss.0].raw_dim();
        self.grads[loss.0] = Some(ArrayD::from_elem(seed_shape, S::one()));

        for i in (0..self.ops.len()).rev() {
            if self.grads[i].is_none() || !self.requires[i] {
                continue;
            }
            let gy = self.grads[i].clone().expect("present");
            let op = self.ops[i].clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.acc(a, gy.clone());
                    self.acc(b, gy);
                }
                Op::Sub(a, b) => {
                    self.acc(a, gy.clone());
                    self.acc(b, gy.mapv(|g| -g));
                }
                Op::Mul(a, b) => {
                    let da = &gy * &self.values[b.0];
                    let db = &gy * &self.values[a.0];
                    self.acc(a, da);
                    self.acc(b, db);
                }
                Op::Div(a, b) => {
                    let bv = self.values[b.0].clone();
                    let da = &gy / &bv;
                    let db = {
                        let av = &self.values[a.0];
                        let mut d = &gy * av;
                        d.zip_mut_with(&bv, |g, &b| *g = -*g / (b * b));
                        d
                    };
                    self.acc(a, da);
                    self.acc(b, db);
                }
                Op::Neg(a) => self.acc(a, gy.mapv(|g| -g)),
                Op::Scale(a, c) => {
                    let cs = S::of(c);
                    self.acc(a, gy.mapv(|g| g * cs));
                }
                Op::AddScalar(a) => self.acc(a, gy),
                Op::Abs(a) => {
                    let mut d = gy;
                    d.zip_mut_with(&self.values[a.0], |g, &x| {
                        *g = if x > S::zero() {
                            *g
                        } else if x < S::zero() {
                            -*g
                        } else {
                            S::zero()
                        }
                    });
                    self.acc(a, d);
                }
                Op::Ln(a) => {
                    let d = &gy / &self.values[a.0];
                    self.acc(a, d);
                }
                Op::PowConst(a, p) => {
                    if p == 0.0 {
                        continue;
                    }
                    let ps = S::of(p);
                    let mut d = gy;
                    d.zip_mut_with(&self.values[a.0], |g, &x| {
                        *g = *g * ps * x.powf(ps - S::one())
                    });
                    self.acc(a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let (l, h) = (S::of(lo), S::of(hi));
                    let mut d = gy;
                    d.zip_mut_with(&self.values[a.0], |g, &x| {
                        if x < l || x > h {
                            *g = S::zero()
                        }
                    });
                    self.acc(a, d);
                }
                Op::Relu(a) => {
                    let mut d = gy;
                    d.zip_mut_with(&self.values[a.0], |g, &x| {
                        if x <= S::zero() {
                            *g = S::zero()
                        }
                    });
                    self.acc(a, d);
                }
                Op::Silu(a) => {
                    let one = S::one();
                    let mut d = gy;
                    d.zip_mut_with(&self.values[a.0], |g, &x| {
                        let s = one / (one + (-x).exp());
                        *g = *g * (s + x * s * (one - s));
                    });
                    self.acc(a, d);
                }
                Op::Sigmoid(a) => {
                    let one = S::one();
                    let mut d = gy;
                    d.zip_mut_with(&self.values[i], |g, &y| *g = *g * y * (one - y));
                    self.acc(a, d);
                }
                Op::Softmax(a, axis) => {
                    let y = self.values[i].clone();
                    let mut d = gy;
                    {
                        let dl = d.lanes_mut(Axis(axis));
                        let yl = y.lanes(Axis(axis));
                        for (mut dv, yv) in dl.into_iter().zip(yl.into_iter()) {
                            let dot: S = dv.iter().zip(yv.iter()).map(|(&g, &p)| g * p).sum();
                            for (g, &p) in dv.iter_mut().zip(yv.iter()) {
                                *g = (*g - dot) * p;
                            }
                        }
                    }
                    self.acc(a, d);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = self.values[x.0].clone();
                    let gv = self.values[gamma.0].clone();
                    let last = xv.ndim() - 1;
                    let c = xv.shape()[last];
                    let eps = S::of(1e-5);
                    let mut dx = ArrayD::<S>::zeros(xv.raw_dim());
                    let mut dgamma = ArrayD::<S>::zeros(IxDyn(&[c]));
                    let mut dbeta = ArrayD::<S>::zeros(IxDyn(&[c]));
                    {
                        let xl = xv.lanes(Axis(last));
                        let gl = gy.lanes(Axis(last));
                        let dxl = dx.lanes_mut(Axis(last));
                        for ((xv, gyv), mut dxv) in
                            xl.into_iter().zip(gl.into_iter()).zip(dxl.into_iter())
                        {
                            let n = S::of_usize(c);
                            let mean: S = xv.iter().copied().sum::<S>() / n;
                            let var: S =
                                xv.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
                            let inv = (var + eps).sqrt().recip();
                            // dy through the affine, then the normalizer.
                            let mut sum_d = S::zero();
                            let mut sum_dxhat = S::zero();
                            for k in 0..c {
                                let xhat = (xv[k] - mean) * inv;
                                let dyk = gyv[k] * gv[[k]];
                                sum_d += dyk;
                                sum_dxhat += dyk * xhat;
                                dgamma[[k]] += gyv[k] * xhat;
                                dbeta[[k]] += gyv[k];
                            }
                            for k in 0..c {
                                let xhat = (xv[k] - mean) * inv;
                                let dyk = gyv[k] * gv[[k]];
                                dxv[k] = (dyk - sum_d / n - xhat * sum_dxhat / n) * inv;
                            }
                        }
                    }
                    self.acc(x, dx);
                    self.acc(gamma, dgamma);
                    self.acc(beta, dbeta);
                }
                Op::AddBias { x, b, axis } => {
                    let c = self.shape(b)[0];
                    let mut db = ArrayD::<S>::zeros(IxDyn(&[c]));
                    for (i, sub) in gy.axis_iter(Axis(axis)).enumerate() {
                        db[[i]] = sub.iter().copied().sum();
                    }
                    self.acc(x, gy);
                    self.acc(b, db);
                }
                Op::Matmul(a, b) => {
                    let g2 = as_2d(&gy);
                    let av = as_2d(&self.values[a.0]);
                    let bv = as_2d(&self.values[b.0]);
                    self.acc(a, g2.dot(&bv.t()).into_dyn());
                    self.acc(b, av.t().dot(&g2).into_dyn());
                }
                Op::BatchMatmul { a, b, transpose_b } => {
                    let bsz = self.shape(a)[0];
                    let mut da = ArrayD::<S>::zeros(self.values[a.0].raw_dim());
                    let mut db = ArrayD::<S>::zeros(self.values[b.0].raw_dim());
                    for bi in 0..bsz {
                        let gi = gy
                            .index_axis(Axis(0), bi)
                            .into_dimensionality::<ndarray::Ix2>()
                            .expect("3-d")
                            .to_owned();
                        let ai = self.values[a.0]
                            .index_axis(Axis(0), bi)
                            .into_dimensionality::<ndarray::Ix2>()
                            .expect("3-d")
                            .to_owned();
                        let bv = self.values[b.0]
                            .index_axis(Axis(0), bi)
                            .into_dimensionality::<ndarray::Ix2>()
                            .expect("3-d")
                            .to_owned();
                        if transpose_b {
                            da.index_axis_mut(Axis(0), bi).assign(&gi.dot(&bv));
                            db.index_axis_mut(Axis(0), bi).assign(&gi.t().dot(&ai));
                        } else {
                            da.index_axis_mut(Axis(0), bi).assign(&gi.dot(&bv.t()));
                            db.index_axis_mut(Axis(0), bi).assign(&ai.t().dot(&gi));
                        }
                    }
                    self.acc(a, da);
                    self.acc(b, db);
                }
                Op::Transpose(a, perm) => {
                    let mut inverse = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let d = gy.view().permuted_axes(IxDyn(&inverse)).to_owned();
                    self.acc(a, d);
                }
                Op::Reshape(a) => {
                    let shape = self.values[a.0].shape().to_vec();
                    let flat: Vec<S> = gy.iter().copied().collect();
                    let d = ArrayD::from_shape_vec(IxDyn(&shape), flat).expect("same length");
                    self.acc(a, d);
                }
                Op::Concat { axis, parts } => {
                    let mut offset = 0usize;
                    for p in parts {
                        let extent = self.shape(p)[axis];
                        let d = gy
                            .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + extent))
                            .to_owned();
                        self.acc(p, d);
                        offset += extent;
                    }
                }
                Op::Conv2d { x, w, b, pad } => {
                    let sw = self.shape(w).to_vec();
                    let k = sw[2];
                    let sx = self.shape(x).to_vec();
                    let grows = nchw_to_rows(&gy);
                    // Bias: column sums.
                    let mut db = ArrayD::<S>::zeros(IxDyn(&[sw[0]]));
                    for j in 0..sw[0] {
                        db[[j]] = grows.column(j).iter().copied().sum();
                    }
                    let cols = im2col(&self.values[x.0], k, pad, S::zero());
                    let dwmat = grows.t().dot(&cols); // (Cout, Cin k^2)
                    let dw = dwmat
                        .into_shape_with_order(IxDyn(&sw))
                        .expect("weight shape");
                    let wmat = as_2d(
                        &self.values[w.0]
                            .view()
                            .into_shape_with_order(IxDyn(&[sw[0], sw[1] * k * k]))
                            .expect("contiguous weight")
                            .to_owned(),
                    );
                    let dcols = grows.dot(&wmat);
                    let dx = col2im(&dcols, sx[0], sx[1], sx[2], sx[3], k, pad);
                    self.acc(x, dx);
                    self.acc(w, dw);
                    self.acc(b, db);
                }
                Op::BinConv2d { x, w, alpha, b, pad } => {
                    let sw = self.shape(w).to_vec();
                    let k = sw[2];
                    let sx = self.shape(x).to_vec();
                    let (xb, wsign, kappa) = self.binarize_operands(x, w, alpha);
                    let grows = nchw_to_rows(&gy);
                    let mut db = ArrayD::<S>::zeros(IxDyn(&[sw[0]]));
                    for j in 0..sw[0] {
                        db[[j]] = grows.column(j).iter().copied().sum();
                    }
                    // Scale the outgoing gradient by the per-channel kappa
                    // (treated as constant), then use the standard conv
                    // adjoints against the ±1 operands.
                    let mut gk = grows.clone();
                    for j in 0..sw[0] {
                        let kj = kappa[j];
                        gk.column_mut(j).mapv_inplace(|g| g * kj);
                    }
                    let cols_b = im2col(&xb, k, pad, -S::one());
                    let dwmat = gk.t().dot(&cols_b);
                    let mut dw = dwmat
                        .into_shape_with_order(IxDyn(&sw))
                        .expect("weight shape");
                    // STE for sign(W): zero outside |W| <= 1.
                    dw.zip_mut_with(&self.values[w.0], |g, &wv| {
                        if wv.abs() > S::one() {
                            *g = S::zero()
                        }
                    });
                    let wsmat = as_2d(
                        &wsign
                            .view()
                            .into_shape_with_order(IxDyn(&[sw[0], sw[1] * k * k]))
                            .expect("contiguous weight")
                            .to_owned(),
                    );
                    let dcols = gk.dot(&wsmat);
                    let mut dxb = col2im(&dcols, sx[0], sx[1], sx[2], sx[3], k, pad);
                    // STE for the input binarization: window |x - alpha_c| <= 1,
                    // with the threshold receiving the negated flow.
                    let av = self.values[alpha.0].clone();
                    let mut dalpha = ArrayD::<S>::zeros(IxDyn(&[sx[1]]));
                    for (c, mut sub) in dxb.axis_iter_mut(Axis(1)).enumerate() {
                        let t = av[[c]];
                        let xs = self.values[x.0].index_axis(Axis(1), c).to_owned();
                        let mut asum = S::zero();
                        for (g, &xv) in sub.iter_mut().zip(xs.iter()) {
                            if (xv - t).abs() > S::one() {
                                *g = S::zero();
                            } else {
                                asum += -*g;
                            }
                        }
                        dalpha[[c]] = asum;
                    }
                    self.acc(x, dxb);
                    self.acc(w, dw);
                    self.acc(alpha, dalpha);
                    self.acc(b, db);
                }
                Op::TbBinarize { x, alpha } => {
                    let av = self.values[alpha.0].clone();
                    let c = self.shape(x)[1];
                    let mut d = gy;
                    let mut dalpha = ArrayD::<S>::zeros(IxDyn(&[c]));
                    for (ci, mut sub) in d.axis_iter_mut(Axis(1)).enumerate() {
                        let t = av[[ci]];
                        let xs = self.values[x.0].index_axis(Axis(1), ci).to_owned();
                        let mut asum = S::zero();
                        for (g, &xv) in sub.iter_mut().zip(xs.iter()) {
                            if (xv - t).abs() > S::one() {
                                *g = S::zero();
                            } else {
                                asum += -*g;
                            }
                        }
                        dalpha[[ci]] = asum;
                    }
                    self.acc(x, d);
                    self.acc(alpha, dalpha);
                }
                Op::TaActivate { x, gamma, zeta, beta } => {
                    let gv = self.values[gamma.0].clone();
                    let bv = self.values[beta.0].clone();
                    let c = self.shape(x)[1];
                    let mut dx = gy.clone();
                    let mut dgamma = ArrayD::<S>::zeros(IxDyn(&[c]));
                    let mut dzeta = ArrayD::<S>::zeros(IxDyn(&[c]));
                    let mut dbeta = ArrayD::<S>::zeros(IxDyn(&[c]));
                    for (ci, mut sub) in dx.axis_iter_mut(Axis(1)).enumerate() {
                        let (g, be) = (gv[[ci]], bv[[ci]]);
                        let xs = self.values[x.0].index_axis(Axis(1), ci).to_owned();
                        let (mut sg, mut sz, mut sb) = (S::zero(), S::zero(), S::zero());
                        for (gp, &xv) in sub.iter_mut().zip(xs.iter()) {
                            let d = xv - g;
                            sz += *gp;
                            // The hinge itself takes the upper branch.
                            if d >= S::zero() {
                                sg += -*gp;
                            } else {
                                sg += -*gp * be;
                                sb += *gp * d;
                                *gp = *gp * be;
                            }
                        }
                        dgamma[[ci]] = sg;
                        dzeta[[ci]] = sz;
                        dbeta[[ci]] = sb;
                    }
                    self.acc(x, dx);
                    self.acc(gamma, dgamma);
                    self.acc(zeta, dzeta);
                    self.acc(beta, dbeta);
                }
                Op::AvgPool2(a) => {
                    let s = self.shape(a).to_vec();
                    let quarter = S::of(0.25);
                    let mut d = ArrayD::<S>::zeros(IxDyn(&s));
                    for n in 0..s[0] {
                        for c in 0..s[1] {
                            for i in 0..s[2] {
                                for j in 0..s[3] {
                                    d[[n, c, i, j]] = gy[[n, c, i / 2, j / 2]] * quarter;
                                }
                            }
                        }
                    }
                    self.acc(a, d);
                }
                Op::Upsample2(a) => {
                    let s = self.shape(a).to_vec();
                    let mut d = ArrayD::<S>::zeros(IxDyn(&s));
                    for n in 0..s[0] {
                        for c in 0..s[1] {
                            for i in 0..s[2] * 2 {
                                for j in 0..s[3] * 2 {
                                    d[[n, c, i / 2, j / 2]] += gy[[n, c, i, j]];
                                }
                            }
                        }
                    }
                    self.acc(a, d);
                }
                Op::ResizeBilinear(a) => {
                    let s = self.shape(a).to_vec();
                    let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
                    let taps_y = resize_taps(s[2], oh);
                    let taps_x = resize_taps(s[3], ow);
                    let mut d = ArrayD::<S>::zeros(IxDyn(&s));
                    for n in 0..s[0] {
                        for c in 0..s[1] {
                            for (i, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                                for (j, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                                    let (wy, wx) = (S::of(wy), S::of(wx));
                                    let one = S::one();
                                    let g = gy[[n, c, i, j]];
                                    d[[n, c, y0, x0]] += (one - wy) * (one - wx) * g;
                                    d[[n, c, y0, x1]] += (one - wy) * wx * g;
                                    d[[n, c, y1, x0]] += wy * (one - wx) * g;
                                    d[[n, c, y1, x1]] += wy * wx * g;
                                }
                            }
                        }
                    }
                    self.acc(a, d);
                }
                Op::SpatialSum(a) => {
                    let s = self.shape(a).to_vec();
                    let mut d = ArrayD::<S>::zeros(IxDyn(&s));
                    for n in 0..s[0] {
                        for c in 0..s[1] {
                            let g = gy[[n, c]];
                            for i in 0..s[2] {
                                for j in 0..s[3] {
                                    d[[n, c, i, j]] = g;
                                }
                            }
                        }
                    }
                    self.acc(a, d);
                }
                Op::Mean(a) => {
                    let g0 = *gy.iter().next().expect("0-d gradient");
                    let n = S::of_usize(self.values[a.0].len());
                    let d = ArrayD::from_elem(self.values[a.0].raw_dim(), g0 / n);
                    self.acc(a, d);
                }
            }
        }
        // Gradients must be finite wherever they were produced.
        for (idx, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    let _ = idx;
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}
