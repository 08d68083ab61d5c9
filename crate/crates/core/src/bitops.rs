//! Binarized compute path: ±1 bit-packing, XNOR/popcount matrix product,
//! the time-dependent binarization (TB) and activation (TA) element maps,
//! and FLOP/BOP accounting.
//!
//! A ±1 vector dot product over `k` elements equals `2m - k`, where `m` is
//! the number of positions where the operands agree; agreement of bits is
//! exactly XNOR, and `m` is its popcount. Packing stores +1 as bit 1 and
//! −1 as bit 0, 64 elements per word, row-major; padding bits in the last
//! word of each row are forced to the +1 encoding and masked out of every
//! popcount so they can never leak into a product.
//!
//! TB binarizes a real tensor channel-wise against time-conditioned
//! thresholds (`+1` iff `u > alpha_c`, ties to `−1`); its training-time
//! backward is the straight-through estimator, passing gradient only inside
//! the clip window `|u − alpha_c| <= 1`. TA is the piecewise-linear
//! activation `u > gamma_c ? u − gamma_c + zeta_c : beta_c (u − gamma_c) +
//! zeta_c`, continuous at the hinge; the subgradient at `u == gamma_c` uses
//! the upper branch.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use std::fmt::Write as _;

const WORD_BITS: usize = 64;

/// Row-major bit-packed ±1 matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl PackedMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Mask selecting the valid bits of the final word of a row.
    fn tail_mask(&self) -> u64 {
        let rem = self.cols % WORD_BITS;
        if rem == 0 {
            !0
        } else {
            (1u64 << rem) - 1
        }
    }

    fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }
}

fn to_sign_bit<S: Scalar>(v: S) -> Result<bool> {
    if v == S::one() {
        Ok(true)
    } else if v == -S::one() {
        Ok(false)
    } else {
        Err(Error::InvalidArg(format!(
            "pack requires elements in {{-1, +1}}, got {v}"
        )))
    }
}

/// Pack a ±1 matrix row-major.
pub fn pack<S: Scalar>(m: ArrayView2<S>) -> Result<PackedMatrix> {
    let (rows, cols) = m.dim();
    let words_per_row = cols.div_ceil(WORD_BITS).max(1);
    // Padding bits start at the +1 encoding (all ones), then valid bits
    // overwrite their positions.
    let mut words = vec![!0u64; rows * words_per_row];
    for r in 0..rows {
        for c in 0..cols {
            let w = r * words_per_row + c / WORD_BITS;
            let bit = 1u64 << (c % WORD_BITS);
            if to_sign_bit(m[(r, c)])? {
                words[w] |= bit;
            } else {
                words[w] &= !bit;
            }
        }
    }
    Ok(PackedMatrix { rows, cols, words_per_row, words })
}

/// Pack the transpose of a ±1 matrix: column `j` of `m` becomes row `j`.
/// This is the right-hand-side layout for [`xnor_gemm`].
pub fn pack_transposed<S: Scalar>(m: ArrayView2<S>) -> Result<PackedMatrix> {
    pack(m.t())
}

/// Recover the ±1 matrix.
pub fn unpack<S: Scalar>(p: &PackedMatrix) -> Array2<S> {
    Array2::from_shape_fn((p.rows, p.cols), |(r, c)| {
        let w = p.words[r * p.words_per_row + c / WORD_BITS];
        if (w >> (c % WORD_BITS)) & 1 == 1 {
            S::one()
        } else {
            -S::one()
        }
    })
}

/// Signed ±1 matrix product via XNOR and popcount.
///
/// `a` holds the left operand's rows; `b_t` holds the right operand's
/// columns as rows (see [`pack_transposed`]). Output element `(i, j)` is the
/// exact integer dot product `2 * popcount(XNOR(a_i, b_j)) - k`.
pub fn xnor_gemm(a: &PackedMatrix, b_t: &PackedMatrix) -> Result<Array2<i32>> {
    if a.cols != b_t.cols {
        return Err(Error::ShapeMismatch {
            ctx: "xnor_gemm",
            expected: vec![a.cols],
            got: vec![b_t.cols],
        });
    }
    let k = a.cols as i32;
    let tail = a.tail_mask();
    let full = a.words_per_row;
    let mut out = Array2::<i32>::zeros((a.rows, b_t.rows));
    for i in 0..a.rows {
        let ra = a.row_words(i);
        for j in 0..b_t.rows {
            let rb = b_t.row_words(j);
            let mut agree: u32 = 0;
            for w in 0..full {
                let mask = if w + 1 == full { tail } else { !0 };
                agree += (!(ra[w] ^ rb[w]) & mask).count_ones();
            }
            out[(i, j)] = 2 * agree as i32 - k;
        }
    }
    Ok(out)
}

/// Reference ±1 integer product; oracle for [`xnor_gemm`].
pub fn naive_sign_gemm<S: Scalar>(a: ArrayView2<S>, b: ArrayView2<S>) -> Result<Array2<i32>> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    if k != k2 {
        return Err(Error::ShapeMismatch {
            ctx: "naive_sign_gemm",
            expected: vec![k],
            got: vec![k2],
        });
    }
    let mut out = Array2::<i32>::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0i32;
            for l in 0..k {
                let x = to_sign_bit(a[(i, l)])?;
                let y = to_sign_bit(b[(l, j)])?;
                acc += if x == y { 1 } else { -1 };
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// Plain triple-loop float matrix product; the wall-clock baseline the
/// binarized path is benchmarked against.
pub fn naive_float_gemm<S: Scalar>(a: ArrayView2<S>, b: ArrayView2<S>) -> Result<Array2<S>> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    if k != k2 {
        return Err(Error::ShapeMismatch {
            ctx: "naive_float_gemm",
            expected: vec![k],
            got: vec![k2],
        });
    }
    let mut out = Array2::<S>::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut acc = S::zero();
            for l in 0..k {
                acc += a[(i, l)] * b[(l, j)];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// Per-channel time-conditioned parameters of the TB and TA modules.
///
/// All four vectors have one entry per channel: `alpha` is the TB threshold;
/// `gamma`, `zeta`, `beta` are the TA hinge position, shift, and lower-branch
/// slope. The affine maps producing them from the time step are model
/// parameters and live with the networks; this struct carries the resolved
/// values for one step.
#[derive(Debug, Clone)]
pub struct TimeCond<S: Scalar> {
    pub alpha: Vec<S>,
    pub gamma: Vec<S>,
    pub zeta: Vec<S>,
    pub beta: Vec<S>,
}

impl<S: Scalar> TimeCond<S> {
    pub fn new(alpha: Vec<S>, gamma: Vec<S>, zeta: Vec<S>, beta: Vec<S>) -> Result<Self> {
        let c = alpha.len();
        if gamma.len() != c || zeta.len() != c || beta.len() != c {
            return Err(Error::InvalidArg(format!(
                "TimeCond channel counts disagree: alpha {c}, gamma {}, zeta {}, beta {}",
                gamma.len(),
                zeta.len(),
                beta.len()
            )));
        }
        for v in alpha.iter().chain(&gamma).chain(&zeta).chain(&beta) {
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "TimeCond::new" });
            }
        }
        Ok(Self { alpha, gamma, zeta, beta })
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }
}

fn check_channels<S: Scalar>(op: &'static str, u: &ArrayView4<S>, c: usize) -> Result<()> {
    if u.dim().1 != c {
        return Err(Error::ShapeMismatch {
            ctx: op,
            expected: vec![c],
            got: vec![u.dim().1],
        });
    }
    Ok(())
}

/// TB forward over an `(N, C, H, W)` tensor: `+1` iff `u > alpha_c`, ties
/// and below map to `−1`.
pub fn tb_forward<S: Scalar>(u: ArrayView4<S>, alpha: &[S]) -> Result<Array4<S>> {
    check_channels("tb_forward", &u, alpha.len())?;
    Ok(Array4::from_shape_fn(u.dim(), |(n, c, h, w)| {
        if u[(n, c, h, w)] > alpha[c] {
            S::one()
        } else {
            -S::one()
        }
    }))
}

/// Straight-through window for TB's backward: 1 where `|u − alpha_c| <= 1`,
/// 0 elsewhere. Gradient w.r.t. `u` is the incoming gradient times this
/// mask; gradient w.r.t. `alpha_c` is its negation, summed per channel.
pub fn tb_ste_window<S: Scalar>(u: ArrayView4<S>, alpha: &[S]) -> Result<Array4<S>> {
    check_channels("tb_ste_window", &u, alpha.len())?;
    Ok(Array4::from_shape_fn(u.dim(), |(n, c, h, w)| {
        if (u[(n, c, h, w)] - alpha[c]).abs() <= S::one() {
            S::one()
        } else {
            S::zero()
        }
    }))
}

/// TA forward over an `(N, C, H, W)` tensor.
pub fn ta_forward<S: Scalar>(u: ArrayView4<S>, cond: &TimeCond<S>) -> Result<Array4<S>> {
    check_channels("ta_forward", &u, cond.channels())?;
    Ok(Array4::from_shape_fn(u.dim(), |(n, c, h, w)| {
        let x = u[(n, c, h, w)] - cond.gamma[c];
        if x > S::zero() {
            x + cond.zeta[c]
        } else {
            cond.beta[c] * x + cond.zeta[c]
        }
    }))
}

/// Derivative of TA w.r.t. its input: 1 on the upper branch (including the
/// hinge itself), `beta_c` strictly below it.
pub fn ta_input_slope<S: Scalar>(u: ArrayView4<S>, cond: &TimeCond<S>) -> Result<Array4<S>> {
    check_channels("ta_input_slope", &u, cond.channels())?;
    Ok(Array4::from_shape_fn(u.dim(), |(n, c, h, w)| {
        if u[(n, c, h, w)] >= cond.gamma[c] {
            S::one()
        } else {
            cond.beta[c]
        }
    }))
}

/// Operation counts, kept separately for real and binary arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCost {
    pub flops: u64,
    pub bops: u64,
}

impl OpCost {
    pub const fn flops(n: u64) -> Self {
        Self { flops: n, bops: 0 }
    }

    pub const fn bops(n: u64) -> Self {
        Self { flops: 0, bops: n }
    }

    /// Effective FLOPs under the 64-BOPs-per-FLOP equivalence.
    pub fn effective_flops(self) -> f64 {
        self.flops as f64 + self.bops as f64 / 64.0
    }
}

impl std::ops::Add for OpCost {
    type Output = OpCost;
    fn add(self, rhs: OpCost) -> OpCost {
        OpCost {
            flops: self.flops + rhs.flops,
            bops: self.bops + rhs.bops,
        }
    }
}

impl std::ops::AddAssign for OpCost {
    fn add_assign(&mut self, rhs: OpCost) {
        *self = *self + rhs;
    }
}

impl std::ops::Mul<u64> for OpCost {
    type Output = OpCost;
    fn mul(self, rhs: u64) -> OpCost {
        OpCost {
            flops: self.flops * rhs,
            bops: self.bops * rhs,
        }
    }
}

/// Cost of an `m x k` by `k x n` matrix product (multiply and accumulate
/// counted separately: `2mkn`). Binarized layers spend the same count as
/// XNOR+popcount pairs.
pub fn matmul_cost(m: u64, k: u64, n: u64, binarized: bool) -> OpCost {
    let ops = 2 * m * k * n;
    if binarized {
        OpCost::bops(ops)
    } else {
        OpCost::flops(ops)
    }
}

/// Cost of a stride-1 padded `ksize x ksize` convolution on an `h x w` grid.
pub fn conv2d_cost(h: u64, w: u64, c_in: u64, c_out: u64, ksize: u64, binarized: bool) -> OpCost {
    matmul_cost(h * w, c_in * ksize * ksize, c_out, binarized)
}

/// One annotated layer of a cost report.
#[derive(Debug, Clone)]
pub struct LayerCost {
    pub name: String,
    pub cost: OpCost,
}

/// Analytic per-layer operation counts for a model, renderable as a table.
#[derive(Debug, Clone, Default)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn push(&mut self, name: impl Into<String>, cost: OpCost) {
        self.layers.push(LayerCost { name: name.into(), cost });
    }

    pub fn total(&self) -> OpCost {
        self.layers.iter().fold(OpCost::default(), |acc, l| acc + l.cost)
    }

    /// Plain-text table: layer, flops, bops, effective_flops.
    pub fn to_table(&self) -> String {
        let mut out = String::from("layer\tflops\tbops\teffective_flops\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.2}",
                l.name,
                l.cost.flops,
                l.cost.bops,
                l.cost.effective_flops()
            );
        }
        let t = self.total();
        let _ = writeln!(out, "total\t{}\t{}\t{:.2}", t.flops, t.bops, t.effective_flops());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use ndarray::arr2;

    fn random_sign_matrix(rng: &mut RngState, rows: usize, cols: usize) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |_| {
            if rng.uniform_f64() < 0.5 {
                1.0
            } else {
                -1.0
            }
        })
    }

    #[test]
    fn pack_roundtrip_single_element() {
        let m = arr2(&[[1.0f32]]);
        let p = pack(m.view()).unwrap();
        assert_eq!(p.rows(), 1);
        assert_eq!(p.cols(), 1);
        assert_eq!(p.words[0] & 1, 1);
        assert_eq!(unpack::<f32>(&p), m);
    }

    #[test]
    fn pack_roundtrip_across_word_boundary() {
        let m = Array2::<f32>::from_elem((1, 65), -1.0);
        let p = pack(m.view()).unwrap();
        assert_eq!(p.words_per_row, 2);
        // Valid bits are all zero (the -1 encoding); padding stays +1.
        assert_eq!(p.words[0], 0);
        assert_eq!(p.words[1] & 1, 0);
        assert_eq!(p.words[1] >> 1, !0u64 >> 1);
        assert_eq!(unpack::<f32>(&p), m);
    }

    #[test]
    fn pack_roundtrip_random() {
        let mut rng = RngState::new(3);
        let m = random_sign_matrix(&mut rng, 33, 70);
        let p = pack(m.view()).unwrap();
        assert_eq!(unpack::<f32>(&p), m);
        let pt = pack_transposed(m.view()).unwrap();
        assert_eq!(unpack::<f32>(&pt), m.t());
    }

    #[test]
    fn pack_rejects_non_sign_values() {
        assert!(pack(arr2(&[[0.5f32]]).view()).is_err());
        assert!(pack(arr2(&[[0.0f32]]).view()).is_err());
        assert!(pack(arr2(&[[f32::NAN]]).view()).is_err());
    }

    #[test]
    fn xnor_gemm_hand_cases() {
        // [+1,-1,+1] . [+1,+1,-1]: one agreement -> 2*1-3 = -1.
        let a = arr2(&[[1.0f32, -1.0, 1.0]]);
        let b = arr2(&[[1.0f32], [1.0], [-1.0]]);
        let out = xnor_gemm(&pack(a.view()).unwrap(), &pack_transposed(b.view()).unwrap()).unwrap();
        assert_eq!(out[(0, 0)], -1);
        // Identical rows: dot = n.
        let out = xnor_gemm(&pack(a.view()).unwrap(), &pack_transposed(a.t()).unwrap()).unwrap();
        assert_eq!(out[(0, 0)], 3);
    }

    #[test]
    fn xnor_gemm_matches_naive_16x16() {
        let mut rng = RngState::new(8);
        let a = random_sign_matrix(&mut rng, 16, 16);
        let b = random_sign_matrix(&mut rng, 16, 16);
        let fast = xnor_gemm(&pack(a.view()).unwrap(), &pack_transposed(b.view()).unwrap()).unwrap();
        let slow = naive_sign_gemm(a.view(), b.view()).unwrap();
        assert_eq!(fast, slow);
    }

    #[test]
    fn xnor_gemm_matches_naive_on_awkward_shapes() {
        let mut rng = RngState::new(21);
        for _ in 0..40 {
            let m = 1 + rng.below(24) as usize;
            let k = 1 + rng.below(150) as usize; // crosses the 64/128 boundaries
            let n = 1 + rng.below(24) as usize;
            let a = random_sign_matrix(&mut rng, m, k);
            let b = random_sign_matrix(&mut rng, k, n);
            let fast =
                xnor_gemm(&pack(a.view()).unwrap(), &pack_transposed(b.view()).unwrap()).unwrap();
            let slow = naive_sign_gemm(a.view(), b.view()).unwrap();
            assert_eq!(fast, slow, "m={m} k={k} n={n}");
        }
    }

    #[test]
    fn xnor_gemm_rejects_extent_mismatch() {
        let a = pack(arr2(&[[1.0f32, 1.0]]).view()).unwrap();
        let b = pack(arr2(&[[1.0f32, 1.0, 1.0]]).view()).unwrap();
        assert!(xnor_gemm(&a, &b).is_err());
    }

    #[test]
    fn naive_float_gemm_small_case() {
        let a = arr2(&[[1.0f64, 2.0], [3.0, 4.0]]);
        let b = arr2(&[[5.0f64, 6.0], [7.0, 8.0]]);
        let out = naive_float_gemm(a.view(), b.view()).unwrap();
        assert_eq!(out, arr2(&[[19.0, 22.0], [43.0, 50.0]]));
    }

    fn nchw<S: Scalar>(vals: &[f64]) -> Array4<S> {
        Array4::from_shape_vec((1, vals.len(), 1, 1), vals.iter().map(|&v| S::of(v)).collect())
            .unwrap()
    }

    #[test]
    fn tb_examples() {
        let u = nchw::<f64>(&[0.5]);
        let out = tb_forward(u.view(), &[0.2]).unwrap();
        assert_eq!(out[(0, 0, 0, 0)], 1.0);
        // Tie goes to -1.
        let u = nchw::<f64>(&[0.2]);
        let out = tb_forward(u.view(), &[0.2]).unwrap();
        assert_eq!(out[(0, 0, 0, 0)], -1.0);
        // Channel vector.
        let u = nchw::<f64>(&[-1.0, 0.0, 1.0]);
        let out = tb_forward(u.view(), &[0.0, 0.0, 0.0]).unwrap();
        let got: Vec<f64> = out.iter().copied().collect();
        assert_eq!(got, vec![-1.0, -1.0, 1.0]);
    }

    #[test]
    fn tb_window_clips_far_inputs() {
        let u = nchw::<f64>(&[0.0, 1.5, -3.0, 0.9]);
        let w = tb_ste_window(u.view(), &[0.0, 0.0, 0.0, 0.0]).unwrap();
        let got: Vec<f64> = w.iter().copied().collect();
        assert_eq!(got, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ta_examples() {
        let cond = TimeCond::new(vec![0.0f64], vec![0.3], vec![0.1], vec![0.25]).unwrap();
        // At the hinge both branches give zeta.
        let u = nchw::<f64>(&[0.3]);
        let out = ta_forward(u.view(), &cond).unwrap();
        assert!((out[(0, 0, 0, 0)] - 0.1).abs() < 1e-15);
        // Upper branch: u = gamma + 2 with zeta = 0.
        let cond0 = TimeCond::new(vec![0.0f64], vec![0.3], vec![0.0], vec![0.25]).unwrap();
        let u = nchw::<f64>(&[2.3]);
        let out = ta_forward(u.view(), &cond0).unwrap();
        assert!((out[(0, 0, 0, 0)] - 2.0).abs() < 1e-15);
        // Lower branch: u = gamma - 2, beta = 0.25, zeta = 0.1 -> -0.4.
        let u = nchw::<f64>(&[-1.7]);
        let out = ta_forward(u.view(), &cond).unwrap();
        assert!((out[(0, 0, 0, 0)] - (-0.4)).abs() < 1e-15);
    }

    #[test]
    fn ta_is_continuous_at_the_hinge() {
        let cond = TimeCond::new(vec![0.0f64], vec![0.7], vec![-0.2], vec![0.5]).unwrap();
        let below = nchw::<f64>(&[0.7 - 1e-12]);
        let at = nchw::<f64>(&[0.7]);
        let above = nchw::<f64>(&[0.7 + 1e-12]);
        let f = |u: &Array4<f64>| ta_forward(u.view(), &cond).unwrap()[(0, 0, 0, 0)];
        assert!((f(&below) - f(&at)).abs() < 1e-9);
        assert!((f(&above) - f(&at)).abs() < 1e-9);
        // Slope at the hinge uses the upper branch.
        let s = ta_input_slope(at.view(), &cond).unwrap();
        assert_eq!(s[(0, 0, 0, 0)], 1.0);
        let s = ta_input_slope(below.view(), &cond).unwrap();
        assert_eq!(s[(0, 0, 0, 0)], 0.5);
    }

    #[test]
    fn cost_conventions() {
        let float = matmul_cost(4, 5, 6, false);
        assert_eq!(float, OpCost::flops(240));
        let bin = matmul_cost(4, 5, 6, true);
        assert_eq!(bin, OpCost::bops(240));
        assert!((bin.effective_flops() - 240.0 / 64.0).abs() < 1e-12);
        assert!((float.effective_flops() - 240.0).abs() < 1e-12);
        // Additivity and scaling.
        let sum = float + bin;
        assert_eq!(sum.flops, 240);
        assert_eq!(sum.bops, 240);
        assert_eq!(bin * 3, OpCost::bops(720));
        // Convolution as matmul over patches.
        assert_eq!(
            conv2d_cost(8, 8, 3, 16, 3, false),
            OpCost::flops(2 * 64 * 27 * 16)
        );
    }

    #[test]
    fn cost_table_lists_layers_and_total() {
        let mut rep = CostReport::default();
        rep.push("conv_in", conv2d_cost(8, 8, 1, 8, 3, false));
        rep.push("conv_mid", conv2d_cost(8, 8, 8, 8, 3, true));
        let table = rep.to_table();
        assert!(table.starts_with("layer\tflops\tbops\teffective_flops\n"));
        assert!(table.contains("conv_in"));
        assert!(table.lines().last().unwrap().starts_with("total"));
        let t = rep.total();
        assert_eq!(t.flops, 2 * 64 * 9 * 8);
        assert_eq!(t.bops, 2 * 64 * 72 * 8);
    }
}
