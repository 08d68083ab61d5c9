//! Per-pixel probability maps and hard binary masks.
//!
//! Both types are `(H, W, C)` arrays: `C` independent one-vs-rest channels.
//! [`ProbMap`] holds Bernoulli mean parameters in `[0, 1]`; [`BinaryMask`]
//! holds realizations in `{0, 1}`.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use ndarray::Array3;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<S: Scalar> {
    data: Array3<S>,
}

impl<S: Scalar> ProbMap<S> {
    /// Wrap an `(H, W, C)` array of probabilities. Rejects values outside
    /// `[0, 1]` and non-finite values.
    pub fn new(data: Array3<S>) -> Result<Self> {
        for &v in data.iter() {
            if !(v >= S::zero() && v <= S::one()) {
                return Err(Error::InvalidArg(format!(
                    "probability {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { data })
    }

    pub fn from_elem(shape: (usize, usize, usize), v: S) -> Result<Self> {
        Self::new(Array3::from_elem(shape, v))
    }

    pub fn data(&self) -> &Array3<S> {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.dim();
        (s.0, s.1, s.2)
    }

    /// Clamp every element into `[eps, 1 - eps]`.
    pub fn clamped(&self, eps: S) -> Self {
        Self {
            data: self.data.mapv(|v| v.max(eps).min(S::one() - eps)),
        }
    }

    /// Draw one hard mask, pixel by pixel in row-major order.
    pub fn sample(&self, rng: &mut RngState) -> BinaryMask {
        BinaryMask {
            data: self.data.mapv(|p| rng.bernoulli(p)),
        }
    }

    /// Hard mask by thresholding at `thr`.
    pub fn threshold(&self, thr: S) -> BinaryMask {
        BinaryMask {
            data: self.data.mapv(|p| u8::from(p > thr)),
        }
    }

    /// One-hot mask taking each pixel's most probable channel.
    /// Ties go to the lower channel index.
    pub fn argmax_onehot(&self) -> BinaryMask {
        let (h, w, c) = self.shape();
        let mut out = Array3::<u8>::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                for k in 1..c {
                    if self.data[(y, x, k)] > self.data[(y, x, best)] {
                        best = k;
                    }
                }
                out[(y, x, best)] = 1;
            }
        }
        BinaryMask { data: out }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array3<u8>,
}

impl BinaryMask {
    /// Wrap an `(H, W, C)` array over `{0, 1}`.
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArg(format!("mask value {v} is not 0/1")));
        }
        Ok(Self { data })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            data: Array3::zeros(shape),
        }
    }

    pub fn ones(shape: (usize, usize, usize)) -> Self {
        Self {
            data: Array3::from_elem(shape, 1),
        }
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<u8> {
        &mut self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.dim();
        (s.0, s.1, s.2)
    }

    /// Elementwise exclusive or.
    pub fn xor(&self, other: &BinaryMask) -> Result<BinaryMask> {
        check_same_shape("xor", self.shape(), other.shape())?;
        Ok(Self {
            data: ndarray::Zip::from(&self.data)
                .and(&other.data)
                .map_collect(|&a, &b| a ^ b),
        })
    }

    /// View the mask as probabilities (exact 0.0 / 1.0 values).
    pub fn to_prob<S: Scalar>(&self) -> ProbMap<S> {
        ProbMap {
            data: self.data.mapv(|v| {
                if v == 1 {
                    S::one()
                } else {
                    S::zero()
                }
            }),
        }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

pub(crate) fn check_same_shape(
    ctx: &'static str,
    a: (usize, usize, usize),
    b: (usize, usize, usize),
) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            ctx,
            expected: vec![a.0, a.1, a.2],
            got: vec![b.0, b.1, b.2],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    #[test]
    fn probmap_rejects_out_of_range() {
        assert!(ProbMap::new(arr3(&[[[1.5f64]]])).is_err());
        assert!(ProbMap::new(arr3(&[[[-0.1f64]]])).is_err());
        assert!(ProbMap::new(arr3(&[[[f64::NAN]]])).is_err());
        assert!(ProbMap::new(arr3(&[[[0.0f64], [1.0]]])).is_ok());
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::new(arr3(&[[[2u8]]])).is_err());
        assert!(BinaryMask::new(arr3(&[[[1u8], [0]]])).is_ok());
    }

    #[test]
    fn xor_matches_truth_table() {
        let a = BinaryMask::new(arr3(&[[[0u8], [0], [1], [1]]])).unwrap();
        let b = BinaryMask::new(arr3(&[[[0u8], [1], [0], [1]]])).unwrap();
        let c = a.xor(&b).unwrap();
        assert_eq!(c.data().as_slice().unwrap(), &[0, 1, 1, 0]);
    }

    #[test]
    fn xor_shape_mismatch_is_an_error() {
        let a = BinaryMask::zeros((2, 2, 1));
        let b = BinaryMask::zeros((2, 3, 1));
        assert!(a.xor(&b).is_err());
    }

    #[test]
    fn argmax_onehot_picks_largest_channel() {
        let p = ProbMap::new(arr3(&[[[0.2f64, 0.7, 0.1]]])).unwrap();
        let m = p.argmax_onehot();
        assert_eq!(m.data().as_slice().unwrap(), &[0, 1, 0]);
    }

    #[test]
    fn sampling_extremes_are_deterministic() {
        let p = ProbMap::new(arr3(&[[[0.0f64, 1.0]]])).unwrap();
        let mut rng = RngState::new(3);
        let m = p.sample(&mut rng);
        assert_eq!(m.data().as_slice().unwrap(), &[0, 1]);
    }
}
