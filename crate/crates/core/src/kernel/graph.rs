//! Differentiable mirror of the transition kernel.
//!
//! The array functions in the parent module serve sampling and inference;
//! training needs the same closed forms as tape nodes so that gradients
//! reach the noise estimate and the prior map. Tensors here are batched
//! `(N, C, H, W)`; step quantities enter as constants taken from the
//! schedule. Values agree with the array path to floating-point
//! round-off, which the tests pin down.

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn one_minus<S: Scalar>(g: &mut Graph<S>, x: TensorId) -> Result<TensorId> {
    let n = g.neg(x)?;
    g.add_scalar(n, 1.0)
}

fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArg(format!(
            "{name} must lie in [0, 1], got {v}"
        )));
    }
    Ok(())
}

/// Marginal mean `abar y0 + (1 - abar) f` as a graph node.
pub fn marginal_graph<S: Scalar>(
    g: &mut Graph<S>,
    y0: TensorId,
    prior: TensorId,
    abar: f64,
) -> Result<TensorId> {
    check_unit("abar", abar)?;
    let a = g.scale(y0, abar)?;
    let b = g.scale(prior, 1.0 - abar)?;
    g.add(a, b)
}

/// Clean-mask estimate `|y_t - eps_hat|` as a graph node.
pub fn calibrate_graph<S: Scalar>(
    g: &mut Graph<S>,
    y_t: TensorId,
    eps_hat: TensorId,
) -> Result<TensorId> {
    let d = g.sub(y_t, eps_hat)?;
    g.abs(d)
}

/// Posterior probability `P(y_{t-1} = 1 | y_t, y0, f)` as a graph node.
///
/// `y0` may be a soft estimate; feed [`calibrate_graph`] output here for
/// the learned reverse step. A vanishing normalizer surfaces as a
/// non-finite-value error from the division.
pub fn posterior_graph<S: Scalar>(
    g: &mut Graph<S>,
    y_t: TensorId,
    y0: TensorId,
    prior: TensorId,
    alpha: f64,
    abar_prev: f64,
) -> Result<TensorId> {
    check_unit("alpha", alpha)?;
    check_unit("abar_prev", abar_prev)?;
    // shared = (1 - alpha) |1 - y_t - f|
    let ytf = g.add(y_t, prior)?;
    let neg = g.neg(ytf)?;
    let arg = g.add_scalar(neg, 1.0)?;
    let mag = g.abs(arg)?;
    let shared = g.scale(mag, 1.0 - alpha)?;
    // Transition channels.
    let yt1 = g.scale(y_t, alpha)?;
    let a1 = g.add(yt1, shared)?;
    let ytm = one_minus(g, y_t)?;
    let yt0 = g.scale(ytm, alpha)?;
    let a0 = g.add(yt0, shared)?;
    // Marginal channels.
    let b1a = g.scale(y0, abar_prev)?;
    let b1b = g.scale(prior, 1.0 - abar_prev)?;
    let b1 = g.add(b1a, b1b)?;
    let y0m = one_minus(g, y0)?;
    let fm = one_minus(g, prior)?;
    let b0a = g.scale(y0m, abar_prev)?;
    let b0b = g.scale(fm, 1.0 - abar_prev)?;
    let b0 = g.add(b0a, b0b)?;
    // Normalize.
    let num = g.mul(a1, b1)?;
    let other = g.mul(a0, b0)?;
    let den = g.add(num, other)?;
    g.div(num, den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::kernel;
    use crate::map::{BinaryMask, ProbMap};
    use crate::rng::RngState;
    use crate::schedule::NoiseSchedule;
    use ndarray::{Array3, ArrayD, IxDyn};

    const H: usize = 5;
    const W: usize = 7;

    /// (H, W, 1) map data to a (1, 1, H, W) tensor.
    fn to_tensor(data: &Array3<f64>) -> ArrayD<f64> {
        let mut t = ArrayD::zeros(IxDyn(&[1, 1, H, W]));
        for i in 0..H {
            for j in 0..W {
                t[[0, 0, i, j]] = data[(i, j, 0)];
            }
        }
        t
    }

    fn mask_tensor(m: &BinaryMask) -> ArrayD<f64> {
        let mut t = ArrayD::zeros(IxDyn(&[1, 1, H, W]));
        for i in 0..H {
            for j in 0..W {
                t[[0, 0, i, j]] = m.data()[(i, j, 0)] as f64;
            }
        }
        t
    }

    fn random_case(
        seed: u64,
    ) -> (BinaryMask, ProbMap<f64>, ProbMap<f64>, NoiseSchedule<f64>) {
        let mut rng = RngState::new(seed);
        let y_t = BinaryMask::new(Array3::from_shape_fn((H, W, 1), |_| {
            (rng.uniform_f64() < 0.5) as u8
        }))
        .unwrap();
        let y0 = ProbMap::new(Array3::from_shape_fn((H, W, 1), |_| rng.uniform_f64()))
            .unwrap();
        let prior = ProbMap::new(Array3::from_shape_fn((H, W, 1), |_| {
            0.02 + 0.96 * rng.uniform_f64()
        }))
        .unwrap();
        let sched = NoiseSchedule::<f64>::cosine(10, 0.008).unwrap();
        (y_t, y0, prior, sched)
    }

    #[test]
    fn posterior_graph_matches_array_path() {
        for seed in 0..5u64 {
            let (y_t, y0, prior, sched) = random_case(40 + seed);
            for t in 1..=10usize {
                let want = kernel::posterior_prob(&y_t, &y0, &prior, t, &sched).unwrap();
                let p = sched.lookup(t).unwrap();
                let mut g = Graph::<f64>::new();
                let yt = g.constant(mask_tensor(&y_t)).unwrap();
                let y0t = g.constant(to_tensor(y0.data())).unwrap();
                let ft = g.constant(to_tensor(prior.data())).unwrap();
                let post = posterior_graph(
                    &mut g,
                    yt,
                    y0t,
                    ft,
                    p.alpha.as_f64(),
                    p.alpha_bar_prev.as_f64(),
                )
                .unwrap();
                for i in 0..H {
                    for j in 0..W {
                        let a = g.value(post)[[0, 0, i, j]];
                        let b = want.data()[(i, j, 0)];
                        assert!(
                            (a - b).abs() < 1e-12,
                            "t = {t}, pixel ({i}, {j}): graph {a} vs array {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn calibrated_posterior_matches_array_path() {
        let (y_t, eps_hat, prior, sched) = random_case(77);
        for t in 1..=10usize {
            let want = kernel::calibrate(&y_t, &eps_hat, &prior, t, &sched).unwrap();
            let p = sched.lookup(t).unwrap();
            let mut g = Graph::<f64>::new();
            let yt = g.constant(mask_tensor(&y_t)).unwrap();
            let et = g.constant(to_tensor(eps_hat.data())).unwrap();
            let ft = g.constant(to_tensor(prior.data())).unwrap();
            let y0 = calibrate_graph(&mut g, yt, et).unwrap();
            let post = posterior_graph(
                &mut g,
                yt,
                y0,
                ft,
                p.alpha.as_f64(),
                p.alpha_bar_prev.as_f64(),
            )
            .unwrap();
            for i in 0..H {
                for j in 0..W {
                    let a = g.value(post)[[0, 0, i, j]];
                    let b = want.data()[(i, j, 0)];
                    assert!(
                        (a - b).abs() < 1e-12,
                        "t = {t}, pixel ({i}, {j}): graph {a} vs array {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn marginal_graph_matches_array_path() {
        let (_, _, prior, sched) = random_case(91);
        let mut rng = RngState::new(92);
        let y0 = BinaryMask::new(Array3::from_shape_fn((H, W, 1), |_| {
            (rng.uniform_f64() < 0.5) as u8
        }))
        .unwrap();
        for t in 0..=10usize {
            let want = kernel::forward_marginal_prob(&y0, &prior, t, &sched).unwrap();
            let abar = sched.alpha_bar(t).unwrap();
            let mut g = Graph::<f64>::new();
            let y0t = g.constant(mask_tensor(&y0)).unwrap();
            let ft = g.constant(to_tensor(prior.data())).unwrap();
            let m = marginal_graph(&mut g, y0t, ft, abar.as_f64()).unwrap();
            for i in 0..H {
                for j in 0..W {
                    let a = g.value(m)[[0, 0, i, j]];
                    let b = want.data()[(i, j, 0)];
                    assert!((a - b).abs() < 1e-15, "t = {t}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn posterior_gradients_match_finite_differences() {
        // Differentiate a weighted mean of the calibrated posterior with
        // respect to the noise estimate and the prior. Inputs stay away
        // from the absolute-value kinks: the estimate is strictly inside
        // (0, 1) and the latent is exactly binary.
        let mut rng = RngState::new(55);
        for trial in 0..20 {
            let y_t = ArrayD::from_shape_vec(
                IxDyn(&[1, 1, 3, 3]),
                (0..9).map(|_| (rng.uniform_f64() < 0.5) as u8 as f64).collect(),
            )
            .unwrap();
            let eps_hat = ArrayD::from_shape_vec(
                IxDyn(&[1, 1, 3, 3]),
                (0..9).map(|_| 0.05 + 0.9 * rng.uniform_f64()).collect(),
            )
            .unwrap();
            let prior = ArrayD::from_shape_vec(
                IxDyn(&[1, 1, 3, 3]),
                (0..9).map(|_| 0.05 + 0.9 * rng.uniform_f64()).collect(),
            )
            .unwrap();
            let weights = ArrayD::from_shape_vec(
                IxDyn(&[1, 1, 3, 3]),
                (0..9).map(|_| rng.uniform_f64() * 2.0 - 1.0).collect(),
            )
            .unwrap();
            let alpha = 0.3 + 0.6 * rng.uniform_f64();
            let abar_prev = 0.2 + 0.7 * rng.uniform_f64();
            let ytc = y_t.clone();
            let wc = weights.clone();
            check_gradients(&[eps_hat, prior], 1e-5, 1e-4, &|g, ids| {
                let yt = g.constant(ytc.clone())?;
                let y0 = calibrate_graph(g, yt, ids[0])?;
                let post = posterior_graph(g, yt, y0, ids[1], alpha, abar_prev)?;
                let w = g.constant(wc.clone())?;
                let prod = g.mul(post, w)?;
                g.mean(prod)
            })
            .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
        }
    }

    #[test]
    fn vanishing_normalizer_is_reported() {
        // alpha = abar_prev = 1 with contradictory hard inputs drives both
        // channels to zero.
        let mut g = Graph::<f64>::new();
        let yt = g
            .constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0))
            .unwrap();
        let y0 = g
            .constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 0.0))
            .unwrap();
        let f = g
            .constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 0.5))
            .unwrap();
        assert!(matches!(
            posterior_graph(&mut g, yt, y0, f, 1.0, 1.0),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn step_constants_outside_unit_interval_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g
            .constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 0.5))
            .unwrap();
        assert!(marginal_graph(&mut g, x, x, 1.5).is_err());
        assert!(posterior_graph(&mut g, x, x, x, -0.1, 0.5).is_err());
        assert!(posterior_graph(&mut g, x, x, x, 0.5, f64::NAN).is_err());
    }
}
