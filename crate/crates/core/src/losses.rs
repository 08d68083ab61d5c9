//! Training objectives, built as graph nodes so their gradients come from
//! the tape.
//!
//! Two families. The discriminative objective scores a probability map
//! against a reference mask: pixelwise cross-entropy plus a soft Dice term
//! with additive smoothing 1. The denoising objective scores a predicted
//! noise probability against the drawn noise: a Bernoulli KL term plus a
//! focal term that down-weights pixelsanchored by easy predictions. The
//! hybrid objective combines both, each extra term entering through a
//! weight that defaults to 1.
//!
//! Reductions are means over every element (batch, channel and pixel), so
//! loss magnitudes are comparable across image and batch sizes except for
//! cross-entropy, which sums over classes per pixel first. Probabilities
//! entering a logarithm or a ratio are clamped to `[PROB_EPS, 1 - PROB_EPS]`;
//! targets are used as given, so soft targets are accepted everywhere.

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Clamp bound keeping probabilities away from 0 and 1 inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTHING: f64 = 1.0;

fn clamp_prob<S: Scalar>(g: &mut Graph<S>, p: TensorId) -> Result<TensorId> {
    g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
}

/// `1 - x` as a graph node.
fn one_minus<S: Scalar>(g: &mut Graph<S>, x: TensorId) -> Result<TensorId> {
    let n = g.neg(x)?;
    g.add_scalar(n, 1.0)
}

/// Mean Bernoulli KL divergence `KL(B(target) || B(pred))` per element.
/// Both probabilities are clamped before the ratio, so the result is
/// finite for hard 0/1 inputs, nonnegative, and zero exactly when the
/// clamped inputs agree.
pub fn bernoulli_kl<S: Scalar>(
    g: &mut Graph<S>,
    pred: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    let t = clamp_prob(g, target)?;
    let p = clamp_prob(g, pred)?;
    let tm = one_minus(g, t)?;
    let pm = one_minus(g, p)?;
    let r1 = g.div(t, p)?;
    let l1 = g.ln(r1)?;
    let term1 = g.mul(t, l1)?;
    let r0 = g.div(tm, pm)?;
    let l0 = g.ln(r0)?;
    let term0 = g.mul(tm, l0)?;
    let sum = g.add(term1, term0)?;
    g.mean(sum)
}

/// Mean binary cross-entropy of `pred` against a (possibly soft) `target`.
pub fn bce_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    let p = clamp_prob(g, pred)?;
    let pm = one_minus(g, p)?;
    let tm = one_minus(g, target)?;
    let lp = g.ln(p)?;
    let lm = g.ln(pm)?;
    let term1 = g.mul(target, lp)?;
    let term0 = g.mul(tm, lm)?;
    let sum = g.add(term1, term0)?;
    let m = g.mean(sum)?;
    g.neg(m)
}

/// Mean focal re-weighting of the binary cross-entropy: each term is
/// scaled by the opposite probability raised to `gamma`, so confidently
/// correct pixels contribute less as `gamma` grows. `gamma = 0` reduces to
/// [`bce_loss`] exactly.
pub fn focal_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: TensorId,
    target: TensorId,
    gamma: f64,
) -> Result<TensorId> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::InvalidArg(format!(
            "focal exponent must be finite and nonnegative, got {gamma}"
        )));
    }
    let p = clamp_prob(g, pred)?;
    let pm = one_minus(g, p)?;
    let tm = one_minus(g, target)?;
    let lp = g.ln(p)?;
    let lm = g.ln(pm)?;
    let wp = g.pow_const(pm, gamma)?;
    let wm = g.pow_const(p, gamma)?;
    let t1 = g.mul(target, wp)?;
    let term1 = g.mul(t1, lp)?;
    let t0 = g.mul(tm, wm)?;
    let term0 = g.mul(t0, lm)?;
    let sum = g.add(term1, term0)?;
    let m = g.mean(sum)?;
    g.neg(m)
}

/// Mean cross-entropy of a probability map against a one-hot (or soft)
/// reference, summed over the class axis per pixel. A single-channel map
/// is scored as binary cross-entropy, since its lone channel carries both
/// outcomes.
pub fn ce_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidArg(format!(
            "ce_loss expects (N, C, H, W), got {shape:?}"
        )));
    }
    if shape[1] == 1 {
        return bce_loss(g, pred, target);
    }
    let p = clamp_prob(g, pred)?;
    let lp = g.ln(p)?;
    let prod = g.mul(target, lp)?;
    let m = g.mean(prod)?;
    // The per-element mean divides by C as well; restore the per-pixel
    // class sum.
    let s = g.scale(m, shape[1] as f64)?;
    g.neg(s)
}

/// Mean soft Dice loss: one minus the smoothed overlap ratio
/// `(2 sum(p t) + 1) / (sum(p) + sum(t) + 1)`, computed per sample and
/// channel over the spatial axes and averaged. The smoothing keeps the
/// ratio at 1 when prediction and reference are both empty.
pub fn soft_dice_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidArg(format!(
            "soft_dice_loss expects (N, C, H, W), got {shape:?}"
        )));
    }
    let prod = g.mul(pred, target)?;
    let inter = g.spatial_sum(prod)?;
    let psum = g.spatial_sum(pred)?;
    let tsum = g.spatial_sum(target)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTHING)?;
    let den = g.add(psum, tsum)?;
    let den = g.add_scalar(den, DICE_SMOOTHING)?;
    let ratio = g.div(num, den)?;
    let m = g.mean(ratio)?;
    let n = g.neg(m)?;
    g.add_scalar(n, 1.0)
}

/// Discriminative objective: cross-entropy plus soft Dice.
pub fn disc_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    let ce = ce_loss(g, pred, target)?;
    let dice = soft_dice_loss(g, pred, target)?;
    g.add(ce, dice)
}

/// Denoising objective: Bernoulli KL plus `lambda_focal` times the focal
/// term, both scoring the predicted noise probability against the drawn
/// noise.
pub fn diffusion_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred_noise: TensorId,
    target_noise: TensorId,
    gamma: f64,
    lambda_focal: f64,
) -> Result<TensorId> {
    let kl = bernoulli_kl(g, pred_noise, target_noise)?;
    let focal = focal_loss(g, pred_noise, target_noise, gamma)?;
    let weighted = g.scale(focal, lambda_focal)?;
    g.add(kl, weighted)
}

/// Joint objective: the discriminative term on the prior map plus
/// `lambda_diff` times the denoising term.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss<S: Scalar>(
    g: &mut Graph<S>,
    prior: TensorId,
    mask: TensorId,
    pred_noise: TensorId,
    target_noise: TensorId,
    gamma: f64,
    lambda_focal: f64,
    lambda_diff: f64,
) -> Result<TensorId> {
    let disc = disc_loss(g, prior, mask)?;
    let diff = diffusion_loss(g, pred_noise, target_noise, gamma, lambda_focal)?;
    let weighted = g.scale(diff, lambda_diff)?;
    g.add(disc, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::rng::RngState;
    use ndarray::{ArrayD, IxDyn};

    fn filled(shape: &[usize], v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(shape), v)
    }

    fn rand_p(rng: &mut RngState, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..shape.iter().product::<usize>())
                .map(|_| lo + rng.uniform_f64() * (hi - lo))
                .collect(),
        )
        .unwrap()
    }

    fn eval<F>(build: F) -> f64
    where
        F: FnOnce(&mut Graph<f64>) -> crate::error::Result<TensorId>,
    {
        let mut g = Graph::<f64>::new();
        let id = build(&mut g).unwrap();
        g.scalar_value(id).unwrap()
    }

    #[test]
    fn kl_point_eight_against_half() {
        let got = eval(|g| {
            let t = g.constant(filled(&[1, 1, 2, 2], 0.8))?;
            let p = g.constant(filled(&[1, 1, 2, 2], 0.5))?;
            bernoulli_kl(g, p, t)
        });
        assert!((got - 0.19274475702175753).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn kl_is_zero_exactly_at_equal_inputs() {
        let mut rng = RngState::new(7);
        for _ in 0..50 {
            let shape = [2usize, 1, 3, 3];
            let t = rand_p(&mut rng, &shape, 0.0, 1.0);
            let got = eval(|g| {
                let ti = g.constant(t.clone())?;
                let pi = g.constant(t.clone())?;
                bernoulli_kl(g, pi, ti)
            });
            assert_eq!(got, 0.0);
        }
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut rng = RngState::new(8);
        for _ in 0..1000 {
            let shape = [1usize, 1, 2, 2];
            let t = rand_p(&mut rng, &shape, 0.0, 1.0);
            let p = rand_p(&mut rng, &shape, 0.0, 1.0);
            let got = eval(|g| {
                let ti = g.constant(t.clone())?;
                let pi = g.constant(p.clone())?;
                bernoulli_kl(g, pi, ti)
            });
            assert!(got >= 0.0, "negative divergence {got}");
        }
    }

    #[test]
    fn kl_stays_positive_for_nearby_inputs() {
        let got = eval(|g| {
            let t = g.constant(filled(&[1, 1, 1, 1], 0.4 + 1e-8))?;
            let p = g.constant(filled(&[1, 1, 1, 1], 0.4))?;
            bernoulli_kl(g, p, t)
        });
        assert!(got > 0.0, "got {got}");
    }

    #[test]
    fn kl_clamps_hard_probabilities_to_finite_values() {
        // Hard 0/1 on either side would otherwise hit ln(0).
        let got = eval(|g| {
            let t = g.constant(filled(&[1, 1, 1, 1], 1.0))?;
            let p = g.constant(filled(&[1, 1, 1, 1], 0.0))?;
            bernoulli_kl(g, p, t)
        });
        let want = eval(|g| {
            let t = g.constant(filled(&[1, 1, 1, 1], 1.0 - PROB_EPS))?;
            let p = g.constant(filled(&[1, 1, 1, 1], PROB_EPS))?;
            bernoulli_kl(g, p, t)
        });
        assert!(got.is_finite());
        assert_eq!(got, want);
    }

    #[test]
    fn focal_on_certain_target_at_even_odds() {
        // target 1, prediction 0.5: the plain term is ln 2; gamma = 2
        // scales it by (1/2)^2.
        let flat = eval(|g| {
            let t = g.constant(filled(&[1, 1, 1, 1], 1.0))?;
            let p = g.constant(filled(&[1, 1, 1, 1], 0.5))?;
            focal_loss(g, p, t, 0.0)
        });
        assert!((flat - 0.6931471805599453).abs() < 1e-12, "got {flat}");
        let curved = eval(|g| {
            let t = g.constant(filled(&[1, 1, 1, 1], 1.0))?;
            let p = g.constant(filled(&[1, 1, 1, 1], 0.5))?;
            focal_loss(g, p, t, 2.0)
        });
        assert!(
            (curved - 0.17328679513998632).abs() < 1e-12,
            "got {curved}"
        );
    }

    #[test]
    fn focal_at_zero_gamma_equals_bce() {
        let mut rng = RngState::new(9);
        for _ in 0..1000 {
            let shape = [1usize, 1, 2, 2];
            let t = rand_p(&mut rng, &shape, 0.0, 1.0);
            let p = rand_p(&mut rng, &shape, 0.0, 1.0);
            let focal = eval(|g| {
                let ti = g.constant(t.clone())?;
                let pi = g.constant(p.clone())?;
                focal_loss(g, pi, ti, 0.0)
            });
            let bce = eval(|g| {
                let ti = g.constant(t.clone())?;
                let pi = g.constant(p.clone())?;
                bce_loss(g, pi, ti)
            });
            assert!((focal - bce).abs() <= 1e-12, "focal {focal} vs bce {bce}");
        }
    }

    #[test]
    fn focal_rejects_negative_gamma() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(filled(&[1, 1, 1, 1], 1.0)).unwrap();
        let p = g.constant(filled(&[1, 1, 1, 1], 0.5)).unwrap();
        assert!(focal_loss(&mut g, p, t, -0.5).is_err());
        assert!(focal_loss(&mut g, p, t, f64::NAN).is_err());
    }

    #[test]
    fn ce_of_uniform_two_class_prediction() {
        // One-hot target against a (0.5, 0.5) prediction: ln 2 per pixel.
        let got = eval(|g| {
            let mut t = ArrayD::zeros(IxDyn(&[1, 2, 2, 2]));
            for i in 0..2 {
                for j in 0..2 {
                    t[[0, 0, i, j]] = 1.0;
                }
            }
            let ti = g.constant(t)?;
            let pi = g.constant(filled(&[1, 2, 2, 2], 0.5))?;
            ce_loss(g, pi, ti)
        });
        assert!((got - 0.6931471805599453).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn single_channel_ce_scores_both_outcomes() {
        // With one channel the complementary term must be present: a
        // confident wrong background prediction is punished.
        let got = eval(|g| {
            let t = g.constant(filled(&[1, 1, 1, 1], 0.0))?;
            let p = g.constant(filled(&[1, 1, 1, 1], 0.5))?;
            ce_loss(g, p, t)
        });
        assert!((got - 0.6931471805599453).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn dice_loss_vanishes_on_perfect_binary_prediction() {
        let mut t = ArrayD::zeros(IxDyn(&[1, 1, 3, 3]));
        t[[0, 0, 1, 1]] = 1.0;
        t[[0, 0, 1, 2]] = 1.0;
        let got = eval(|g| {
            let ti = g.constant(t.clone())?;
            let pi = g.constant(t.clone())?;
            soft_dice_loss(g, pi, ti)
        });
        assert_eq!(got, 0.0);
    }

    #[test]
    fn dice_loss_on_disjoint_prediction() {
        // |p| = 2, |t| = 3, no overlap: ratio (0 + 1)/(5 + 1), loss 5/6.
        let mut t = ArrayD::zeros(IxDyn(&[1, 1, 4, 4]));
        t[[0, 0, 0, 0]] = 1.0;
        t[[0, 0, 0, 1]] = 1.0;
        t[[0, 0, 0, 2]] = 1.0;
        let mut p = ArrayD::zeros(IxDyn(&[1, 1, 4, 4]));
        p[[0, 0, 3, 0]] = 1.0;
        p[[0, 0, 3, 1]] = 1.0;
        let got = eval(|g| {
            let ti = g.constant(t.clone())?;
            let pi = g.constant(p.clone())?;
            soft_dice_loss(g, pi, ti)
        });
        assert!((got - 5.0 / 6.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn dice_loss_tolerates_empty_prediction_and_reference() {
        let got = eval(|g| {
            let ti = g.constant(filled(&[1, 1, 3, 3], 0.0))?;
            let pi = g.constant(filled(&[1, 1, 3, 3], 0.0))?;
            soft_dice_loss(g, pi, ti)
        });
        assert_eq!(got, 0.0);
    }

    #[test]
    fn composite_losses_are_weighted_sums() {
        let mut rng = RngState::new(10);
        let shape = [2usize, 1, 3, 3];
        let prior = rand_p(&mut rng, &shape, 0.05, 0.95);
        let mask = rand_p(&mut rng, &shape, 0.0, 1.0).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let pn = rand_p(&mut rng, &shape, 0.05, 0.95);
        let tn = rand_p(&mut rng, &shape, 0.0, 1.0).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let parts = {
            let mut g = Graph::<f64>::new();
            let pr = g.constant(prior.clone()).unwrap();
            let ms = g.constant(mask.clone()).unwrap();
            let pni = g.constant(pn.clone()).unwrap();
            let tni = g.constant(tn.clone()).unwrap();
            let ce = ce_loss(&mut g, pr, ms).unwrap();
            let dice = soft_dice_loss(&mut g, pr, ms).unwrap();
            let kl = bernoulli_kl(&mut g, pni, tni).unwrap();
            let focal = focal_loss(&mut g, pni, tni, 2.0).unwrap();
            [
                g.scalar_value(ce).unwrap(),
                g.scalar_value(dice).unwrap(),
                g.scalar_value(kl).unwrap(),
                g.scalar_value(focal).unwrap(),
            ]
        };
        let (lambda_focal, lambda_diff) = (0.7, 1.3);
        let want =
            parts[0] + parts[1] + lambda_diff * (parts[2] + lambda_focal * parts[3]);
        let got = eval(|g| {
            let pr = g.constant(prior.clone())?;
            let ms = g.constant(mask.clone())?;
            let pni = g.constant(pn.clone())?;
            let tni = g.constant(tn.clone())?;
            hybrid_loss(g, pr, ms, pni, tni, 2.0, lambda_focal, lambda_diff)
        });
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // Gradients with respect to the predictions, against central
        // differences at f64. Targets are held fixed; predictions stay
        // well inside (0, 1) so the probability clamp is inactive.
        let mut rng = RngState::new(11);
        for _ in 0..25 {
            let shape = [2usize, 2, 3, 3];
            let p = rand_p(&mut rng, &shape, 0.05, 0.95);
            let t = rand_p(&mut rng, &shape, 0.0, 1.0)
                .mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
            let tc = t.clone();
            check_gradients(&[p.clone()], 1e-5, 1e-4, &|g, ids| {
                let ti = g.constant(tc.clone())?;
                bernoulli_kl(g, ids[0], ti)
            })
            .unwrap();
            let tc = t.clone();
            check_gradients(&[p.clone()], 1e-5, 1e-4, &|g, ids| {
                let ti = g.constant(tc.clone())?;
                focal_loss(g, ids[0], ti, 2.0)
            })
            .unwrap();
            let tc = t.clone();
            check_gradients(&[p.clone()], 1e-5, 1e-4, &|g, ids| {
                let ti = g.constant(tc.clone())?;
                ce_loss(g, ids[0], ti)
            })
            .unwrap();
            let tc = t.clone();
            check_gradients(&[p.clone()], 1e-5, 1e-4, &|g, ids| {
                let ti = g.constant(tc.clone())?;
                soft_dice_loss(g, ids[0], ti)
            })
            .unwrap();
        }
    }

    #[test]
    fn hybrid_gradient_matches_finite_differences() {
        let mut rng = RngState::new(12);
        let shape = [1usize, 1, 3, 3];
        let prior = rand_p(&mut rng, &shape, 0.1, 0.9);
        let pn = rand_p(&mut rng, &shape, 0.1, 0.9);
        let mask = rand_p(&mut rng, &shape, 0.0, 1.0).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let tn = rand_p(&mut rng, &shape, 0.0, 1.0).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        check_gradients(&[prior, pn], 1e-5, 1e-4, &|g, ids| {
            let ms = g.constant(mask.clone())?;
            let tni = g.constant(tn.clone())?;
            hybrid_loss(g, ids[0], ms, ids[1], tni, 2.0, 1.0, 1.0)
        })
        .unwrap();
    }
}
