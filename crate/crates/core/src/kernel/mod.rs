//! Closed-form Bernoulli diffusion mathematics.
//!
//! The forward process interpolates a hard mask toward the segmentor's prior
//! probabilities; the reverse process walks back using the exact Bernoulli
//! posterior. Every operation here is elementwise over pixels and channels:
//! there is no spatial coupling, so the per-pixel formulas are the whole
//! story.
//!
//! Per-pixel transition and marginal, with prior `f` and schedule rates
//! `beta_t`, `alpha_t = 1 - beta_t`, `abar_t = prod alpha`:
//!
//! ```text
//! q(y_t = 1 | y_{t-1}, f)  = (1 - beta_t) y_{t-1} + beta_t f
//! q(y_t = 1 | y_0, f)      = abar_t y_0 + (1 - abar_t) f
//! eps ~ B((1 - abar_t) |f - y_0|),   y_t = y_0 XOR eps
//! ```
//!
//! The two-channel posterior and the calibration that turns a noise estimate
//! into the reverse-step mean live in [`posterior_prob`] and [`calibrate`];
//! [`graph`] re-expresses the same formulas on the autodiff tape for
//! training.

pub mod graph;

use crate::error::{Error, Result};
use crate::map::{check_same_shape, BinaryMask, ProbMap};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use ndarray::Array3;

/// One forward transition `q(y_t | y_{t-1}, f)`: each pixel keeps its value
/// with probability `1 - beta_t` and resamples from the prior with
/// probability `beta_t`.
pub fn forward_step<S: Scalar>(
    y_prev: &BinaryMask,
    prior: &ProbMap<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
    rng: &mut RngState,
) -> Result<BinaryMask> {
    check_same_shape("forward_step", y_prev.shape(), prior.shape())?;
    let p = sched.lookup(t)?;
    let mut out = y_prev.data().clone();
    ndarray::Zip::from(&mut out)
        .and(prior.data())
        .for_each(|y, &f| {
            let keep = S::one() - p.beta;
            let prob = keep * S::of_usize(*y as usize) + p.beta * f;
            *y = rng.bernoulli(prob);
        });
    BinaryMask::new(out)
}

/// Marginal mean `abar_t * y0 + (1 - abar_t) * f`. `t = 0` returns `y0`
/// itself as probabilities.
pub fn forward_marginal_prob<S: Scalar>(
    y0: &BinaryMask,
    prior: &ProbMap<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
) -> Result<ProbMap<S>> {
    check_same_shape("forward_marginal_prob", y0.shape(), prior.shape())?;
    let abar = sched.alpha_bar(t)?;
    let data = ndarray::Zip::from(y0.data())
        .and(prior.data())
        .map_collect(|&y, &f| abar * S::of_usize(y as usize) + (S::one() - abar) * f);
    ProbMap::new(data)
}

/// Draw the Bernoulli noise `eps ~ B((1 - abar_t) |f - y0|)` and form the
/// latent `y_t = y0 XOR eps`. The marginal of `y_t` equals
/// [`forward_marginal_prob`] exactly: flipping `y0` with probability
/// `(1 - abar_t) |f - y0|` lands on the interpolated mean for both values of
/// `y0`.
pub fn sample_noise_and_latent<S: Scalar>(
    y0: &BinaryMask,
    prior: &ProbMap<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
    rng: &mut RngState,
) -> Result<(BinaryMask, BinaryMask)> {
    check_same_shape("sample_noise_and_latent", y0.shape(), prior.shape())?;
    let abar = if t == 0 {
        S::one()
    } else {
        sched.lookup(t)?.alpha_bar
    };
    let eps_data = ndarray::Zip::from(y0.data())
        .and(prior.data())
        .map_collect(|&y, &f| {
            let p = (S::one() - abar) * (f - S::of_usize(y as usize)).abs();
            rng.bernoulli(p)
        });
    let eps = BinaryMask::new(eps_data)?;
    let y_t = y0.xor(&eps)?;
    Ok((eps, y_t))
}

/// The two unnormalized posterior channels at a single pixel.
///
/// Channel `k` of the first factor is the likelihood of observing `y_t` from
/// `y_{t-1} = k`; the second factor is the marginal of `y_{t-1}` given a
/// (possibly soft) `y0`. The scalar `(1 - alpha_t)|1 - y_t - f|` is shared by
/// both channels of the first factor.
#[inline]
fn posterior_channels<S: Scalar>(
    y_t: S,
    y0: S,
    f: S,
    alpha: S,
    abar_prev: S,
) -> (S, S) {
    let one = S::one();
    let shared = (one - alpha) * (one - y_t - f).abs();
    let a0 = alpha * (one - y_t) + shared;
    let a1 = alpha * y_t + shared;
    let b0 = abar_prev * (one - y0) + (one - abar_prev) * (one - f);
    let b1 = abar_prev * y0 + (one - abar_prev) * f;
    (a0 * b0, a1 * b1)
}

/// Exact Bernoulli posterior `P(y_{t-1} = 1 | y_t, y0, f)`.
///
/// `y0` may be a soft estimate in `[0, 1]`; the calibration path feeds
/// `|y_t - eps_hat|` here. A zero normalizer (both channels vanish) is
/// reported with the offending pixel; the schedule clamp makes it unreachable
/// for valid inputs.
pub fn posterior_prob<S: Scalar>(
    y_t: &BinaryMask,
    y0: &ProbMap<S>,
    prior: &ProbMap<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
) -> Result<ProbMap<S>> {
    check_same_shape("posterior_prob", y_t.shape(), y0.shape())?;
    check_same_shape("posterior_prob", y_t.shape(), prior.shape())?;
    let p = sched.lookup(t)?;
    let (h, w, c) = y_t.shape();
    let mut out = Array3::<S>::zeros((h, w, c));
    for row in 0..h {
        for col in 0..w {
            for chan in 0..c {
                let idx = (row, col, chan);
                let yt = S::of_usize(y_t.data()[idx] as usize);
                let (p0, p1) = posterior_channels(
                    yt,
                    y0.data()[idx],
                    prior.data()[idx],
                    p.alpha,
                    p.alpha_bar_prev,
                );
                let norm = p0 + p1;
                if norm == S::zero() {
                    return Err(Error::ZeroNormalizer { row, col, chan });
                }
                out[idx] = p1 / norm;
            }
        }
    }
    ProbMap::new(out)
}

/// Reverse-step mean via the calibration function: estimate the clean mask as
/// `|y_t - eps_hat|` and plug it into the posterior.
pub fn calibrate<S: Scalar>(
    y_t: &BinaryMask,
    eps_hat: &ProbMap<S>,
    prior: &ProbMap<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
) -> Result<ProbMap<S>> {
    check_same_shape("calibrate", y_t.shape(), eps_hat.shape())?;
    let y0_est = ndarray::Zip::from(y_t.data())
        .and(eps_hat.data())
        .map_collect(|&y, &e| (S::of_usize(y as usize) - e).abs());
    posterior_prob(y_t, &ProbMap::new(y0_est)?, prior, t, sched)
}

/// One ancestral reverse step: sample `y_{t-1} ~ B(calibrate(...))`.
pub fn ddpm_step<S: Scalar>(
    y_t: &BinaryMask,
    eps_hat: &ProbMap<S>,
    prior: &ProbMap<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
    rng: &mut RngState,
) -> Result<BinaryMask> {
    Ok(calibrate(y_t, eps_hat, prior, t, sched)?.sample(rng))
}

/// The three mixing coefficients of the deterministic-leaning reverse step
/// with `sigma_t = (1 - abar_{t-1}) / (1 - abar_t)`, applied to
/// `(y_t, |y_t - eps_hat|, f)` in that order. They are non-negative, sum to
/// one, and the prior coefficient is algebraically zero.
pub fn ddim_coefficients<S: Scalar>(
    sched: &NoiseSchedule<S>,
    t: usize,
) -> Result<(S, S, S)> {
    let p = sched.lookup(t)?;
    let one = S::one();
    if p.alpha_bar >= one {
        return Err(Error::InvalidArg(format!(
            "sigma undefined at t={t}: alpha_bar[t] = 1"
        )));
    }
    let sigma = (one - p.alpha_bar_prev) / (one - p.alpha_bar);
    let c_latent = sigma;
    let c_clean = p.alpha_bar_prev - sigma * p.alpha_bar;
    let c_prior = (one - p.alpha_bar_prev) - (one - p.alpha_bar) * sigma;
    Ok((c_latent, c_clean, c_prior))
}

/// Mean parameter of the accelerated reverse step.
pub fn ddim_mean<S: Scalar>(
    y_t: &BinaryMask,
    eps_hat: &ProbMap<S>,
    prior: &ProbMap<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
) -> Result<ProbMap<S>> {
    check_same_shape("ddim_mean", y_t.shape(), eps_hat.shape())?;
    check_same_shape("ddim_mean", y_t.shape(), prior.shape())?;
    let (c_latent, c_clean, c_prior) = ddim_coefficients(sched, t)?;
    let (h, w, c) = y_t.shape();
    let mut out = Array3::<S>::zeros((h, w, c));
    for row in 0..h {
        for col in 0..w {
            for chan in 0..c {
                let idx = (row, col, chan);
                let yt = S::of_usize(y_t.data()[idx] as usize);
                let clean = (yt - eps_hat.data()[idx]).abs();
                let m = c_latent * yt + c_clean * clean + c_prior * prior.data()[idx];
                // Convex combination of values in [0, 1]; shave rounding dust.
                out[idx] = m.max(S::zero()).min(S::one());
            }
        }
    }
    ProbMap::new(out)
}

/// One accelerated reverse step: sample from [`ddim_mean`].
pub fn ddim_step<S: Scalar>(
    y_t: &BinaryMask,
    eps_hat: &ProbMap<S>,
    prior: &ProbMap<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
    rng: &mut RngState,
) -> Result<BinaryMask> {
    Ok(ddim_mean(y_t, eps_hat, prior, t, sched)?.sample(rng))
}
