//! Named parameter storage and the AdamW update rule.
//!
//! Parameters live outside any [`Graph`](crate::autodiff::Graph): a
//! [`ParamStore`] owns the arrays between steps, each training step records
//! them as leaves, and [`AdamW`] applies the resulting gradients in place.
//! Weight decay is decoupled — it scales the parameter directly instead of
//! being folded into the gradient — so a parameter with zero gradient still
//! shrinks by exactly `lr * weight_decay` per step.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::ArrayD;

/// Handle to one parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, name-addressable collection of parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: ArrayD<S>) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::InvalidArg(format!("duplicate parameter name {name:?}")));
        }
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "param init" });
        }
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.values[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Total element count across all parameters.
    pub fn element_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [ArrayD<S>] {
        &mut self.values
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> AdamWConfig {
        self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter in `store`. `grads[i]` is the
    /// gradient for parameter `i`; `None` (a parameter the recorded loss
    /// never touched) is treated as a zero gradient, so its moments decay
    /// and weight decay still applies.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<ArrayD<S>>]) -> Result<()> {
        let all = 0..store.len();
        self.step_slice(store, grads, all)
    }

    /// Apply one update to the parameters with indices in `range` only.
    /// Everything outside the range — values and moments alike — is left
    /// bit-identical, which is what makes alternating two optimizers over
    /// disjoint slices of one store an exact freeze of the other slice.
    pub fn step_slice(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[Option<ArrayD<S>>],
        range: std::ops::Range<usize>,
    ) -> Result<()> {
        let params = store.values_mut();
        if grads.len() != params.len() {
            return Err(Error::InvalidArg(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if range.end > params.len() {
            return Err(Error::InvalidArg(format!(
                "parameter range {range:?} exceeds store of {}",
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArg(format!(
                "optimizer state holds {} moments for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for i in range.clone() {
            if let Some(g) = &grads[i] {
                if g.shape() != params[i].shape() {
                    return Err(Error::ShapeMismatch {
                        ctx: "optimizer gradient",
                        expected: params[i].shape().to_vec(),
                        got: g.shape().to_vec(),
                    });
                }
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: "optimizer gradient" });
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::of(1.0 - self.cfg.beta1.powi(t));
        let bc2 = S::of(1.0 - self.cfg.beta2.powi(t));
        let b1 = S::of(self.cfg.beta1);
        let b2 = S::of(self.cfg.beta2);
        let one = S::one();
        let lr = S::of(self.cfg.lr);
        let eps = S::of(self.cfg.eps);
        let decay = S::of(self.cfg.lr * self.cfg.weight_decay);

        for i in range {
            let zero = ArrayD::zeros(params[i].raw_dim());
            let g = grads[i].as_ref().unwrap_or(&zero);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            ndarray::Zip::from(&mut params[i])
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p = *p - decay * *p - lr * mhat / (vhat.sqrt() + eps);
                });
            if !params[i].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer update" });
            }
        }
        Ok(())
    }

    /// Snapshot of the internal state, for checkpointing.
    pub fn state(&self) -> (u64, &[ArrayD<S>], &[ArrayD<S>]) {
        (self.step, &self.m, &self.v)
    }

    /// Rebuild an optimizer mid-run from a snapshot.
    pub fn from_state(
        cfg: AdamWConfig,
        step: u64,
        m: Vec<ArrayD<S>>,
        v: Vec<ArrayD<S>>,
    ) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::InvalidArg(format!(
                "moment lists of lengths {} and {}",
                m.len(),
                v.len()
            )));
        }
        Ok(AdamW { cfg, step, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use ndarray::{ArrayD, IxDyn};

    fn single_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", ArrayD::from_elem(IxDyn(&[1]), v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let mut store = single_param(2.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        });
        let zero = ArrayD::from_elem(IxDyn(&[1]), 0.0);
        opt.step(&mut store, &[Some(zero)]).unwrap();
        // p <- p (1 - lr wd): the moment estimate stays exactly zero.
        let want = 2.0 * (1.0 - 0.1 * 0.01);
        let got = store.value(ParamId(0))[[0]];
        assert!((got - want).abs() < 1e-15, "got {got}, want {want}");
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_learning_rate() {
        let mut store = single_param(5.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let g = ArrayD::from_elem(IxDyn(&[1]), 1.0);
        opt.step(&mut store, &[Some(g)]).unwrap();
        // Bias correction makes mhat = 1, vhat = 1 on the first step, so
        // the move is lr / (1 + eps).
        let delta = store.value(ParamId(0))[[0]] - 5.0;
        assert!((delta + 1e-4).abs() < 1e-10, "moved by {delta}");
    }

    #[test]
    fn missing_gradient_matches_explicit_zero() {
        let run = |grad: Option<ArrayD<f64>>| {
            let mut store = single_param(1.5);
            let mut opt = AdamW::new(AdamWConfig::default());
            // A couple of real steps first so the moments are non-trivial.
            for _ in 0..3 {
                let g = ArrayD::from_elem(IxDyn(&[1]), 0.25);
                opt.step(&mut store, &[Some(g)]).unwrap();
            }
            opt.step(&mut store, &[grad]).unwrap();
            store.value(ParamId(0))[[0]].to_bits()
        };
        assert_eq!(run(None), run(Some(ArrayD::from_elem(IxDyn(&[1]), 0.0))));
    }

    #[test]
    fn drives_a_quadratic_to_its_minimum() {
        let mut store = single_param(-4.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..2000 {
            let mut g = Graph::<f64>::new();
            let p = g.leaf(store.value(ParamId(0)).clone(), true).unwrap();
            let shifted = g.add_scalar(p, -3.0).unwrap();
            let sq = g.mul(shifted, shifted).unwrap();
            let loss = g.mean(sq).unwrap();
            g.backward(loss).unwrap();
            let grads = vec![g.grad(p).cloned()];
            opt.step(&mut store, &grads).unwrap();
        }
        let p = store.value(ParamId(0))[[0]];
        assert!((p - 3.0).abs() < 1e-3, "converged to {p}");
    }

    #[test]
    fn update_is_deterministic() {
        let run = || {
            let mut store = single_param(0.7);
            let mut opt = AdamW::new(AdamWConfig::default());
            for k in 0..10 {
                let g = ArrayD::from_elem(IxDyn(&[1]), 0.1 * (k as f64) - 0.3);
                opt.step(&mut store, &[Some(g)]).unwrap();
            }
            store.value(ParamId(0))[[0]].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut store = single_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let g = ArrayD::from_elem(IxDyn(&[1]), f64::NAN);
        assert!(opt.step(&mut store, &[Some(g)]).is_err());
    }

    #[test]
    fn duplicate_parameter_names_are_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", ArrayD::zeros(IxDyn(&[2]))).unwrap();
        assert!(s.add("w", ArrayD::zeros(IxDyn(&[2]))).is_err());
    }

    #[test]
    fn step_slice_leaves_other_parameters_bit_identical() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", ArrayD::from_elem(IxDyn(&[3]), 1.25)).unwrap();
        store.add("b", ArrayD::from_elem(IxDyn(&[2]), -0.75)).unwrap();
        let before: Vec<u64> = store.value(ParamId(1)).iter().map(|v| v.to_bits()).collect();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5, // decay would visibly move any touched parameter
            ..AdamWConfig::default()
        });
        // A gradient is even supplied for the out-of-range parameter; the
        // slice boundary, not gradient presence, decides what moves.
        let ga = ArrayD::from_elem(IxDyn(&[3]), 0.3);
        let gb = ArrayD::from_elem(IxDyn(&[2]), 9.9);
        opt.step_slice(&mut store, &[Some(ga), Some(gb)], 0..1).unwrap();
        let after: Vec<u64> = store.value(ParamId(1)).iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after, "out-of-slice parameter changed");
        let (_, m, _) = opt.state();
        assert!(m[1].iter().all(|v| *v == 0.0), "out-of-slice moment changed");
        assert!(m[0].iter().all(|v| *v != 0.0), "in-slice moment untouched");
    }

    #[test]
    fn disjoint_slice_optimizers_do_not_interfere() {
        let grad = |v: f64| ArrayD::from_elem(IxDyn(&[1]), v);
        // Joint run: two optimizers alternate over their own halves.
        let mut store = ParamStore::<f64>::new();
        store.add("left", ArrayD::from_elem(IxDyn(&[1]), 2.0)).unwrap();
        store.add("right", ArrayD::from_elem(IxDyn(&[1]), -1.0)).unwrap();
        let mut opt_l = AdamW::new(AdamWConfig::default());
        let mut opt_r = AdamW::new(AdamWConfig::default());
        for k in 0..7 {
            let g = 0.1 * (k as f64 + 1.0);
            opt_l.step_slice(&mut store, &[Some(grad(g)), None], 0..1).unwrap();
            opt_r.step_slice(&mut store, &[None, Some(grad(-g))], 1..2).unwrap();
        }
        // Solo runs of each half must reproduce the joint result exactly.
        let mut solo = ParamStore::<f64>::new();
        solo.add("left", ArrayD::from_elem(IxDyn(&[1]), 2.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        for k in 0..7 {
            let g = 0.1 * (k as f64 + 1.0);
            opt.step(&mut solo, &[Some(grad(g))]).unwrap();
        }
        assert_eq!(
            store.value(ParamId(0))[[0]].to_bits(),
            solo.value(ParamId(0))[[0]].to_bits()
        );
    }

    #[test]
    fn state_roundtrip_resumes_identically() {
        let mut a_store = single_param(2.5);
        let mut a = AdamW::new(AdamWConfig::default());
        for _ in 0..5 {
            let g = ArrayD::from_elem(IxDyn(&[1]), 0.4);
            a.step(&mut a_store, &[Some(g)]).unwrap();
        }
        let (step, m, v) = a.state();
        let mut b = AdamW::from_state(a.config(), step, m.to_vec(), v.to_vec()).unwrap();
        let mut b_store = ParamStore::new();
        b_store
            .add("p", a_store.value(ParamId(0)).clone())
            .unwrap();
        for _ in 0..5 {
            let g = ArrayD::from_elem(IxDyn(&[1]), 0.4);
            a.step(&mut a_store, &[Some(g.clone())]).unwrap();
            b.step(&mut b_store, &[Some(g)]).unwrap();
        }
        assert_eq!(
            a_store.value(ParamId(0))[[0]].to_bits(),
            b_store.value(ParamId(0))[[0]].to_bits()
        );
    }
}
