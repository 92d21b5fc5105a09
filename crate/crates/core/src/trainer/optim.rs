//! Adam with decoupled weight decay.
//!
//! For each parameter with a gradient `g` at its `t`-th update:
//!
//! ```text
//! p ← p · (1 − lr·wd)
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! p ← p − (lr / (1 − β₁ᵗ)) · m / (√v / √(1 − β₂ᵗ) + ε)
//! ```
//!
//! Parameters without a gradient after backward are skipped entirely, so
//! their values and moments stay bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

/// Moments exist only for parameters that have been updated at least once.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub config: AdamWConfig,
    moments: Vec<Option<Moments<F>>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: Vec::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments<F>> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }

    /// Installs moments restored from a checkpoint.
    pub fn set_moments(&mut self, id: ParamId, moments: Moments<F>) {
        if self.moments.len() <= id.index() {
            self.moments.resize_with(id.index() + 1, || None);
        }
        self.moments[id.index()] = Some(moments);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Moments<F>)> {
        self.moments
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.as_ref().map(|m| (i, m)))
    }

    /// One update of every trainable parameter that holds a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        let c = self.config;
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let eps = F::of(c.eps);
        let decay = F::of(1.0 - lr * c.weight_decay);
        for (id, p) in store.iter_mut() {
            if !p.trainable() {
                continue;
            }
            let Some(g) = p.grad().map(|g| g.data().to_vec()) else {
                continue;
            };
            let st = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: vec![F::zero(); g.len()],
                v: vec![F::zero(); g.len()],
                step: 0,
            });
            st.step += 1;
            let t = st.step as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2_sqrt = F::of((1.0 - c.beta2.powi(t)).sqrt());
            let step_size = F::of(lr / bc1);
            let values = p.value_mut().data_mut();
            for k in 0..g.len() {
                values[k] *= decay;
                st.m[k] = b1 * st.m[k] + one_b1 * g[k];
                st.v[k] = b2 * st.v[k] + one_b2 * g[k] * g[k];
                let denom = st.v[k].sqrt() / bc2_sqrt + eps;
                values[k] -= step_size * st.m[k] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    /// Loss `Σ (x − c)²` so that `g = 2(x − c)`.
    fn bowl_grad(store: &mut ParamStore<f64>, id: ParamId, c: &[f64]) {
        store.zero_grads();
        let mut tape = Tape::new();
        let x = tape.param(store, id);
        let target = tape.constant(Tensor::vector(c.to_vec()));
        let neg = tape.scale(target, -1.0).unwrap();
        let diff = tape.add(x, neg).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss, store).unwrap();
    }

    #[test]
    fn first_steps_match_hand_computation() {
        let x0 = [1.5, -0.25, 3.0];
        let c = [0.5, 0.5, -1.0];
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(x0.to_vec()), true).unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let lr = 0.01;
        let mut opt = OptimizerState::new(cfg);

        let mut x = x0.to_vec();
        let mut m = [0.0; 3];
        let mut v = [0.0; 3];
        for t in 1..=3 {
            bowl_grad(&mut store, id, &c);
            opt.step(&mut store, lr).unwrap();
            for k in 0..3 {
                let g = 2.0 * (x[k] - c[k]);
                x[k] *= 1.0 - lr * 0.1;
                m[k] = 0.9 * m[k] + 0.1 * g;
                v[k] = 0.999 * v[k] + 0.001 * g * g;
                let mhat = m[k] / (1.0 - 0.9f64.powi(t));
                let vhat = v[k] / (1.0 - 0.999f64.powi(t));
                x[k] -= lr * mhat / (vhat.sqrt() + 1e-8);
            }
            let got = store.get(id).value().data();
            for k in 0..3 {
                assert!((got[k] - x[k]).abs() < 1e-12, "step {t}: {} vs {}", got[k], x[k]);
            }
        }
        assert_eq!(opt.moments(id).unwrap().step, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step has magnitude lr (up to eps).
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![2.0]), true).unwrap();
        bowl_grad(&mut store, id, &[0.0]);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        opt.step(&mut store, 0.1).unwrap();
        assert!((store.get(id).value().data()[0] - 1.9).abs() < 1e-8);
    }

    #[test]
    fn parameters_without_gradients_are_untouched() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0]), true).unwrap();
        let b = store.add("b", Tensor::vector(vec![1.0]), true).unwrap();
        let mut opt = OptimizerState::new(AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        bowl_grad(&mut store, a, &[0.0]);
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(b).value().data(), &[1.0]);
        assert!(opt.moments(b).is_none());
        assert!(opt.moments(a).is_some());
        assert!(opt.step(&mut store, f64::NAN).is_err());
    }
}
