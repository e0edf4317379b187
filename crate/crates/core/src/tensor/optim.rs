use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }
}

/// Adam with per-parameter step counts.
///
/// Parameters that receive no gradient in a step (for example the affine
/// of a domain that was not in the batch) are left untouched and their
/// moments do not decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub(crate) steps: Vec<u64>,
    pub(crate) m: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| s.ids().map(|id| vec![T::zero(); s.get(id).numel()]).collect();
        Adam {
            config,
            steps: vec![0; store.len()],
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// Rebuilds moment buffers from raw parts (checkpoint loading).
    pub fn from_parts(config: AdamConfig, steps: Vec<u64>, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<Self> {
        if steps.len() != m.len() || m.len() != v.len() {
            return Err(Error::invalid("adam state parts differ in length"));
        }
        Ok(Adam { config, steps, m, v })
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::invalid(format!(
                "adam: {} gradients, {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = T::of(1.0 - c.beta1.powi(t));
            let bc2 = T::of(1.0 - c.beta2.powi(t));
            let lr = T::of(c.learning_rate);
            let eps = T::of(c.eps);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(Error::shape("adam", "gradient length differs from parameter"));
            }
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
