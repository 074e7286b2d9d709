//! Adam with bias correction and a step-wise exponential learning-rate decay.

use indexmap::IndexMap;

use crate::{Array, Gradients, ParamStore, Real, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate is multiplied by this factor every `decay_every` steps.
    pub decay_factor: f64,
    pub decay_every: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay_factor: 0.5, decay_every: 20_000 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    first: IndexMap<String, Array<T>>,
    second: IndexMap<String, Array<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: IndexMap::new(), second: IndexMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Learning rate applied at 1-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let decays = step.checked_div(self.config.decay_every).unwrap_or(0);
        self.config.lr * self.config.decay_factor.powi(decays as i32)
    }

    pub fn moments(&self, name: &str) -> Option<(&Array<T>, &Array<T>)> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    /// Applies one update. Parameters without a gradient entry are left alone.
    ///
    /// All gradients are validated before anything is modified, so a
    /// non-finite gradient aborts the whole step.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "adam",
                    detail: format!("`{name}`: param {:?} grad {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = self.lr_at(self.step);
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step_size = T::lit(lr / c1);
        let inv_c2_sqrt = T::lit(1.0 / c2.sqrt());
        let (b1, b2, eps) = (T::lit(b1), T::lit(b2), T::lit(self.config.eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self.first.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape().to_vec()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape().to_vec()));
            for (((p, m), v), &g) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v).sqrt() * inv_c2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// Moment arrays as named records (`m.<name>`, `v.<name>`) for checkpointing.
    pub fn export(&self) -> Vec<(String, Array<T>)> {
        let mut out = Vec::with_capacity(self.first.len() * 2);
        for (k, m) in &self.first {
            out.push((format!("m.{k}"), m.clone()));
        }
        for (k, v) in &self.second {
            out.push((format!("v.{k}"), v.clone()));
        }
        out
    }

    pub fn import(config: AdamConfig, step: u64, records: Vec<(String, Array<T>)>) -> Result<Self> {
        let mut adam = Self::new(config);
        adam.step = step;
        for (name, a) in records {
            if let Some(k) = name.strip_prefix("m.") {
                adam.first.insert(k.to_string(), a);
            } else if let Some(k) = name.strip_prefix("v.") {
                adam.second.insert(k.to_string(), a);
            } else {
                return Err(TensorError::Checkpoint(format!("unexpected optimizer record `{name}`")));
            }
        }
        Ok(adam)
    }
}
