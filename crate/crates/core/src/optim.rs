//! Decoupled weight decay Adam and the cosine step-size schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::params::Params;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// `base * (1 + cos(pi * step / total)) / 2`, clamped at `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (PI * t).cos())
}

/// Adam moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Array2<T>>,
    second: BTreeMap<String, Array2<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// Number of completed updates.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the bias-correction counter; call once per optimisation step
    /// before the per-group [`AdamW::update`] calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one update to every tensor of `params` that has a gradient.
    ///
    /// Weight decay skips single-row tensors (biases and normalisation affines).
    pub fn update(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        assert!(self.step > 0, "begin_step before update");
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr_t = T::of(lr);
        let eps = T::of(c.eps);
        let decay = T::of(lr * c.weight_decay);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| Array2::zeros(p.dim()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Array2::zeros(p.dim()));
            let apply_decay = p.nrows() > 1;
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                if apply_decay {
                    *p -= decay * *p;
                }
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }

    /// Moment tensors as `m/<name>` and `v/<name>` entries.
    pub fn moments(&self) -> Params<T> {
        let mut out = Params::new();
        for (k, m) in &self.first {
            out.insert(format!("m/{k}"), m.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("v/{k}"), v.clone());
        }
        out
    }

    /// Inverse of [`AdamW::moments`].
    pub fn restore(config: AdamWConfig, step: u64, moments: &Params<T>) -> Self {
        let mut opt = Self::new(config);
        opt.step = step;
        for (k, t) in moments.iter() {
            if let Some(name) = k.strip_prefix("m/") {
                opt.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v/") {
                opt.second.insert(name.to_string(), t.clone());
            }
        }
        opt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
        assert!((cosine_lr(1e-3, 5, 10) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 10, 10).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 20, 10).abs() < 1e-18);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let mut p = Params::<f32>::new();
        p.insert("w", array![[0.3f32, -1.7], [2.0, 1e-7]]);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.insert("w", array![[1.0f32, -2.0], [3.0, 4.0]]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.begin_step();
        opt.update(&mut p, &g, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Params::<f64>::new();
        p.insert("b", array![[1.0, 1.0]]);
        let mut g = Params::new();
        g.insert("b", array![[0.5, -3.0]]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.begin_step();
        opt.update(&mut p, &g, 0.1);
        let b = p.tensor("b");
        assert!((b[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((b[[0, 1]] - 1.1).abs() < 1e-6);
    }
}
