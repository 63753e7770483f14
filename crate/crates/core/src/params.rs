//! Named parameter tensors and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

/// Ordered map of named `f64` tensors. Iteration order is by name, which
/// keeps reductions and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet(BTreeMap<String, ArrayD<f64>>);

impl ParamSet {
    pub fn new() -> Self {
        ParamSet(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.0.get(name)
    }

    /// Panics on unknown names; model code only asks for names it created.
    pub fn tensor(&self, name: &str) -> &ArrayD<f64> {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.0
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        )
    }

    /// Adds `other` into `self`, creating missing entries.
    pub fn accumulate(&mut self, other: &ParamSet) {
        for (k, v) in &other.0 {
            match self.0.get_mut(k) {
                Some(t) => *t += v,
                None => {
                    self.0.insert(k.clone(), v.clone());
                }
            }
        }
    }

    /// Adds a gradient into the named tensor, creating it if needed.
    pub fn add(&mut self, name: &str, grad: ArrayD<f64>) {
        match self.0.get_mut(name) {
            Some(t) => *t += &grad,
            None => {
                self.0.insert(name.to_string(), grad);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.0.values_mut() {
            v.mapv_inplace(|x| x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn scalar(&self, name: &str) -> f64 {
        self.tensor(name)[IxDyn(&[0])]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam; `weight_decay` is an L2 term added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub first: ParamSet,
    pub second: ParamSet,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        Adam {
            cfg,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    /// One update. Parameters without a gradient entry are left unchanged.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.0.iter_mut() {
            let Some(g) = grads.0.get(name) else { continue };
            let m = self.first.0.get_mut(name).expect("moment exists");
            let v = self.second.0.get_mut(name).expect("moment exists");
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + c.weight_decay * *p;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mh = *m / bias1;
                let vh = *v / bias2;
                *p -= lr * mh / (vh.sqrt() + c.eps);
            });
        }
    }
}

/// Cosine annealing from `base` at epoch 0 towards 0 at `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = epoch.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}
