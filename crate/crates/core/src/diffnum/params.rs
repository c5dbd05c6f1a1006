use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Tensor,
}

/// Named trainable tensors, each paired with a gradient slot of the same
/// shape. Iteration order is the lexicographic order of names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter; its gradient is reset to zero.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.slots.insert(name.into(), Slot { value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for s in self.slots.values_mut() {
            s.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        slot.grad.same_shape(g, "accumulate_grad")?;
        slot.grad.add_assign(g);
        Ok(())
    }

    /// New store holding copies of the parameters whose names start with `prefix`.
    pub fn extract_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, s) in self.slots.range(prefix.to_string()..) {
            if !k.starts_with(prefix) {
                break;
            }
            out.insert(k.clone(), s.value.clone());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name
/// and created lazily on the first step.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, slot) in params.slots.iter_mut() {
            let n = slot.value.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: slot.value.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
            let grad = slot.grad.data();
            for (i, w) in slot.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::row(vec![1.0, -2.0]));
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p).unwrap();
        assert_eq!(p.value("w"), before.value("w"));
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::row(vec![0.0, 0.0]));
        p.accumulate_grad("w", &Tensor::row(vec![3.0, -0.5])).unwrap();
        let mut adam = Adam::new(AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        });
        adam.step(&mut p).unwrap();
        // first step: m̂ = g, v̂ = g², update = lr·g/(|g|+eps)
        let w = p.value("w").unwrap().data();
        assert!((w[0] + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((w[1] - 0.01 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn grad_shape_checked() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::row(vec![0.0, 0.0]));
        let err = p.accumulate_grad("w", &Tensor::scalar(1.0)).unwrap_err();
        assert_eq!(err.kind(), "ShapeMismatch");
    }

    #[test]
    fn prefix_extraction() {
        let mut p = ParamStore::new();
        p.insert("a/x", Tensor::scalar(1.0));
        p.insert("b/y", Tensor::scalar(2.0));
        p.insert("a/z", Tensor::scalar(3.0));
        let a = p.extract_prefix("a/");
        assert_eq!(a.names().collect::<Vec<_>>(), vec!["a/x", "a/z"]);
    }
}
