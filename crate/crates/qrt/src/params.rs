//! Named parameter arrays with per-parameter Adam state.
//!
//! Entries keep insertion order so that gradient vectors, checkpoints, and
//! leaf registration are all deterministic.

use crate::autodiff::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone)]
struct Entry {
    name: String,
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let (r, c) = value.shape();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(e.value.shape(), value.shape(), "parameter shape is fixed");
        e.value = value;
    }

    /// Register every parameter as a graph leaf, in insertion order.
    pub fn leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        self.entries.iter().map(|e| g.leaf(e.value.clone())).collect()
    }

    /// One Adam update; `grads` must be in insertion order with matching shapes.
    pub fn adam_step(&mut self, grads: &[Tensor], cfg: &AdamConfig) {
        assert_eq!(grads.len(), self.entries.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (e, g) in self.entries.iter_mut().zip(grads.iter()) {
            assert_eq!(e.value.shape(), g.shape(), "gradient shape mismatch for {}", e.name);
            let (val, m, v) = (e.value.data_mut(), e.m.data_mut(), e.v.data_mut());
            for i in 0..val.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                val[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
    }

    /// Snapshot of the parameter values only (optimizer state excluded).
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }

    pub fn restore(&mut self, snap: &[(String, Tensor)]) {
        assert_eq!(snap.len(), self.entries.len(), "snapshot entry count mismatch");
        for ((name, value), e) in snap.iter().zip(self.entries.iter_mut()) {
            assert_eq!(name, &e.name, "snapshot order mismatch");
            e.value = value.clone();
        }
    }
}
