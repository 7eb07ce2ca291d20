//! Named parameter storage, per-item gradient buffers, and the AdamW optimizer.
//!
//! Models register tensors under unique names at build time and hold the
//! returned [`ParamId`]s; hot paths index by id, checkpoints and tests address
//! parameters by name. Gradient accumulation goes through a detached [`Grads`]
//! buffer so batch items can run on worker threads and reduce in index order,
//! which keeps training bit-deterministic under any thread schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, init: Tensor2) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.to_string(), id.0);
        self.names.push(name.to_string());
        self.values.push(init);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// (name, tensor) pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Replaces a value keeping its shape; used by the checkpoint loader.
    pub fn load_named(&mut self, name: &str, tensor: Tensor2) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} not in model")))?;
        if self.values[id.0].shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor {name} shape {:?} vs model {:?}",
                tensor.shape(),
                self.values[id.0].shape()
            )));
        }
        self.values[id.0] = tensor;
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers aligned index-for-index with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    buffers: Vec<Tensor2>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { buffers: store.values.iter().map(|t| Tensor2::zeros(t.rows(), t.cols())).collect() }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.buffers[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.buffers[id.0]
    }

    pub fn add(&mut self, id: ParamId, delta: &Tensor2) {
        self.buffers[id.0]
            .add_assign(delta)
            .expect("gradient shape must match parameter shape");
    }

    pub fn axpy(&mut self, id: ParamId, coef: f64, delta: &Tensor2) {
        self.buffers[id.0]
            .axpy(coef, delta)
            .expect("gradient shape must match parameter shape");
    }

    /// Row-wise accumulation for embedding-table lookups.
    pub fn add_row(&mut self, id: ParamId, row: usize, delta: &[f64]) {
        let r = self.buffers[id.0].row_mut(row);
        assert_eq!(r.len(), delta.len(), "gradient row width");
        for (a, b) in r.iter_mut().zip(delta) {
            *a += b;
        }
    }

    /// Sums another buffer into this one (sequential batch reduction).
    pub fn accumulate(&mut self, other: &Grads) {
        assert_eq!(self.buffers.len(), other.buffers.len());
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            a.add_assign(b).expect("aligned gradient buffers");
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.buffers {
            b.scale_in_place(s);
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.buffers {
            b.fill(0.0);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.buffers.iter().fold(0.0_f64, |m, b| m.max(b.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.buffers.iter().all(|b| b.is_finite())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW: decoupled weight decay, bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor2> =
            store.values.iter().map(|t| Tensor2::zeros(t.rows(), t.cols())).collect();
        Self { cfg, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for idx in 0..store.values.len() {
            let g = grads.buffers[idx].data();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = store.values[idx].data_mut();
            for i in 0..p.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.cfg.lr * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * p[i]);
            }
        }
    }
}
