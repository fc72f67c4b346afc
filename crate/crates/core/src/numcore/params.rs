use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numcore::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameters in declaration order, with gradient accumulators and
/// Adam moments of matching shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter {name} registered twice"
        );
        let zeros = Tensor::zeros(value.shape());
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform in `+-1/sqrt(fan_in)`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("length matches shape"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.grad.shape() != g.shape() {
            return Err(shape(format!(
                "gradient {:?} for parameter {} of shape {:?}",
                g.shape(),
                e.name,
                e.grad.shape()
            )));
        }
        e.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Copy parameter values (not gradients or moments) from `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(invalid("parameter stores differ in layout"));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(invalid(format!("parameter {} does not match {}", a.name, b.name)));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.value.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Per-parameter value norms, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.norm())).collect()
    }

    /// Flat checkpoint: `u64` little-endian header length, a JSON header of
    /// names and shapes, then every value as a little-endian `f64` in
    /// declaration order.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let header = CheckpointHeader {
            params: self
                .entries
                .iter()
                .map(|e| CheckpointEntry {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for e in &self.entries {
            for x in e.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load values saved by [`ParamStore::write_checkpoint`] into a store
    /// with the same layout.
    pub fn read_checkpoint(&mut self, mut r: impl Read) -> Result<()> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(invalid("checkpoint header is implausibly large"));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.params.len() != self.entries.len() {
            return Err(invalid(format!(
                "checkpoint has {} parameters, model has {}",
                header.params.len(),
                self.entries.len()
            )));
        }
        for (e, h) in self.entries.iter().zip(&header.params) {
            if e.name != h.name || e.value.shape() != h.shape.as_slice() {
                return Err(invalid(format!(
                    "checkpoint parameter {} {:?} does not match {} {:?}",
                    h.name,
                    h.shape,
                    e.name,
                    e.value.shape()
                )));
            }
        }
        let mut buf = [0u8; 8];
        for e in &mut self.entries {
            for x in e.value.data_mut() {
                r.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    params: Vec<CheckpointEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients; `step`
/// counts from 1.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig, step: u64) -> Result<()> {
    if step == 0 {
        return Err(invalid("adam step counter starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powf(step as f64);
    let c2 = 1.0 - cfg.beta2.powf(step as f64);
    for e in &mut store.entries {
        let g = e.grad.data();
        let m = e.m.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = e.v.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (e.m.data(), e.v.data());
        for ((x, &mi), &vi) in e.value.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mi / c1;
            let vhat = vi / c2;
            *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
