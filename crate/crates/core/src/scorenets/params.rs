use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AdmError, Result};
use crate::imaging::io::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<f64>,
}

/// Named parameter tensors with shapes fixed at construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

/// Initialization of a freshly added tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Zero-mean normal with standard deviation `gain / sqrt(fan_in)`.
    Normal { fan_in: usize, gain: f64 },
}

/// Rounds to the nearest `f32`, the precision of stored checkpoints.
#[inline]
pub fn to_storage(v: f64) -> f64 {
    v as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(&mut self, name: &str, dims: &[usize], init: Init, rng: &mut R) -> ParamId {
        assert!(
            self.tensors.iter().all(|t| t.name != name),
            "duplicate parameter name {name}"
        );
        let n: usize = dims.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Normal { fan_in, gain } => {
                let dist = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
                (0..n).map(|_| to_storage(dist.sample(rng))).collect()
            }
        };
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            dims: dims.to_vec(),
            value,
        });
        ParamId(self.tensors.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].value
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            data: self.tensors.iter().map(|t| vec![0.0; t.value.len()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.iter().all(|v| v.is_finite()))
    }

    pub fn to_named(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        self.tensors
            .iter()
            .map(|t| Ok((format!("{prefix}{}", t.name), Tensor::from_f64(t.dims.clone(), &t.value)?)))
            .collect()
    }

    /// Overwrites every tensor from `named`, matching by name and shape.
    pub fn load_named(&mut self, prefix: &str, named: &[(String, Tensor)]) -> Result<()> {
        for t in &mut self.tensors {
            let key = format!("{prefix}{}", t.name);
            let (_, src) = named
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| AdmError::InvalidConfig(format!("checkpoint lacks tensor {key}")))?;
            if src.dims != t.dims {
                return Err(AdmError::shape(format!("{key} {:?}", t.dims), format!("{:?}", src.dims)));
            }
            t.value = src.to_f64();
        }
        Ok(())
    }
}

/// Per-tensor gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub data: Vec<Vec<f64>>,
}

impl Gradients {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    /// Adds `other` element-wise.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Round parameters and moments to `f32` after every update.
    pub quantize: bool,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.value.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            quantize: true,
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.update_with_decay(store, grads, lr, true)
    }

    /// One update; decoupled weight decay is applied only when `decay` is set.
    pub fn update_with_decay(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, decay: bool) -> Result<()> {
        if grads.data.len() != store.num_tensors() {
            return Err(AdmError::shape(store.num_tensors(), grads.data.len()));
        }
        for (t, g) in store.tensors().iter().zip(&grads.data) {
            if t.value.len() != g.len() {
                return Err(AdmError::shape(format!("{} x{}", t.name, t.value.len()), g.len()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let shrink = if decay { 1.0 - lr * c.weight_decay } else { 1.0 };
        for (k, t) in store.tensors_mut().iter_mut().enumerate() {
            let g = &grads.data[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..t.value.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                if self.quantize {
                    m[i] = to_storage(m[i]);
                    v[i] = to_storage(v[i]);
                }
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut p = t.value[i] * shrink - lr * mhat / (vhat.sqrt() + c.eps);
                if self.quantize {
                    p = to_storage(p);
                }
                t.value[i] = p;
            }
        }
        Ok(())
    }
}
