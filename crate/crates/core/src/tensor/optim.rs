use std::collections::HashMap;
use std::f64::consts::PI;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A learnable tensor with its AdamW moment estimates.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
    /// Whether decoupled weight decay applies (off for norms, biases, embeddings).
    pub decay: bool,
    /// Frozen parameters enter the tape as constants.
    pub trainable: bool,
}

/// Named parameter registry, iterated in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter subject to weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Registers a parameter exempt from weight decay.
    pub fn add_no_decay(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, decay: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let shape = value.shape().to_vec();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            value,
            step: 0,
            decay,
            trainable: true,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as frozen or not.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!(
                    "{}: stored {:?}, new {:?}",
                    p.name,
                    p.value.shape(),
                    value.shape()
                ),
            ));
        }
        p.value = value;
        Ok(())
    }
}

/// Per-parameter gradients collected from a tape.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub Vec<(ParamId, Tensor)>);

impl ParamGrads {
    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|(_, g)| g.all_finite())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in &mut grads.0 {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamW {
    /// Applies one update to every parameter that has a gradient.
    pub fn step(&self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        let (b1, b2) = self.betas;
        for (id, g) in &grads.0 {
            let p = store.get_mut(*id);
            if p.value.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("{}: param {:?}, grad {:?}", p.name, p.value.shape(), g.shape()),
                ));
            }
            if !p.trainable {
                continue;
            }
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= self.lr * wd * w[i];
                w[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to a floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / (self.warmup_steps + 1) as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}
