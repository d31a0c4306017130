//! Parameters, layers and the optimizer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Grads, Tape, Val};

#[derive(Clone)]
pub struct ParamStore {
    values: Vec<ArrayD<f64>>,
    names: Vec<String>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { values: Vec::new(), names: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let slot = self.values.len();
        self.values.push(value);
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), slot);
        slot
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, slot: usize) -> &ArrayD<f64> {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut ArrayD<f64> {
        &mut self.values[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Overwrite a parameter by name; dims must match.
    pub fn set(&mut self, name: &str, value: ArrayD<f64>) -> crate::Result<()> {
        let slot = self
            .by_name
            .get(name)
            .copied()
            .ok_or_else(|| crate::Error::InvalidArg(format!("unknown parameter {name}")))?;
        if self.values[slot].shape() != value.shape() {
            return Err(crate::Error::DimMismatch(format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.values[slot].shape(),
                value.shape()
            )));
        }
        self.values[slot] = value;
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Kaiming-uniform weights for layers followed by a leaky ReLU.
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], neg_slope: f64) -> ArrayD<f64> {
    let fan_in: usize = shape[1..].iter().product();
    let gain = (2.0 / (1.0 + neg_slope * neg_slope)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// A convolution layer: two parameter slots plus geometry.
#[derive(Clone, Copy)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), kaiming_uniform(rng, &[co, ci, k, k], 0.2));
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])));
        Conv2d { w, b, stride, pad }
    }

    /// Zero-initialized layer, used for prediction heads so the first
    /// forward pass emits zero flow and zero logits.
    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), ArrayD::zeros(IxDyn(&[co, ci, k, k])));
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])));
        Conv2d { w, b, stride, pad }
    }

    pub fn apply(&self, t: &mut Tape, store: &ParamStore, x: Val) -> Val {
        let w = t.param(self.w, store.value(self.w).clone());
        let b = t.param(self.b, store.value(self.b).clone());
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Adam with cosine learning-rate decay and global gradient-norm clipping.
/// Slots absent from a step's gradients are left untouched, so disjoint
/// parameter groups can share a store but use separate optimizers.
pub struct Adam {
    lr0: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    total_steps: usize,
    t: usize,
    m: BTreeMap<usize, ArrayD<f64>>,
    v: BTreeMap<usize, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr0: f64, total_steps: usize, clip: f64) -> Self {
        Adam {
            lr0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            total_steps: total_steps.max(1),
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        let frac = self.t as f64 / self.total_steps as f64;
        self.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Apply one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> f64 {
        let norm = grads.global_norm();
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        let lr = self.lr();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (&slot, g) in &grads.by_slot {
            let m = self
                .m
                .entry(slot)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(slot)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = store.value_mut(slot);
            let ps = p.as_slice_mut().unwrap();
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let gs = g.as_slice().unwrap();
            for i in 0..ps.len() {
                let gi = gs[i] * scale;
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gi;
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        norm
    }
}
