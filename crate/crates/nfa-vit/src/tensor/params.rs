//! Named trainable parameters and gradient buffers.

use std::collections::HashMap;

use rand::Rng;

use super::{Gradients, Tape, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter within its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A named tensor with a gradient slot of the same shape.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f32>,
}

/// All parameters of a model, addressed by [`ParamId`] or dotted-path name.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = vec![0.0; value.numel()];
        self.entries.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        let id = self.entries.len() - 1;
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Linear weight with uniform +-sqrt(6 / (fan_in + fan_out)) init.
    pub fn add_linear_weight(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let t = Tensor::from_fn(vec![fan_in, fan_out], |_| rng.gen_range(-bound..bound));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.entries.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(0.0);
        }
    }
}

/// Flat per-parameter gradient accumulator used during batched training.
pub struct GradBuffer {
    pub grads: Vec<Vec<f32>>,
}

impl GradBuffer {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradBuffer {
            grads: params.entries.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f32) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Tracks which parameters were placed on a tape during one forward pass,
/// binding each at most once so gradients accumulate per parameter node.
pub struct Binding {
    bound: Vec<Option<Tensor>>,
}

impl Binding {
    pub fn new(params: &ParamSet) -> Self {
        Binding {
            bound: vec![None; params.len()],
        }
    }

    /// Tape leaf for the parameter, created on first use.
    pub fn fetch(&mut self, tape: &mut Tape, params: &ParamSet, id: ParamId) -> Tensor {
        if let Some(t) = &self.bound[id.0] {
            return t.clone();
        }
        let leaf = tape.leaf(&params.get(id).value);
        self.bound[id.0] = Some(leaf.clone());
        leaf
    }

    /// Collect gradients for every bound parameter into a fresh buffer
    /// (zeros for parameters never used or unreachable from the loss).
    pub fn export(&self, params: &ParamSet, grads: &mut Gradients) -> GradBuffer {
        let mut buf = GradBuffer::zeros_like(params);
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(t) = slot {
                if let Some(node) = t.node() {
                    if let Some(g) = grads.take(node) {
                        buf.grads[i] = g;
                    }
                }
            }
        }
        buf
    }

    /// Write gradients straight into `Parameter::grad` slots.
    pub fn write_back(&self, params: &mut ParamSet, grads: &mut Gradients) {
        let buf = self.export(params, grads);
        for (p, g) in params.entries.iter_mut().zip(buf.grads) {
            p.grad = g;
        }
    }
}

/// Everything a module needs during one forward pass: the tape being
/// recorded, the parameter store, and the per-pass leaf binding.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamSet,
    pub binding: &'a mut Binding,
}

impl Fwd<'_> {
    /// Tape leaf for a parameter (bound once per pass).
    pub fn p(&mut self, id: ParamId) -> Tensor {
        self.binding.fetch(self.tape, self.params, id)
    }
}
