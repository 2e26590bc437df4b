//! Reverse-mode automatic differentiation over dense f32 tensors.
//!
//! The engine is define-by-run: model code records primitives onto a fresh
//! [`Tape`] each forward pass and asks for gradients of a scalar loss with
//! respect to any recorded node — parameters for training, the input image
//! for attacks.

mod gradcheck;
mod replay64;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, GradCheckReport};
pub use replay64::Replay64;
pub use tape::{Gradients, NodeId, Primitive, Tape};
pub use tensor::Tensor;

use crate::Result;
use std::collections::{BTreeMap, BTreeSet};

/// Named parameter tensors with a frozen mask.
///
/// Paths are dot-separated (`backbone.blocks.0.attn.wq`). Frozen paths are
/// excluded from [`ParameterSet::apply_sgd`]; they stay bit-identical across
/// any number of training steps.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.params.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Deterministic (sorted-path) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn freeze(&mut self, path: &str) {
        if self.params.contains_key(path) {
            self.frozen.insert(path.to_string());
        }
    }

    /// Freeze every parameter whose path starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let paths: Vec<String> = self
            .params
            .keys()
            .filter(|p| p.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(paths);
    }

    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        self.frozen.retain(|p| !p.starts_with(prefix));
    }

    /// Drop every parameter whose path starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p, _| !p.starts_with(prefix));
        self.frozen.retain(|p| !p.starts_with(prefix));
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.frozen.contains(path)
    }

    pub fn frozen_paths(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    /// Bind every parameter as a leaf on `tape`; returns path → node id.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, NodeId> {
        self.params
            .iter()
            .map(|(path, value)| (path.clone(), tape.input(value.clone())))
            .collect()
    }

    /// One plain gradient-descent step over the unfrozen parameters.
    pub fn apply_sgd(
        &mut self,
        binding: &BTreeMap<String, NodeId>,
        grads: &Gradients,
        lr: f32,
    ) -> Result<()> {
        for (path, &node) in binding {
            if self.frozen.contains(path) {
                continue;
            }
            if let Some(g) = grads.get(node) {
                let p = self
                    .params
                    .get_mut(path)
                    .ok_or_else(|| crate::Error::config(format!("unknown parameter {path}")))?;
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
        Ok(())
    }

    /// Fingerprint over all parameters, order-stable.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (path, t) in &self.params {
            for b in path.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            h ^= t.fingerprint();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Fingerprint restricted to paths under `prefix`.
    pub fn fingerprint_prefix(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (path, t) in self.params.iter().filter(|(p, _)| p.starts_with(prefix)) {
            for b in path.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            h ^= t.fingerprint();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}
