//! Classification heads over latent vectors: a plain linear map or a ReLU
//! MLP with configurable hidden widths.

use crate::diffcore::{NodeId, ParameterSet, Tape, Tensor};
use crate::{Error, Result};
use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl HeadConfig {
    pub fn linear() -> Self {
        HeadConfig {
            kind: HeadKind::Linear,
            hidden: vec![],
            activation: Activation::Relu,
        }
    }

    pub fn mlp(hidden: &[usize]) -> Self {
        HeadConfig {
            kind: HeadKind::Mlp,
            hidden: hidden.to_vec(),
            activation: Activation::Relu,
        }
    }

    /// Full-scale MLP head preset (2048, 1024, 512).
    pub fn mlp_full() -> Self {
        Self::mlp(&[2048, 1024, 512])
    }

    /// Desk-scale MLP head preset (64, 32, 16).
    pub fn mlp_desk() -> Self {
        Self::mlp(&[64, 32, 16])
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            HeadKind::Linear if !self.hidden.is_empty() => Err(Error::config(
                "linear head must have zero hidden layers",
            )),
            HeadKind::Mlp if self.hidden.is_empty() => {
                Err(Error::config("mlp head needs at least one hidden layer"))
            }
            _ if self.hidden.contains(&0) => Err(Error::config("hidden widths must be positive")),
            _ => Ok(()),
        }
    }

    /// Layer widths from `input` to `classes`.
    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_shapes(
        &self,
        prefix: &str,
        input: usize,
        classes: usize,
    ) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, (din, dout)) in self.layer_dims(input, classes).into_iter().enumerate() {
            out.push((format!("{prefix}.layers.{i}.weight"), vec![din, dout]));
            out.push((format!("{prefix}.layers.{i}.bias"), vec![dout]));
        }
        out
    }

    /// He-initialized weights, zero biases.
    pub fn init_params(
        &self,
        prefix: &str,
        input: usize,
        classes: usize,
        rng: &mut StdRng,
        params: &mut ParameterSet,
    ) {
        for (path, shape) in self.param_shapes(prefix, input, classes) {
            let t = if path.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, (2.0 / shape[0] as f32).sqrt(), rng)
            };
            params.insert(path, t);
        }
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Record the head on `tape` over a latent node; returns logits.
pub fn forward(
    tape: &mut Tape,
    cfg: &HeadConfig,
    binding: &BTreeMap<String, NodeId>,
    prefix: &str,
    latent: NodeId,
) -> Result<NodeId> {
    let mut h = latent;
    let layers = cfg.num_layers();
    for i in 0..layers {
        let w = binding
            .get(&format!("{prefix}.layers.{i}.weight"))
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {prefix}.layers.{i}.weight")))?;
        let b = binding
            .get(&format!("{prefix}.layers.{i}.bias"))
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {prefix}.layers.{i}.bias")))?;
        h = tape.linear(h, w, b)?;
        if i + 1 < layers {
            h = match cfg.activation {
                Activation::Relu => tape.relu(h)?,
            };
        }
    }
    Ok(h)
}
