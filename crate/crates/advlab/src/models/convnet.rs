//! Small residual conv net: reference convolutional architecture for
//! cross-architecture transfer experiments. Two residual stages, stride-2
//! downsample between them, global average pooling into the latent.

use crate::diffcore::{NodeId, ParameterSet, Tape, Tensor};
use crate::{Error, Result};
use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConvNetConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Stem width; the second stage doubles it.
    pub width: usize,
    pub classes: usize,
}

impl ConvNetConfig {
    pub fn desk() -> Self {
        ConvNetConfig {
            image_size: 16,
            channels: 3,
            width: 16,
            classes: 9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || !self.image_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "image size {} must be even and >= 4",
                self.image_size
            )));
        }
        if self.channels == 0 || self.width == 0 || self.classes < 2 {
            return Err(Error::config("channels, width and classes must be positive (classes >= 2)"));
        }
        Ok(())
    }

    pub fn latent_width(&self) -> usize {
        2 * self.width
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.width;
        let conv = |name: &str, cout: usize, cin: usize| {
            vec![
                (format!("backbone.{name}.weight"), vec![cout, cin, 3, 3]),
                (format!("backbone.{name}.bias"), vec![cout]),
            ]
        };
        let mut out = Vec::new();
        out.extend(conv("stem", w, self.channels));
        out.extend(conv("stage1.conv1", w, w));
        out.extend(conv("stage1.conv2", w, w));
        out.extend(conv("down", 2 * w, w));
        out.extend(conv("stage2.conv1", 2 * w, 2 * w));
        out.extend(conv("stage2.conv2", 2 * w, 2 * w));
        out
    }

    /// He-initialized conv weights, zero biases; deterministic per rng state.
    pub fn init_params(&self, rng: &mut StdRng, params: &mut ParameterSet) {
        for (path, shape) in self.param_shapes() {
            let t = if path.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[1] * shape[2] * shape[3];
                Tensor::randn(&shape, (2.0 / fan_in as f32).sqrt(), rng)
            };
            params.insert(path, t);
        }
    }
}

fn param(binding: &BTreeMap<String, NodeId>, path: &str) -> Result<NodeId> {
    binding
        .get(path)
        .copied()
        .ok_or_else(|| Error::config(format!("missing parameter {path}")))
}

/// Record the conv backbone on `tape`; returns the pooled latent `[b, 2w]`.
pub fn forward(
    tape: &mut Tape,
    cfg: &ConvNetConfig,
    binding: &BTreeMap<String, NodeId>,
    x: NodeId,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if shape.len() != 4 || shape[1..] != want {
        return Err(Error::shape("conv-forward", &shape, &want));
    }
    let batch = shape[0];

    let conv = |tape: &mut Tape, name: &str, input: NodeId, stride: usize| -> Result<NodeId> {
        let w = param(binding, &format!("backbone.{name}.weight"))?;
        let b = param(binding, &format!("backbone.{name}.bias"))?;
        tape.conv2d(input, w, b, stride, 1)
    };

    let stem = conv(tape, "stem", x, 1)?;
    let h0 = tape.relu(stem)?;

    let c1 = conv(tape, "stage1.conv1", h0, 1)?;
    let a1 = tape.relu(c1)?;
    let c2 = conv(tape, "stage1.conv2", a1, 1)?;
    let s1 = tape.add(h0, c2)?;
    let h1 = tape.relu(s1)?;

    let down = conv(tape, "down", h1, 2)?;
    let h2 = tape.relu(down)?;

    let c3 = conv(tape, "stage2.conv1", h2, 1)?;
    let a3 = tape.relu(c3)?;
    let c4 = conv(tape, "stage2.conv2", a3, 1)?;
    let s2 = tape.add(h2, c4)?;
    let h3 = tape.relu(s2)?;

    // Global average pool via a constant averaging vector.
    let half = cfg.image_size / 2;
    let spatial = half * half;
    let grouped = tape.reshape(h3, &[batch, cfg.latent_width(), spatial])?;
    let avg = tape.constant(Tensor::full(&[spatial, 1], 1.0 / spatial as f32));
    let pooled = tape.matmul(grouped, avg)?;
    tape.reshape(pooled, &[batch, cfg.latent_width()])
}
