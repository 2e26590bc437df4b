//! Miniature vision transformer with per-block `[CLS]` tracing.
//!
//! Pre-norm blocks (multi-head self-attention + MLP with residuals),
//! learnable `[CLS]` token and positional embeddings. The final layernorm is
//! applied to every traced `[CLS]` row, so `trace[L-1]` is exactly the
//! latent a plain classifier consumes.

use crate::diffcore::{NodeId, ParameterSet, Tape, Tensor};
use crate::{Error, Result};
use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const LAYERNORM_EPS: f32 = 1e-5;


#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    /// Square input edge in pixels.
    pub image_size: usize,
    /// Patch edge; must divide `image_size`.
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: f32,
    /// How many final blocks contribute their `[CLS]` to the latent.
    pub latent_layers: usize,
    pub classes: usize,
}

impl ViTConfig {
    /// Desk-scale default: 16x16 RGB, 2x2 patch grid, 4 blocks of width 32,
    /// latent built from all 4 blocks, 9 classes.
    pub fn desk() -> Self {
        ViTConfig {
            image_size: 16,
            patch_size: 8,
            channels: 3,
            embed_dim: 32,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            latent_layers: 4,
            classes: 9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads {} must divide embed dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.latent_layers == 0 || self.latent_layers > self.depth {
            return Err(Error::config(format!(
                "latent_layers {} must lie in 1..={}",
                self.latent_layers, self.depth
            )));
        }
        if self.channels == 0 || self.classes < 2 || self.depth == 0 {
            return Err(Error::config("channels, depth and classes must be positive (classes >= 2)"));
        }
        if self.mlp_ratio <= 0.0 || self.hidden_dim() == 0 {
            return Err(Error::config(format!("mlp_ratio {} yields empty hidden layer", self.mlp_ratio)));
        }
        Ok(())
    }

    /// Patches per image edge.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length including the `[CLS]` token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    /// Flattened patch width fed to the patch embedding.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f32).round() as usize
    }

    /// Width of the concatenated `[CLS]` latent.
    pub fn latent_width(&self) -> usize {
        self.latent_layers * self.embed_dim
    }

    /// Backbone parameter paths and shapes, in initialization-draw order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let hidden = self.hidden_dim();
        let mut out = vec![
            ("backbone.patch_embed.weight".into(), vec![self.patch_dim(), d]),
            ("backbone.patch_embed.bias".into(), vec![d]),
            ("backbone.cls_token".into(), vec![d]),
            ("backbone.pos_embed".into(), vec![self.tokens(), d]),
        ];
        for i in 0..self.depth {
            let p = |s: &str| format!("backbone.blocks.{i}.{s}");
            out.push((p("ln1.gamma"), vec![d]));
            out.push((p("ln1.beta"), vec![d]));
            out.push((p("attn.wq"), vec![d, d]));
            out.push((p("attn.bq"), vec![d]));
            out.push((p("attn.wk"), vec![d, d]));
            out.push((p("attn.bk"), vec![d]));
            out.push((p("attn.wv"), vec![d, d]));
            out.push((p("attn.bv"), vec![d]));
            out.push((p("attn.proj.weight"), vec![d, d]));
            out.push((p("attn.proj.bias"), vec![d]));
            out.push((p("ln2.gamma"), vec![d]));
            out.push((p("ln2.beta"), vec![d]));
            out.push((p("mlp.fc1.weight"), vec![d, hidden]));
            out.push((p("mlp.fc1.bias"), vec![hidden]));
            out.push((p("mlp.fc2.weight"), vec![hidden, d]));
            out.push((p("mlp.fc2.bias"), vec![d]));
        }
        out.push(("backbone.norm.gamma".into(), vec![d]));
        out.push(("backbone.norm.beta".into(), vec![d]));
        out
    }

    /// Deterministic initialization tuned for plain SGD: the residual stream
    /// starts at unit scale (so layernorm Jacobians stay near 1), attention
    /// logits start mild, and residual writers are damped by 1/sqrt(2·depth).
    pub fn init_params(&self, rng: &mut StdRng, params: &mut ParameterSet) {
        let damp = 1.0 / (2.0 * self.depth as f32).sqrt();
        for (path, shape) in self.param_shapes() {
            let t = if path.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else if path.ends_with(".bias") || path.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else if path.ends_with("cls_token") || path.ends_with("pos_embed") {
                Tensor::randn(&shape, 1.0, rng)
            } else {
                let fan_in = shape[0] as f32;
                let std = if path.contains("attn.w") {
                    (0.5 / fan_in).sqrt()
                } else if path.contains("proj.weight") || path.contains("fc2.weight") {
                    (2.0 / fan_in).sqrt() * damp
                } else {
                    (2.0 / fan_in).sqrt()
                };
                Tensor::randn(&shape, std, rng)
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

/// Record the full encoder on `tape` from node `x` (`[b, c, h, w]`).
/// Returns the per-block normed `[CLS]` trace and the concatenated latent.
pub fn forward(
    tape: &mut Tape,
    cfg: &ViTConfig,
    binding: &BTreeMap<String, NodeId>,
    x: NodeId,
) -> Result<(Vec<NodeId>, NodeId)> {
    let shape = tape.value(x).shape().to_vec();
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if shape.len() != 4 || shape[1..] != want {
        return Err(Error::shape("vit-forward", &shape, &want));
    }
    let batch = shape[0];
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let grid = cfg.grid();
    let tokens = cfg.tokens();

    // Patchify: row-major over the patch grid, each patch flattened per
    // sample to [b, c*p*p], joined on the last axis then reshaped to rows.
    let mut patch_nodes = Vec::with_capacity(grid * grid);
    for pi in 0..grid {
        for pj in 0..grid {
            let rows = tape.slice(x, 2, pi * p, p)?;
            let cell = tape.slice(rows, 3, pj * p, p)?;
            patch_nodes.push(tape.reshape(cell, &[batch, cfg.patch_dim()])?);
        }
    }
    let joined = tape.concat_last(&patch_nodes)?;
    let flat = tape.reshape(joined, &[batch * grid * grid, cfg.patch_dim()])?;
    let pw = param(binding, "backbone.patch_embed.weight")?;
    let pb = param(binding, "backbone.patch_embed.bias")?;
    let embedded = tape.linear(flat, pw, pb)?;
    let patches_flat = tape.reshape(embedded, &[batch, grid * grid * d])?;

    // Prepend [CLS]: broadcast the token over the batch, join on last axis,
    // reshape to [b, tokens, d].
    let cls = param(binding, "backbone.cls_token")?;
    let zeros = tape.constant(Tensor::zeros(&[batch, d]));
    let cls_rows = tape.add(zeros, cls)?;
    let seq_flat = tape.concat_last(&[cls_rows, patches_flat])?;
    let mut h = tape.reshape(seq_flat, &[batch, tokens, d])?;

    let pos = param(binding, "backbone.pos_embed")?;
    h = tape.add(h, pos)?;

    let norm_g = param(binding, "backbone.norm.gamma")?;
    let norm_b = param(binding, "backbone.norm.beta")?;
    let mut trace = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let pfx = |s: &str| format!("backbone.blocks.{i}.{s}");
        let ln1g = param(binding, &pfx("ln1.gamma"))?;
        let ln1b = param(binding, &pfx("ln1.beta"))?;
        let normed = tape.layernorm(h, ln1g, ln1b, LAYERNORM_EPS)?;

        let attn = attention(tape, cfg, binding, i, normed, batch)?;
        h = tape.add(h, attn)?;

        let ln2g = param(binding, &pfx("ln2.gamma"))?;
        let ln2b = param(binding, &pfx("ln2.beta"))?;
        let normed2 = tape.layernorm(h, ln2g, ln2b, LAYERNORM_EPS)?;
        let fc1w = param(binding, &pfx("mlp.fc1.weight"))?;
        let fc1b = param(binding, &pfx("mlp.fc1.bias"))?;
        let fc2w = param(binding, &pfx("mlp.fc2.weight"))?;
        let fc2b = param(binding, &pfx("mlp.fc2.bias"))?;
        let mid = tape.linear(normed2, fc1w, fc1b)?;
        let act = tape.gelu(mid)?;
        let mlp_out = tape.linear(act, fc2w, fc2b)?;
        h = tape.add(h, mlp_out)?;

        // Traced [CLS]: block output row 0 with the final norm applied.
        let cls_row = tape.slice(h, 1, 0, 1)?;
        let cls_flat = tape.reshape(cls_row, &[batch, d])?;
        trace.push(tape.layernorm(cls_flat, norm_g, norm_b, LAYERNORM_EPS)?);
    }

    let latent = tape.concat_last(&trace[cfg.depth - cfg.latent_layers..])?;
    Ok((trace, latent))
}

fn attention(
    tape: &mut Tape,
    cfg: &ViTConfig,
    binding: &BTreeMap<String, NodeId>,
    block: usize,
    x: NodeId,
    batch: usize,
) -> Result<NodeId> {
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let tokens = cfg.tokens();
    let pfx = |s: &str| format!("backbone.blocks.{block}.attn.{s}");

    let mut proj = |w: &str, b: &str| -> Result<NodeId> {
        let wn = param(binding, &pfx(w))?;
        let bn = param(binding, &pfx(b))?;
        let y = tape.linear(x, wn, bn)?;
        let split = tape.reshape(y, &[batch, tokens, heads, hd])?;
        tape.transpose(split, 1, 2) // [b, heads, tokens, hd]
    };
    let q = proj("wq", "bq")?;
    let k = proj("wk", "bk")?;
    let v = proj("wv", "bv")?;

    let kt = tape.transpose(k, 2, 3)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (hd as f32).sqrt())?;
    let weights = tape.softmax(scaled)?;
    let ctx = tape.matmul(weights, v)?;
    let merged = tape.transpose(ctx, 1, 2)?;
    let flat = tape.reshape(merged, &[batch, tokens, d])?;
    let pw = param(binding, &pfx("proj.weight"))?;
    let pb = param(binding, &pfx("proj.bias"))?;
    tape.linear(flat, pw, pb)
}

/// Concatenate the last `k` per-block `[CLS]` tensors, shallowest first.
pub fn latent_representation(trace: &[Tensor], k: usize) -> Result<Tensor> {
    if k == 0 || k > trace.len() {
        return Err(Error::config(format!(
            "latent_layers {k} out of range for a {}-block trace",
            trace.len()
        )));
    }
    let picked = &trace[trace.len() - k..];
    let batch = picked[0].shape()[0];
    for t in picked {
        if t.rank() != 2 || t.shape()[0] != batch {
            return Err(Error::shape("latent_representation", picked[0].shape(), t.shape()));
        }
    }
    let width: usize = picked.iter().map(|t| t.shape()[1]).sum();
    let mut data = Vec::with_capacity(batch * width);
    for b in 0..batch {
        for t in picked {
            let w = t.shape()[1];
            data.extend_from_slice(&t.data()[b * w..(b + 1) * w]);
        }
    }
    Tensor::new(vec![batch, width], data)
}
