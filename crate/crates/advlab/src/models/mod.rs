//! Classifier bundles: a backbone (tiny ViT or conv net), a head, named
//! parameters, and the frozen-backbone contract.

pub mod checkpoint;
pub mod convnet;
pub mod head;
pub mod train;
pub mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use head::{Activation, HeadConfig, HeadKind};
pub use train::{accuracy, train_supervised, TrainConfig};
pub use vit::{latent_representation, ViTConfig};

use crate::diffcore::{NodeId, ParameterSet, Tape, Tensor};
use crate::{Error, Result};
use convnet::ConvNetConfig;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum BackboneConfig {
    Vit(ViTConfig),
    Conv(ConvNetConfig),
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneConfig::Vit(c) => c.validate(),
            BackboneConfig::Conv(c) => c.validate(),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            BackboneConfig::Vit(c) => [c.channels, c.image_size, c.image_size],
            BackboneConfig::Conv(c) => [c.channels, c.image_size, c.image_size],
        }
    }

    pub fn latent_width(&self) -> usize {
        match self {
            BackboneConfig::Vit(c) => c.latent_width(),
            BackboneConfig::Conv(c) => c.latent_width(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            BackboneConfig::Vit(c) => c.classes,
            BackboneConfig::Conv(c) => c.classes,
        }
    }

    /// Parameter paths and shapes the config implies.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            BackboneConfig::Vit(c) => c.param_shapes(),
            BackboneConfig::Conv(c) => c.param_shapes(),
        }
    }
}

/// Training provenance carried with every bundle.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainMeta {
    pub epochs: u32,
    pub seed: u64,
    /// Defense strategy tag, when the artifact came out of a defense run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
}

/// A backbone + classification head with named parameters.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub id: String,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub frozen_backbone: bool,
    pub params: ParameterSet,
    pub meta: TrainMeta,
}

/// (cls trace, latent, logits, parameter binding) of a recorded forward.
pub type ForwardGraph = (Vec<NodeId>, NodeId, NodeId, BTreeMap<String, NodeId>);

/// Nodes of one recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub input: NodeId,
    /// Per-block normed `[CLS]` rows (empty for conv backbones).
    pub cls_trace: Vec<NodeId>,
    pub latent: NodeId,
    pub logits: NodeId,
    pub params: BTreeMap<String, NodeId>,
}

impl ModelBundle {
    pub fn input_shape(&self) -> [usize; 3] {
        self.backbone.input_shape()
    }

    pub fn classes(&self) -> usize {
        self.backbone.classes()
    }

    pub fn latent_width(&self) -> usize {
        self.backbone.latent_width()
    }

    /// Freeze or unfreeze the backbone, keeping the parameter mask in sync.
    pub fn set_frozen_backbone(&mut self, frozen: bool) {
        self.frozen_backbone = frozen;
        if frozen {
            self.params.freeze_prefix("backbone.");
        } else {
            self.params.unfreeze_prefix("backbone.");
        }
    }

    /// Record the model on an existing tape from an existing node. This is
    /// what lets attack objectives differentiate through the model from
    /// their own reparameterized inputs. Returns the `[CLS]` trace, the
    /// latent node, the logits node, and the parameter binding.
    pub fn forward_on(&self, tape: &mut Tape, x: NodeId) -> Result<ForwardGraph> {
        let binding = self.params.bind(tape);
        let (trace, latent) = match &self.backbone {
            BackboneConfig::Vit(cfg) => vit::forward(tape, cfg, &binding, x)?,
            BackboneConfig::Conv(cfg) => {
                let latent = convnet::forward(tape, cfg, &binding, x)?;
                (Vec::new(), latent)
            }
        };
        let logits = head::forward(tape, &self.head, &binding, "head", latent)?;
        Ok((trace, latent, logits, binding))
    }

    /// Fresh tape + forward over an image batch.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        let input = tape.input(x.clone());
        let (cls_trace, latent, logits, params) = self.forward_on(&mut tape, input)?;
        Ok(ForwardPass {
            tape,
            input,
            cls_trace,
            latent,
            logits,
            params,
        })
    }

    /// Logits for an image batch.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let fp = self.forward(x)?;
        Ok(fp.tape.value(fp.logits).clone())
    }

    /// Argmax predictions (ties to the lowest class index).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.classify(x)?.argmax_rows())
    }

    /// Per-block normed `[CLS]` embeddings, shallowest block first.
    pub fn encode_with_cls_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let fp = self.forward(x)?;
        if fp.cls_trace.is_empty() {
            return Err(Error::config(format!(
                "model {} has no [CLS] trace (conv backbone)",
                self.id
            )));
        }
        Ok(fp
            .cls_trace
            .iter()
            .map(|&id| fp.tape.value(id).clone())
            .collect())
    }

    /// The latent the head consumes, as values.
    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        let fp = self.forward(x)?;
        Ok(fp.tape.value(fp.latent).clone())
    }

    /// Same backbone and parameters, freshly initialized head.
    pub fn with_new_head(&self, head: HeadConfig, seed: u64, id: &str) -> Result<ModelBundle> {
        head.validate()?;
        let mut out = self.clone();
        out.id = id.to_string();
        out.head = head;
        out.params.remove_prefix("head.");
        let mut rng = StdRng::seed_from_u64(seed);
        out.head.init_params(
            "head",
            self.latent_width(),
            self.classes(),
            &mut rng,
            &mut out.params,
        );
        out.set_frozen_backbone(self.frozen_backbone);
        Ok(out)
    }
}

/// Build a ViT classifier with deterministic initialization.
pub fn build_vit(cfg: &ViTConfig, head: &HeadConfig, seed: u64, id: &str) -> Result<ModelBundle> {
    cfg.validate()?;
    head.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    cfg.init_params(&mut rng, &mut params);
    head.init_params("head", cfg.latent_width(), cfg.classes, &mut rng, &mut params);
    Ok(ModelBundle {
        id: id.to_string(),
        backbone: BackboneConfig::Vit(cfg.clone()),
        head: head.clone(),
        frozen_backbone: false,
        params,
        meta: TrainMeta {
            seed,
            ..TrainMeta::default()
        },
    })
}

/// Build the reference conv net with deterministic initialization.
pub fn build_convnet(
    cfg: &ConvNetConfig,
    head: &HeadConfig,
    seed: u64,
    id: &str,
) -> Result<ModelBundle> {
    cfg.validate()?;
    head.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    cfg.init_params(&mut rng, &mut params);
    head.init_params("head", cfg.latent_width(), cfg.classes, &mut rng, &mut params);
    Ok(ModelBundle {
        id: id.to_string(),
        backbone: BackboneConfig::Conv(cfg.clone()),
        head: head.clone(),
        frozen_backbone: false,
        params,
        meta: TrainMeta {
            seed,
            ..TrainMeta::default()
        },
    })
}

/// Gradient of the mean cross-entropy w.r.t. the input batch. The model's
/// parameters are read, never written.
pub fn grad_wrt_input(model: &ModelBundle, x: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let mut fp = model.forward(x)?;
    let loss = fp.tape.cross_entropy(fp.logits, labels)?;
    let grads = fp.tape.backward(loss)?;
    Ok(grads.wrt(fp.input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check_gradient;

    fn desk_vit(seed: u64) -> ModelBundle {
        build_vit(&ViTConfig::desk(), &HeadConfig::linear(), seed, "vit-test").unwrap()
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = ViTConfig::desk();
        let m = desk_vit(0);
        let d = cfg.embed_dim;
        let hidden = cfg.hidden_dim();
        let per_block = 4 * d + 3 * (d * d + d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
        let backbone = (cfg.patch_dim() * d + d) // patch embed
            + d                                   // cls token
            + cfg.tokens() * d                    // pos embed
            + cfg.depth * per_block
            + 2 * d; // final norm
        let head = cfg.latent_width() * cfg.classes + cfg.classes;
        assert_eq!(m.params.num_scalars(), backbone + head);
        // sequence length: 1 + (16/8)^2 = 5 tokens
        assert_eq!(cfg.tokens(), 5);
    }

    #[test]
    fn same_seed_builds_bit_identical_models() {
        let a = desk_vit(33);
        let b = desk_vit(33);
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        let c = desk_vit(34);
        assert_ne!(a.params.fingerprint(), c.params.fingerprint());
    }

    #[test]
    fn k_equals_depth_uses_every_block() {
        let cfg = ViTConfig::desk(); // latent_layers == depth == 4
        assert_eq!(cfg.latent_layers, cfg.depth);
        let m = desk_vit(1);
        let x = Tensor::full(&[2, 3, 16, 16], 0.4);
        let latent = m.latent(&x).unwrap();
        assert_eq!(latent.shape(), &[2, cfg.depth * cfg.embed_dim]);
    }

    #[test]
    fn trace_has_one_entry_per_block_with_batch_rows() {
        let m = desk_vit(2);
        let x = Tensor::full(&[2, 3, 16, 16], 0.3);
        let trace = m.encode_with_cls_trace(&x).unwrap();
        assert_eq!(trace.len(), 4);
        for t in &trace {
            assert_eq!(t.shape(), &[2, 32]);
        }
    }

    #[test]
    fn latent_last_columns_equal_final_trace_entry() {
        let m = desk_vit(3);
        let x = Tensor::full(&[2, 3, 16, 16], 0.6);
        let trace = m.encode_with_cls_trace(&x).unwrap();
        let latent = m.latent(&x).unwrap();
        let d = 32;
        let width = latent.shape()[1];
        for b in 0..2 {
            let tail = &latent.data()[b * width + width - d..(b + 1) * width];
            let last = &trace[3].data()[b * d..(b + 1) * d];
            assert_eq!(tail, last);
        }
    }

    #[test]
    fn latent_representation_orders_shallowest_first() {
        let t0 = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let t1 = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let t2 = Tensor::new(vec![1, 2], vec![5.0, 6.0]).unwrap();
        let trace = vec![t0, t1.clone(), t2.clone()];
        let latent = latent_representation(&trace, 2).unwrap();
        assert_eq!(latent.data(), &[3.0, 4.0, 5.0, 6.0]);
        // k = 1 equals the final entry alone
        let single = latent_representation(&trace, 1).unwrap();
        assert!(single.bit_eq(&t2));
        assert!(latent_representation(&trace, 4).is_err());
    }

    #[test]
    fn perturbing_one_pixel_moves_every_blocks_cls() {
        let m = desk_vit(4);
        let x = Tensor::full(&[1, 3, 16, 16], 0.5);
        let base = m.encode_with_cls_trace(&x).unwrap();
        let mut bumped = x.clone();
        bumped.data_mut()[5] += 0.05; // one pixel in channel 0
        let moved = m.encode_with_cls_trace(&bumped).unwrap();
        for (layer, (a, b)) in base.iter().zip(&moved).enumerate() {
            assert!(
                a.max_abs_diff(b) > 0.0,
                "block {layer} [CLS] unchanged by pixel perturbation"
            );
        }
    }

    #[test]
    fn classify_is_batch_permutation_equivariant() {
        let m = desk_vit(5);
        let data = crate::harness::generate_synthetic(3, 2, [3, 16, 16], 9).unwrap();
        let logits = m.classify(&data.images).unwrap();
        let perm = [4usize, 0, 5, 2, 1, 3];
        let (px, _) = data.gather(&perm);
        let plogits = m.classify(&px).unwrap();
        let c = logits.shape()[1];
        for (new_row, &orig) in perm.iter().enumerate() {
            assert_eq!(
                &plogits.data()[new_row * c..(new_row + 1) * c],
                &logits.data()[orig * c..(orig + 1) * c],
            );
        }
    }

    #[test]
    fn untrained_model_sits_at_chance_on_balanced_data() {
        let m = desk_vit(6);
        let data = crate::harness::generate_synthetic(9, 12, [3, 16, 16], 10).unwrap();
        let acc = accuracy(&m, &data).unwrap();
        assert!(acc < 0.35, "untrained accuracy {acc} suspiciously high");
    }

    #[test]
    fn convnet_is_deterministic_and_accepts_vit_input_shape() {
        let a = build_convnet(&ConvNetConfig::desk(), &HeadConfig::linear(), 7, "conv").unwrap();
        let b = build_convnet(&ConvNetConfig::desk(), &HeadConfig::linear(), 7, "conv").unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert_eq!(a.input_shape(), desk_vit(0).input_shape());
        let x = Tensor::full(&[2, 3, 16, 16], 0.2);
        let logits = a.classify(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 9]);
    }

    #[test]
    fn grad_wrt_input_matches_finite_differences() {
        let m = desk_vit(8);
        let mut rng = <StdRng as SeedableRng>::seed_from_u64(21);
        let x = Tensor::uniform(&[1, 3, 16, 16], 0.05, 0.95, &mut rng);
        let report = check_gradient(
            |tape, input| {
                let (_, _, logits, _) = m.forward_on(tape, input)?;
                tape.cross_entropy(logits, &[3])
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "input-gradient rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn grad_wrt_input_leaves_parameters_untouched() {
        let m = desk_vit(9);
        let before = m.params.fingerprint();
        let x = Tensor::full(&[2, 3, 16, 16], 0.5);
        let g = grad_wrt_input(&m, &x, &[0, 1]).unwrap();
        assert_eq!(g.shape(), x.shape());
        assert_eq!(m.params.fingerprint(), before);
    }

    #[test]
    fn zero_weight_model_has_zero_input_gradient() {
        let mut m = desk_vit(10);
        let zeroed: Vec<(String, Tensor)> = m
            .params
            .iter()
            .map(|(p, t)| (p.clone(), Tensor::zeros(t.shape())))
            .collect();
        for (p, t) in zeroed {
            m.params.insert(p, t);
        }
        let x = Tensor::full(&[1, 3, 16, 16], 0.5);
        let g = grad_wrt_input(&m, &x, &[2]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_scale_latent_width_is_1536() {
        // k = 4 blocks of width 384, the full-scale configuration.
        let cfg = ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4.0,
            latent_layers: 4,
            classes: 9,
        };
        assert_eq!(cfg.latent_width(), 1536);
    }

    #[test]
    fn invalid_configs_are_rejected_with_the_constraint() {
        let mut cfg = ViTConfig::desk();
        cfg.patch_size = 7;
        match build_vit(&cfg, &HeadConfig::linear(), 0, "x") {
            Err(Error::InvalidConfig(msg)) => assert!(msg.contains("divide"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        let mut cfg = ViTConfig::desk();
        cfg.latent_layers = 5;
        assert!(build_vit(&cfg, &HeadConfig::linear(), 0, "x").is_err());
    }
}
