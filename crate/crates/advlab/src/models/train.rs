//! Supervised training with plain mini-batch gradient descent.
//!
//! One epoch loop is shared by standard training and the defense trainers:
//! a per-batch hook may swap the batch for an augmented one. The shuffle rng
//! is the only randomness the loop itself consumes, so two trainers with the
//! same seed see identical batch schedules — a hook that returns its batch
//! unchanged reproduces standard training byte for byte.

use crate::diffcore::Tensor;
use crate::harness::dataset::Dataset;
use crate::models::ModelBundle;
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Per-batch substitution hook: receives the current model, the clean batch
/// and its dataset indices; returns the batch to train on.
pub(crate) type BatchHook<'a> =
    dyn FnMut(&ModelBundle, Tensor, Vec<u32>, &[usize]) -> Result<(Tensor, Vec<u32>)> + 'a;

/// One pass over `data` in shuffled batches; returns the mean training loss.
pub(crate) fn run_epoch(
    bundle: &mut ModelBundle,
    data: &Dataset,
    batch_size: usize,
    lr: f32,
    rng: &mut StdRng,
    hook: &mut BatchHook,
) -> Result<f32> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0f32;
    for chunk in order.chunks(batch_size) {
        let (cx, cy) = data.gather(chunk);
        let (bx, by) = hook(bundle, cx, cy, chunk)?;
        let mut fp = bundle.forward(&bx)?;
        let loss = fp.tape.cross_entropy(fp.logits, &by)?;
        let grads = fp.tape.backward(loss)?;
        bundle.params.apply_sgd(&fp.params, &grads, lr)?;
        total += fp.tape.value(loss).item() * chunk.len() as f32;
    }
    Ok(total / data.len() as f32)
}

/// Train on labelled data; honors the frozen-backbone mask. Returns the
/// updated bundle and the per-epoch mean loss curve.
pub fn train_supervised(
    model: &ModelBundle,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, Vec<f32>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let mut bundle = model.clone();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let loss = run_epoch(
            &mut bundle,
            data,
            cfg.batch_size,
            cfg.lr,
            &mut rng,
            &mut |_, x, y, _| Ok((x, y)),
        )?;
        curve.push(loss);
    }
    bundle.meta.epochs += cfg.epochs as u32;
    bundle.meta.seed = cfg.seed;
    Ok((bundle, curve))
}

/// Classification accuracy over a dataset, batched.
pub fn accuracy(model: &ModelBundle, data: &Dataset) -> Result<f32> {
    accuracy_on(model, &data.images, &data.labels)
}

/// Argmax predictions over an image tensor, evaluated in chunks of 128.
pub fn predict_batched(model: &ModelBundle, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let sample: usize = images.shape()[1..].iter().product();
    let mut preds = Vec::with_capacity(n);
    for start in (0..n).step_by(128) {
        let end = (start + 128).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let batch = Tensor::new(shape, images.data()[start * sample..end * sample].to_vec())?;
        preds.extend(model.predict(&batch)?);
    }
    Ok(preds)
}

/// Accuracy of `model` on an explicit image/label pair.
pub fn accuracy_on(model: &ModelBundle, images: &Tensor, labels: &[u32]) -> Result<f32> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::config("cannot score an empty batch"));
    }
    let correct = predict_batched(model, images)?
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p == l as usize)
        .count();
    Ok(correct as f32 / n as f32)
}
