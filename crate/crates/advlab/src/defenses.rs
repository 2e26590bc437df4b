//! Frozen-backbone defense strategies.
//!
//! Three ways to harden a classifier whose backbone never updates:
//!
//! 1. Adversarial training of the head — each batch is replaced by a PGD
//!    attack against the latest head before the descent step.
//! 2. Ensemble adversarial training — a pool of attacks is generated once on
//!    a static surrogate model; batches are drawn from clean images or their
//!    pooled counterparts with a mixing probability.
//! 3. Ensemble of specialized heads — a latent-space detector routes each
//!    sample to either the clean head or a head trained purely on
//!    adversarial latents.

use crate::attacks::{generate, pgd, robust_accuracy, AttackConfig, AttackKind};
use crate::diffcore::{ParameterSet, Tape, Tensor};
use crate::harness::dataset::Dataset;
use crate::harness::report::EvaluationReport;
use crate::models::checkpoint::{read_container, write_container};
use crate::models::train::{accuracy, predict_batched, run_epoch, TrainConfig};
use crate::models::{head, HeadConfig, ModelBundle};
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::path::Path;

// ── Adversarial training of the head ────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdvTrainConfig {
    /// Inner maximizer; must be a PGD config.
    pub inner_attack: AttackConfig,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_attack.kind != AttackKind::Pgd {
            return Err(Error::config("adversarial training requires a pgd inner attack"));
        }
        self.inner_attack.validate()?;
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
        .validate()
    }
}

/// Clean/robust accuracy after each epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f32,
    pub clean_accuracy: f32,
    pub robust_accuracy: f32,
}

const EPOCH_EVAL_CAP: usize = 128;

/// Min-max training of the classification head on a frozen backbone: every
/// batch is attacked against the latest head, then the head descends on the
/// adversarial loss. With ε = 0 this reduces to standard training, step for
/// step.
pub fn adversarial_train_head(
    model: &ModelBundle,
    data: &Dataset,
    cfg: &AdvTrainConfig,
) -> Result<(ModelBundle, Vec<EpochStats>)> {
    cfg.validate()?;
    if !model.frozen_backbone {
        return Err(Error::config(
            "adversarial_train_head requires a frozen backbone (head-only training)",
        ));
    }
    if data.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let mut bundle = model.clone();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let eval = data.subset(&(0..data.len().min(EPOCH_EVAL_CAP)).collect::<Vec<_>>());
    let mut stats = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let loss = run_epoch(
            &mut bundle,
            data,
            cfg.batch_size,
            cfg.lr,
            &mut rng,
            &mut |current, x, y, _| {
                let adv = pgd(current, &x, &y, &cfg.inner_attack)?;
                Ok((adv.perturbed, y))
            },
        )?;
        let clean_accuracy = accuracy(&bundle, &eval)?;
        let adv = pgd(&bundle, &eval.images, &eval.labels, &cfg.inner_attack)?;
        let robust = robust_accuracy(&bundle, &adv)?;
        stats.push(EpochStats {
            loss,
            clean_accuracy,
            robust_accuracy: robust,
        });
    }
    bundle.meta.epochs += cfg.epochs as u32;
    bundle.meta.seed = cfg.seed;
    bundle.meta.strategy = Some(format!("adv-train-{}", cfg.inner_attack.label()));
    Ok((bundle, stats))
}

// ── Ensemble adversarial training ───────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnsembleATConfig {
    /// Id of the static surrogate the pool is generated on.
    pub surrogate_id: String,
    /// Chance a batch is swapped for its adversarial counterpart.
    #[serde(default = "default_mix")]
    pub mix_probability: f32,
    pub attack: AttackConfig,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

fn default_mix() -> f32 {
    0.5
}

impl EnsembleATConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix_probability) {
            return Err(Error::config(format!(
                "mix probability {} outside [0, 1]",
                self.mix_probability
            )));
        }
        self.attack.validate()?;
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
        .validate()
    }
}

/// Head training on data augmented with attacks pre-generated once on a
/// static surrogate. Each batch is swapped wholesale for its pooled
/// adversarial counterpart with `mix_probability`; the coin comes from a
/// stream separate from the shuffle rng, so `mix_probability = 0`
/// reproduces standard training byte for byte.
pub fn ensemble_adversarial_train_head(
    model: &ModelBundle,
    surrogate: &ModelBundle,
    data: &Dataset,
    cfg: &EnsembleATConfig,
) -> Result<ModelBundle> {
    cfg.validate()?;
    if !model.frozen_backbone {
        return Err(Error::config(
            "ensemble_adversarial_train_head requires a frozen backbone",
        ));
    }
    if data.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    if surrogate.id != cfg.surrogate_id {
        return Err(Error::config(format!(
            "surrogate id {} does not match config surrogate_id {}",
            surrogate.id, cfg.surrogate_id
        )));
    }
    if surrogate.id == model.id {
        return Err(Error::config(
            "surrogate must be a different model instance than the one being trained",
        ));
    }
    if surrogate.input_shape() != model.input_shape() {
        return Err(Error::config(format!(
            "surrogate input shape {:?} does not match model {:?}",
            surrogate.input_shape(),
            model.input_shape()
        )));
    }

    // Static pool: one attack per training sample, generated before training
    // and never refreshed.
    let pool = if cfg.mix_probability > 0.0 {
        Some(generate(surrogate, &data.images, &data.labels, &cfg.attack)?.perturbed)
    } else {
        None
    };
    let sample: usize = data.image_shape().iter().product();

    let mut bundle = model.clone();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut coin = StdRng::seed_from_u64(cfg.seed ^ 0x454e53_u64);
    for _ in 0..cfg.epochs {
        run_epoch(
            &mut bundle,
            data,
            cfg.batch_size,
            cfg.lr,
            &mut rng,
            &mut |_, x, y, idx| {
                let adversarial = coin.random::<f32>() < cfg.mix_probability;
                match (&pool, adversarial) {
                    (Some(pool), true) => {
                        let mut out = Vec::with_capacity(idx.len() * sample);
                        for &i in idx {
                            out.extend_from_slice(&pool.data()[i * sample..(i + 1) * sample]);
                        }
                        let mut shape = x.shape().to_vec();
                        shape[0] = idx.len();
                        Ok((Tensor::new(shape, out)?, y))
                    }
                    _ => Ok((x, y)),
                }
            },
        )?;
    }
    bundle.meta.epochs += cfg.epochs as u32;
    bundle.meta.seed = cfg.seed;
    bundle.meta.strategy = Some(format!(
        "ensemble-at-{}-on-{}",
        cfg.attack.label(),
        surrogate.id
    ));
    Ok(bundle)
}

// ── Latent heads: detector and specialized classifiers ──────────────────

/// A classifier over backbone latents; the detector and both specialized
/// heads all take this shape. Parameters live under `head.*`.
#[derive(Clone, Debug)]
pub struct LatentHead {
    pub cfg: HeadConfig,
    pub params: ParameterSet,
}

impl LatentHead {
    /// Extract the classification head of a bundle as a standalone artifact.
    pub fn from_bundle(model: &ModelBundle) -> Self {
        let mut params = ParameterSet::new();
        for (path, tensor) in model.params.iter() {
            if path.starts_with("head.") {
                params.insert(path.clone(), tensor.clone());
            }
        }
        LatentHead {
            cfg: model.head.clone(),
            params,
        }
    }

    pub fn input_width(&self) -> usize {
        self.params
            .get("head.layers.0.weight")
            .map(|t| t.shape()[0])
            .unwrap_or(0)
    }

    pub fn outputs(&self) -> usize {
        let last = self.cfg.num_layers() - 1;
        self.params
            .get(&format!("head.layers.{last}.weight"))
            .map(|t| t.shape()[1])
            .unwrap_or(0)
    }

    /// Logit rows for a latent matrix.
    pub fn logits(&self, latents: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(latents.clone());
        let binding = self.params.bind(&mut tape);
        let out = head::forward(&mut tape, &self.cfg, &binding, "head", x)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, latents: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(latents)?.argmax_rows())
    }
}

/// Backbone latents for an image batch, computed in chunks.
pub fn compute_latents(model: &ModelBundle, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let sample: usize = images.shape()[1..].iter().product();
    let width = model.latent_width();
    let mut out = Vec::with_capacity(n * width);
    for start in (0..n).step_by(128) {
        let end = (start + 128).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, images.data()[start * sample..end * sample].to_vec())?;
        out.extend_from_slice(model.latent(&chunk)?.data());
    }
    Tensor::new(vec![n, width], out)
}

/// Train a linear classifier on latent rows by mini-batch SGD.
///
/// Training runs on column-standardized latents (plain SGD converges poorly
/// when feature scales differ by orders of magnitude); the standardization
/// is folded back into the returned weights, so the artifact applies
/// directly to raw latents.
pub fn train_latent_probe(
    latents: &Tensor,
    labels: &[u32],
    outputs: usize,
    cfg: &TrainConfig,
) -> Result<LatentHead> {
    cfg.validate()?;
    if latents.rank() != 2 || latents.shape()[0] != labels.len() {
        return Err(Error::shape("latent-probe", latents.shape(), &[labels.len()]));
    }
    if latents.shape()[0] == 0 {
        return Err(Error::config("no latents to train on"));
    }
    let (n, width) = (latents.shape()[0], latents.shape()[1]);

    // Column statistics over the training latents.
    let mut mean = vec![0.0f32; width];
    for row in latents.data().chunks_exact(width) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f32;
    }
    let mut std = vec![0.0f32; width];
    for row in latents.data().chunks_exact(width) {
        for (s, (&v, &m)) in std.iter_mut().zip(row.iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / n as f32).sqrt().max(1e-6);
    }
    let standardized: Vec<f32> = latents
        .data()
        .chunks_exact(width)
        .flat_map(|row| {
            row.iter()
                .zip(mean.iter().zip(&std))
                .map(|(&v, (&m, &s))| (v - m) / s)
                .collect::<Vec<_>>()
        })
        .collect();

    let head_cfg = HeadConfig::linear();
    let mut params = ParameterSet::new();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    head_cfg.init_params("head", width, outputs, &mut rng, &mut params);

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut bx = Vec::with_capacity(chunk.len() * width);
            let mut by = Vec::with_capacity(chunk.len());
            for &i in chunk {
                bx.extend_from_slice(&standardized[i * width..(i + 1) * width]);
                by.push(labels[i]);
            }
            let mut tape = Tape::new();
            let x = tape.input(Tensor::new(vec![chunk.len(), width], bx)?);
            let binding = params.bind(&mut tape);
            let logits = head::forward(&mut tape, &head_cfg, &binding, "head", x)?;
            let loss = tape.cross_entropy(logits, &by)?;
            let grads = tape.backward(loss)?;
            params.apply_sgd(&binding, &grads, cfg.lr)?;
        }
    }

    // Fold the standardization into the weights: the probe then consumes raw
    // latents. w'_ij = w_ij / s_i, b'_j = b_j - sum_i m_i w_ij / s_i.
    let w = params.get("head.layers.0.weight").unwrap().clone();
    let b = params.get("head.layers.0.bias").unwrap().clone();
    let mut folded_w = vec![0.0f32; width * outputs];
    let mut folded_b = b.data().to_vec();
    for i in 0..width {
        for j in 0..outputs {
            let scaled = w.data()[i * outputs + j] / std[i];
            folded_w[i * outputs + j] = scaled;
            folded_b[j] -= mean[i] * scaled;
        }
    }
    params.insert("head.layers.0.weight", Tensor::new(vec![width, outputs], folded_w)?);
    params.insert("head.layers.0.bias", Tensor::from_vec(folded_b));
    Ok(LatentHead {
        cfg: head_cfg,
        params,
    })
}

/// Mean per-class recall; classes absent from `labels` are skipped.
pub fn balanced_accuracy(preds: &[usize], labels: &[u32], classes: usize) -> f32 {
    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        count[l as usize] += 1;
        if p == l as usize {
            hit[l as usize] += 1;
        }
    }
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..classes {
        if count[c] > 0 {
            total += hit[c] as f32 / count[c] as f32;
            present += 1;
        }
    }
    if present == 0 {
        0.0
    } else {
        total / present as f32
    }
}

fn holdout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for i in 0..n {
        if i % 5 == 4 {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}

fn gather_rows(matrix: &Tensor, rows: &[usize]) -> Tensor {
    let width = matrix.shape()[1];
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&matrix.data()[r * width..(r + 1) * width]);
    }
    Tensor::new(vec![rows.len(), width], out).expect("gather rows")
}

/// Train the post-hoc detector: a linear 2-class probe (original = 0,
/// adversarial = 1) over backbone latents, balanced to equal counts.
/// Returns the probe and its balanced accuracy on an internal 1-in-5
/// holdout.
pub fn train_posthoc_detector(
    model: &ModelBundle,
    clean_images: &Tensor,
    adv_images: &Tensor,
    cfg: &TrainConfig,
) -> Result<(LatentHead, f32)> {
    if clean_images.shape()[1..] != adv_images.shape()[1..] {
        return Err(Error::shape(
            "detector-data",
            clean_images.shape(),
            adv_images.shape(),
        ));
    }
    let n = clean_images.shape()[0].min(adv_images.shape()[0]);
    if n == 0 {
        return Err(Error::config("detector needs at least one sample per class"));
    }
    let clean_lat = compute_latents(model, clean_images)?;
    let adv_lat = compute_latents(model, adv_images)?;
    let width = clean_lat.shape()[1];

    // Interleave clean/adversarial so the holdout stays balanced.
    let mut rows = Vec::with_capacity(2 * n * width);
    let mut labels = Vec::with_capacity(2 * n);
    for i in 0..n {
        rows.extend_from_slice(&clean_lat.data()[i * width..(i + 1) * width]);
        labels.push(0u32);
        rows.extend_from_slice(&adv_lat.data()[i * width..(i + 1) * width]);
        labels.push(1u32);
    }
    let all = Tensor::new(vec![2 * n, width], rows)?;
    let (train_idx, held_idx) = holdout_split(2 * n);
    let train_lat = gather_rows(&all, &train_idx);
    let train_lab: Vec<u32> = train_idx.iter().map(|&i| labels[i]).collect();
    let probe = train_latent_probe(&train_lat, &train_lab, 2, cfg)?;

    let held_lat = gather_rows(&all, &held_idx);
    let held_lab: Vec<u32> = held_idx.iter().map(|&i| labels[i]).collect();
    let preds = probe.predict(&held_lat)?;
    Ok((probe, balanced_accuracy(&preds, &held_lab, 2)))
}

/// Fraction of a (presumed clean) stream the detector flags as adversarial —
/// the measured false-positive rate when the stream really is clean.
pub fn detector_flag_rate(
    model: &ModelBundle,
    detector: &LatentHead,
    images: &Tensor,
) -> Result<f32> {
    let latents = compute_latents(model, images)?;
    let preds = detector.predict(&latents)?;
    let flagged = preds.iter().filter(|&&p| p == 1).count();
    Ok(flagged as f32 / preds.len().max(1) as f32)
}

/// Detector balanced accuracy on explicit clean/adversarial evaluation sets.
pub fn detector_balanced_accuracy(
    model: &ModelBundle,
    detector: &LatentHead,
    clean_images: &Tensor,
    adv_images: &Tensor,
) -> Result<f32> {
    let clean_lat = compute_latents(model, clean_images)?;
    let adv_lat = compute_latents(model, adv_images)?;
    let mut preds = detector.predict(&clean_lat)?;
    let mut labels = vec![0u32; clean_lat.shape()[0]];
    preds.extend(detector.predict(&adv_lat)?);
    labels.extend(vec![1u32; adv_lat.shape()[0]]);
    Ok(balanced_accuracy(&preds, &labels, 2))
}

/// Train the adversarial classification head: a linear probe labelling
/// perturbed inputs with their true (pre-attack) classes. Returns the probe
/// and its accuracy on an internal 1-in-5 holdout.
pub fn train_adversarial_head(
    model: &ModelBundle,
    adv_images: &Tensor,
    true_labels: &[u32],
    cfg: &TrainConfig,
) -> Result<(LatentHead, f32)> {
    if adv_images.shape()[0] != true_labels.len() {
        return Err(Error::config(format!(
            "{} adversarial samples but {} labels",
            adv_images.shape()[0],
            true_labels.len()
        )));
    }
    let latents = compute_latents(model, adv_images)?;
    let (train_idx, held_idx) = holdout_split(true_labels.len());
    let train_lat = gather_rows(&latents, &train_idx);
    let train_lab: Vec<u32> = train_idx.iter().map(|&i| true_labels[i]).collect();
    let probe = train_latent_probe(&train_lat, &train_lab, model.classes(), cfg)?;

    let held_lat = gather_rows(&latents, &held_idx);
    let held_lab: Vec<u32> = held_idx.iter().map(|&i| true_labels[i]).collect();
    let preds = probe.predict(&held_lat)?;
    let correct = preds
        .iter()
        .zip(&held_lab)
        .filter(|(&p, &l)| p == l as usize)
        .count();
    Ok((probe, correct as f32 / held_lab.len().max(1) as f32))
}

/// Accuracy of a latent head on an image batch through the backbone.
pub fn latent_head_accuracy(
    model: &ModelBundle,
    probe: &LatentHead,
    images: &Tensor,
    labels: &[u32],
) -> Result<f32> {
    let latents = compute_latents(model, images)?;
    let preds = probe.predict(&latents)?;
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p == l as usize)
        .count();
    Ok(correct as f32 / labels.len().max(1) as f32)
}

// ── Ensemble of specialized heads ───────────────────────────────────────

/// Which head answered for a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Clean,
    Adversarial,
}

/// Detector-gated pair of specialized heads over one shared backbone.
#[derive(Clone, Debug)]
pub struct SpecializedEnsemble {
    pub backbone_id: String,
    pub detector: LatentHead,
    pub clean_head: LatentHead,
    pub adv_head: LatentHead,
    /// A sample routes to the adversarial head iff its detector probability
    /// strictly exceeds this.
    pub threshold: f32,
}

impl SpecializedEnsemble {
    /// Component widths are validated here, not at predict time.
    pub fn new(
        backbone: &ModelBundle,
        detector: LatentHead,
        clean_head: LatentHead,
        adv_head: LatentHead,
        threshold: f32,
    ) -> Result<Self> {
        let width = backbone.latent_width();
        for (name, artifact, outs) in [
            ("detector", &detector, 2),
            ("clean head", &clean_head, backbone.classes()),
            ("adversarial head", &adv_head, backbone.classes()),
        ] {
            if artifact.input_width() != width {
                return Err(Error::config(format!(
                    "{name} input width {} does not match backbone latent width {width}",
                    artifact.input_width()
                )));
            }
            if artifact.outputs() != outs {
                return Err(Error::config(format!(
                    "{name} has {} outputs, expected {outs}",
                    artifact.outputs()
                )));
            }
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::config(format!("threshold {threshold} outside [0, 1]")));
        }
        Ok(SpecializedEnsemble {
            backbone_id: backbone.id.clone(),
            detector,
            clean_head,
            adv_head,
            threshold,
        })
    }
}

/// One backbone forward per sample; the detector's adversarial probability
/// gates which specialized head answers. Probability exactly equal to the
/// threshold routes to the clean head.
pub fn specialized_ensemble_predict(
    ensemble: &SpecializedEnsemble,
    backbone: &ModelBundle,
    images: &Tensor,
) -> Result<(Vec<usize>, Vec<Route>)> {
    if backbone.id != ensemble.backbone_id {
        return Err(Error::config(format!(
            "ensemble was built for backbone {}, got {}",
            ensemble.backbone_id, backbone.id
        )));
    }
    let latents = compute_latents(backbone, images)?;
    let det_logits = ensemble.detector.logits(&latents)?;
    let clean_preds = ensemble.clean_head.predict(&latents)?;
    let adv_preds = ensemble.adv_head.predict(&latents)?;

    let n = latents.shape()[0];
    let mut preds = Vec::with_capacity(n);
    let mut routes = Vec::with_capacity(n);
    for i in 0..n {
        let row = &det_logits.data()[i * 2..(i + 1) * 2];
        let m = row[0].max(row[1]);
        let e0 = (row[0] - m).exp();
        let e1 = (row[1] - m).exp();
        let p_adv = e1 / (e0 + e1);
        if p_adv > ensemble.threshold {
            preds.push(adv_preds[i]);
            routes.push(Route::Adversarial);
        } else {
            preds.push(clean_preds[i]);
            routes.push(Route::Clean);
        }
    }
    Ok((preds, routes))
}

// ── Defense grid evaluation ─────────────────────────────────────────────

/// A named prediction strategy for grid evaluation.
pub enum DefenseStrategy<'a> {
    /// A plain model (the no-defense baseline or a retrained head).
    Model {
        name: String,
        model: &'a ModelBundle,
    },
    /// A specialized ensemble over a shared backbone.
    Ensemble {
        name: String,
        ensemble: &'a SpecializedEnsemble,
        backbone: &'a ModelBundle,
    },
}

impl DefenseStrategy<'_> {
    pub fn name(&self) -> &str {
        match self {
            DefenseStrategy::Model { name, .. } => name,
            DefenseStrategy::Ensemble { name, .. } => name,
        }
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        match self {
            DefenseStrategy::Model { model, .. } => predict_batched(model, images),
            DefenseStrategy::Ensemble {
                ensemble, backbone, ..
            } => Ok(specialized_ensemble_predict(ensemble, backbone, images)?.0),
        }
    }
}

fn strategy_accuracy(s: &DefenseStrategy, images: &Tensor, labels: &[u32]) -> Result<f32> {
    let preds = s.predict(images)?;
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p == l as usize)
        .count();
    Ok(correct as f32 / labels.len().max(1) as f32)
}

/// Strategy × attack accuracy grid. Evaluation attacks are crafted once per
/// config on the undefended `target` model, then every strategy is scored on
/// the same perturbed data; the first column scores clean data.
pub fn evaluate_defense_grid(
    target: &ModelBundle,
    strategies: &[DefenseStrategy],
    attack_grid: &[AttackConfig],
    data: &Dataset,
) -> Result<EvaluationReport> {
    if strategies.is_empty() {
        return Err(Error::config("no strategies to evaluate"));
    }
    let rows: Vec<String> = strategies.iter().map(|s| s.name().to_string()).collect();
    let mut cols = vec!["clean".to_string()];
    cols.extend(attack_grid.iter().map(|a| a.label()));
    let mut report = EvaluationReport::new(rows, cols)?;

    for (si, strategy) in strategies.iter().enumerate() {
        report.set(si, 0, strategy_accuracy(strategy, &data.images, &data.labels)?)?;
    }
    for (ai, attack) in attack_grid.iter().enumerate() {
        let batch = generate(target, &data.images, &data.labels, attack)?;
        for (si, strategy) in strategies.iter().enumerate() {
            report.set(
                si,
                ai + 1,
                strategy_accuracy(strategy, &batch.perturbed, &batch.labels)?,
            )?;
        }
    }
    report
        .metadata
        .insert("target_model".into(), target.id.clone());
    Ok(report)
}

// ── Probe persistence ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeMeta {
    kind: String,
    role: String,
    backbone_id: String,
    head: HeadConfig,
    strategy: String,
}

/// Persist a latent head in the checkpoint container with a strategy tag.
pub fn save_latent_head(
    probe: &LatentHead,
    backbone_id: &str,
    role: &str,
    strategy: &str,
    path: &Path,
) -> Result<()> {
    let meta = ProbeMeta {
        kind: "latent-head".into(),
        role: role.into(),
        backbone_id: backbone_id.into(),
        head: probe.cfg.clone(),
        strategy: strategy.into(),
    };
    write_container(path, &serde_json::to_vec(&meta)?, &probe.params)
}

/// Load a latent head; returns the probe and its recorded backbone id.
pub fn load_latent_head(path: &Path) -> Result<(LatentHead, String)> {
    let (blob, tensors) = read_container(path)?;
    let meta: ProbeMeta = serde_json::from_slice(&blob).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        reason: format!("config blob: {e}"),
    })?;
    if meta.kind != "latent-head" {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            reason: format!("container holds {:?}, not a latent head", meta.kind),
        });
    }
    meta.head.validate()?;
    let mut params = ParameterSet::new();
    for (p, t) in tensors {
        params.insert(p, t);
    }
    Ok((
        LatentHead {
            cfg: meta.head,
            params,
        },
        meta.backbone_id,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::generate_synthetic;
    use crate::models::{build_vit, train_supervised, ViTConfig};

    fn small_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            latent_layers: 2,
            classes: 3,
        }
    }

    fn frozen_model(seed: u64) -> ModelBundle {
        let mut m =
            build_vit(&small_cfg(), &HeadConfig::linear(), seed, &format!("m-{seed}")).unwrap();
        m.set_frozen_backbone(true);
        m
    }

    fn small_data(seed: u64, per_class: usize) -> Dataset {
        generate_synthetic(3, per_class, [1, 8, 8], seed).unwrap()
    }

    fn probe_with_bias(width: usize, outputs: usize, bias: Vec<f32>) -> LatentHead {
        let mut params = ParameterSet::new();
        params.insert("head.layers.0.weight", Tensor::zeros(&[width, outputs]));
        params.insert("head.layers.0.bias", Tensor::from_vec(bias));
        LatentHead {
            cfg: HeadConfig::linear(),
            params,
        }
    }

    #[test]
    fn adv_training_rejects_unfrozen_backbone() {
        let m = build_vit(&small_cfg(), &HeadConfig::linear(), 0, "m").unwrap();
        let data = small_data(1, 2);
        let cfg = AdvTrainConfig {
            inner_attack: AttackConfig::pgd(0.05).with_steps(2),
            epochs: 1,
            lr: 0.1,
            batch_size: 4,
            seed: 0,
        };
        assert!(adversarial_train_head(&m, &data, &cfg).is_err());
    }

    #[test]
    fn adv_training_rejects_non_pgd_inner_attack() {
        let m = frozen_model(0);
        let data = small_data(1, 2);
        let cfg = AdvTrainConfig {
            inner_attack: AttackConfig::fgsm(0.05),
            epochs: 1,
            lr: 0.1,
            batch_size: 4,
            seed: 0,
        };
        assert!(adversarial_train_head(&m, &data, &cfg).is_err());
    }

    #[test]
    fn zero_epsilon_adv_training_equals_standard_training_bytes() {
        let m = frozen_model(3);
        let data = small_data(4, 4);
        let adv_cfg = AdvTrainConfig {
            inner_attack: AttackConfig::pgd(0.0).with_steps(3).with_seed(5),
            epochs: 2,
            lr: 0.15,
            batch_size: 4,
            seed: 42,
        };
        let train_cfg = TrainConfig {
            epochs: 2,
            lr: 0.15,
            batch_size: 4,
            seed: 42,
        };
        let (at, _) = adversarial_train_head(&m, &data, &adv_cfg).unwrap();
        let (plain, _) = train_supervised(&m, &data, &train_cfg).unwrap();
        assert_eq!(at.params.fingerprint(), plain.params.fingerprint());
    }

    #[test]
    fn zero_mix_ensemble_at_equals_standard_training_bytes() {
        let m = frozen_model(6);
        let surrogate = frozen_model(7);
        let data = small_data(8, 4);
        let cfg = EnsembleATConfig {
            surrogate_id: surrogate.id.clone(),
            mix_probability: 0.0,
            attack: AttackConfig::pgd(0.06).with_steps(2),
            epochs: 2,
            lr: 0.15,
            batch_size: 4,
            seed: 42,
        };
        let ens = ensemble_adversarial_train_head(&m, &surrogate, &data, &cfg).unwrap();
        let train_cfg = TrainConfig {
            epochs: 2,
            lr: 0.15,
            batch_size: 4,
            seed: 42,
        };
        let (plain, _) = train_supervised(&m, &data, &train_cfg).unwrap();
        assert_eq!(ens.params.fingerprint(), plain.params.fingerprint());
    }

    #[test]
    fn ensemble_at_validates_surrogate() {
        let m = frozen_model(9);
        let data = small_data(10, 2);
        let cfg = EnsembleATConfig {
            surrogate_id: "m-9".into(),
            mix_probability: 0.5,
            attack: AttackConfig::pgd(0.06).with_steps(2),
            epochs: 1,
            lr: 0.1,
            batch_size: 4,
            seed: 0,
        };
        // same instance as the trained model is rejected
        assert!(ensemble_adversarial_train_head(&m, &m, &data, &cfg).is_err());
        // wrong id is rejected
        let other = frozen_model(11);
        assert!(ensemble_adversarial_train_head(&m, &other, &data, &cfg).is_err());
    }

    #[test]
    fn frozen_backbone_survives_every_defense_trainer() {
        let m = frozen_model(12);
        let surrogate = frozen_model(13);
        let data = small_data(14, 3);
        let backbone_before = m.params.fingerprint_prefix("backbone.");

        let adv_cfg = AdvTrainConfig {
            inner_attack: AttackConfig::pgd(0.05).with_steps(2).with_seed(1),
            epochs: 1,
            lr: 0.1,
            batch_size: 4,
            seed: 2,
        };
        let (at, _) = adversarial_train_head(&m, &data, &adv_cfg).unwrap();
        assert_eq!(at.params.fingerprint_prefix("backbone."), backbone_before);

        let ens_cfg = EnsembleATConfig {
            surrogate_id: surrogate.id.clone(),
            mix_probability: 0.5,
            attack: AttackConfig::pgd(0.05).with_steps(2),
            epochs: 1,
            lr: 0.1,
            batch_size: 4,
            seed: 3,
        };
        let ens = ensemble_adversarial_train_head(&m, &surrogate, &data, &ens_cfg).unwrap();
        assert_eq!(ens.params.fingerprint_prefix("backbone."), backbone_before);
    }

    #[test]
    fn ensemble_construction_rejects_width_mismatch() {
        let m = frozen_model(15);
        let width = m.latent_width();
        let det = probe_with_bias(width, 2, vec![0.0, 0.0]);
        let clean = LatentHead::from_bundle(&m);
        let adv = probe_with_bias(width, 3, vec![0.0; 3]);
        assert!(SpecializedEnsemble::new(&m, det.clone(), clean.clone(), adv, 0.5).is_ok());
        let bad_adv = probe_with_bias(width + 1, 3, vec![0.0; 3]);
        assert!(SpecializedEnsemble::new(&m, det, clean, bad_adv, 0.5).is_err());
    }

    #[test]
    fn forced_detector_reduces_to_single_heads() {
        let m = frozen_model(16);
        let data = small_data(17, 3);
        let width = m.latent_width();
        let clean = LatentHead::from_bundle(&m);
        let (adv, _) = train_adversarial_head(
            &m,
            &data.images,
            &data.labels,
            &TrainConfig {
                epochs: 2,
                lr: 0.1,
                batch_size: 4,
                seed: 1,
            },
        )
        .unwrap();

        // detector forced to clean: identical to the clean head alone
        let force_clean = probe_with_bias(width, 2, vec![1e6, -1e6]);
        let ens =
            SpecializedEnsemble::new(&m, force_clean, clean.clone(), adv.clone(), 0.5).unwrap();
        let (preds, routes) = specialized_ensemble_predict(&ens, &m, &data.images).unwrap();
        assert!(routes.iter().all(|&r| r == Route::Clean));
        assert_eq!(preds, m.predict(&data.images).unwrap());

        // detector forced to adversarial: identical to the adversarial head
        let force_adv = probe_with_bias(width, 2, vec![-1e6, 1e6]);
        let ens = SpecializedEnsemble::new(&m, force_adv, clean, adv.clone(), 0.5).unwrap();
        let (preds, routes) = specialized_ensemble_predict(&ens, &m, &data.images).unwrap();
        assert!(routes.iter().all(|&r| r == Route::Adversarial));
        let latents = compute_latents(&m, &data.images).unwrap();
        assert_eq!(preds, adv.predict(&latents).unwrap());
    }

    #[test]
    fn probability_exactly_at_threshold_routes_clean() {
        let m = frozen_model(18);
        let data = small_data(19, 1);
        let width = m.latent_width();
        // zero weights and equal biases: softmax is exactly [0.5, 0.5]
        let det = probe_with_bias(width, 2, vec![0.0, 0.0]);
        let clean = LatentHead::from_bundle(&m);
        let adv = probe_with_bias(width, 3, vec![0.0, 0.0, 1.0]);
        let ens = SpecializedEnsemble::new(&m, det, clean, adv, 0.5).unwrap();
        let (_, routes) = specialized_ensemble_predict(&ens, &m, &data.images).unwrap();
        assert!(routes.iter().all(|&r| r == Route::Clean));
    }

    #[test]
    fn ensemble_predict_is_deterministic_and_permutation_equivariant() {
        let m = frozen_model(20);
        let data = small_data(21, 2);
        let width = m.latent_width();
        let det = probe_with_bias(width, 2, vec![0.1, -0.1]);
        let clean = LatentHead::from_bundle(&m);
        let adv = probe_with_bias(width, 3, vec![0.3, 0.0, -0.3]);
        let ens = SpecializedEnsemble::new(&m, det, clean, adv, 0.5).unwrap();
        let (p1, r1) = specialized_ensemble_predict(&ens, &m, &data.images).unwrap();
        let (p2, r2) = specialized_ensemble_predict(&ens, &m, &data.images).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1, r2);
        let perm = [5usize, 3, 0, 1, 4, 2];
        let (px, _) = data.gather(&perm);
        let (pp, _) = specialized_ensemble_predict(&ens, &m, &px).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            assert_eq!(pp[new_i], p1[old_i]);
        }
    }

    #[test]
    fn grid_no_defense_row_equals_robust_accuracy() {
        let m = frozen_model(22);
        let data = small_data(23, 3);
        let attack = AttackConfig::pgd(0.06).with_steps(3).with_seed(7);
        let strategies = vec![DefenseStrategy::Model {
            name: "no-defense".into(),
            model: &m,
        }];
        let report = evaluate_defense_grid(&m, &strategies, std::slice::from_ref(&attack), &data).unwrap();
        let batch = pgd(&m, &data.images, &data.labels, &attack).unwrap();
        let direct = robust_accuracy(&m, &batch).unwrap();
        assert!((report.get(0, 1) - direct).abs() < 1e-4);
        let clean = accuracy(&m, &data).unwrap();
        assert!((report.get(0, 0) - clean).abs() < 1e-4);
    }

    #[test]
    fn grid_has_row_per_strategy_and_column_per_attack() {
        let m = frozen_model(24);
        let data = small_data(25, 1);
        let strategies: Vec<DefenseStrategy> = vec![
            DefenseStrategy::Model {
                name: "s0".into(),
                model: &m,
            },
            DefenseStrategy::Model {
                name: "s1".into(),
                model: &m,
            },
            DefenseStrategy::Model {
                name: "s2".into(),
                model: &m,
            },
        ];
        let attacks: Vec<AttackConfig> = [0.004f32, 0.06, 0.25]
            .iter()
            .map(|&e| AttackConfig::pgd(e).with_steps(2))
            .collect();
        let report = evaluate_defense_grid(&m, &strategies, &attacks, &data).unwrap();
        assert_eq!(report.row_labels().len(), 3);
        assert_eq!(report.col_labels().len(), 4); // clean + 3 attacks
    }

    #[test]
    fn detector_flag_rate_counts_adversarial_votes() {
        let m = frozen_model(30);
        let data = small_data(31, 2);
        let width = m.latent_width();
        // always-adversarial detector flags everything; always-clean flags nothing
        let all_adv = probe_with_bias(width, 2, vec![-1e6, 1e6]);
        assert_eq!(detector_flag_rate(&m, &all_adv, &data.images).unwrap(), 1.0);
        let all_clean = probe_with_bias(width, 2, vec![1e6, -1e6]);
        assert_eq!(detector_flag_rate(&m, &all_clean, &data.images).unwrap(), 0.0);
    }

    #[test]
    fn latent_head_roundtrips_through_container() {
        let dir = tempfile::tempdir().unwrap();
        let m = frozen_model(26);
        let data = small_data(27, 3);
        let (probe, acc) = train_posthoc_detector(
            &m,
            &data.images,
            &data.images, // degenerate but structurally fine
            &TrainConfig {
                epochs: 1,
                lr: 0.1,
                batch_size: 4,
                seed: 0,
            },
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let path = dir.path().join("det.avlb");
        save_latent_head(&probe, &m.id, "posthoc-detector", "specialized", &path).unwrap();
        let (back, backbone_id) = load_latent_head(&path).unwrap();
        assert_eq!(backbone_id, m.id);
        assert_eq!(back.params.fingerprint(), probe.params.fingerprint());
    }
}
