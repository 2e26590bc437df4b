//! White-box gradient attacks and robustness evaluation.
//!
//! FGSM and PGD perturb within an L∞ ball of radius ε around the original
//! pixels (always intersected with the valid range `[0, 1]`); the
//! Carlini–Wagner attack searches for low-L2 misclassifying inputs through a
//! tanh reparameterization. Attacked models are read-only throughout.

use crate::diffcore::Tensor;
use crate::harness::dataset::Dataset;
use crate::harness::report::EvaluationReport;
use crate::harness::tensor_io;
use crate::models::{grad_wrt_input, train::accuracy_on, ModelBundle};
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Cw,
}

/// The knobs of every attack in one place; constructors fill in the
/// conventional defaults per kind.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L∞ radius in pixel units (fgsm/pgd).
    #[serde(default)]
    pub epsilon: f32,
    /// Iterations (pgd/cw).
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// PGD ascent step.
    #[serde(default)]
    pub step_size: f32,
    /// PGD uniform random start inside the ball.
    #[serde(default = "default_true")]
    pub random_start: bool,
    /// C&W distortion/margin trade-off.
    #[serde(default = "default_c")]
    pub c: f32,
    /// C&W confidence margin.
    #[serde(default)]
    pub kappa: f32,
    /// C&W inner optimizer rate.
    #[serde(default = "default_cw_lr")]
    pub lr: f32,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    40
}
fn default_true() -> bool {
    true
}
fn default_c() -> f32 {
    50.0
}
fn default_cw_lr() -> f32 {
    0.01
}

impl AttackConfig {
    pub fn fgsm(epsilon: f32) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon.max(1e-4),
            random_start: false,
            c: default_c(),
            kappa: 0.0,
            lr: default_cw_lr(),
            seed: 0,
        }
    }

    /// PGD with the conventional defaults: 40 steps, α = ε/10, random start.
    pub fn pgd(epsilon: f32) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon,
            steps: 40,
            step_size: (epsilon / 10.0).max(1e-4),
            random_start: true,
            c: default_c(),
            kappa: 0.0,
            lr: default_cw_lr(),
            seed: 0,
        }
    }

    /// C&W-L2 with a single fixed trade-off constant (no binary search):
    /// 50 steps at lr 0.01, κ = 0, untargeted.
    pub fn cw(c: f32) -> Self {
        AttackConfig {
            kind: AttackKind::Cw,
            epsilon: 0.0,
            steps: 50,
            step_size: 0.0,
            random_start: false,
            c,
            kappa: 0.0,
            lr: default_cw_lr(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be >= 1"));
        }
        match self.kind {
            AttackKind::Pgd if self.step_size.is_nan() || self.step_size <= 0.0 => {
                Err(Error::config(format!("pgd step size must be > 0, got {}", self.step_size)))
            }
            AttackKind::Cw if self.c.is_nan() || self.c <= 0.0 => {
                Err(Error::config(format!("cw constant c must be > 0, got {}", self.c)))
            }
            AttackKind::Cw if self.lr.is_nan() || self.lr <= 0.0 => {
                Err(Error::config(format!("cw lr must be > 0, got {}", self.lr)))
            }
            AttackKind::Cw if self.kappa < 0.0 => {
                Err(Error::config(format!("cw kappa must be >= 0, got {}", self.kappa)))
            }
            _ => Ok(()),
        }
    }

    /// Short label for report columns.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Fgsm => format!("fgsm-{}", trim_float(self.epsilon)),
            AttackKind::Pgd => format!("pgd-{}", trim_float(self.epsilon)),
            AttackKind::Cw => format!("cw-c{}", trim_float(self.c)),
        }
    }
}

fn trim_float(v: f32) -> String {
    let s = format!("{v}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Per-sample Carlini–Wagner outcome.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CwStats {
    pub success: Vec<bool>,
    /// L2 distortion of the returned sample (zero when the attack failed and
    /// the original was returned).
    pub l2: Vec<f32>,
}

/// Originals, their perturbed counterparts, and provenance.
#[derive(Clone, Debug)]
pub struct AdversarialBatch {
    pub originals: Tensor,
    pub perturbed: Tensor,
    pub labels: Vec<u32>,
    pub source_model_id: String,
    pub config: AttackConfig,
    pub cw_stats: Option<CwStats>,
}

/// Clamp `x_adv` into the ε-ball around `x` intersected with `[0, 1]`.
pub fn project_linf(x_adv: &Tensor, x: &Tensor, eps: f32) -> Result<Tensor> {
    if x_adv.shape() != x.shape() {
        return Err(Error::shape("project-linf", x_adv.shape(), x.shape()));
    }
    let data = x_adv
        .data()
        .iter()
        .zip(x.data())
        .map(|(&v, &orig)| {
            let lo = (orig - eps).max(0.0);
            let hi = (orig + eps).min(1.0);
            v.clamp(lo, hi)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_batch(model: &ModelBundle, x: &Tensor, labels: &[u32]) -> Result<()> {
    let want = model.input_shape();
    if x.rank() != 4 || x.shape()[1..] != want {
        return Err(Error::shape("attack-input", x.shape(), &want));
    }
    if x.shape()[0] != labels.len() {
        return Err(Error::config(format!(
            "{} samples but {} labels",
            x.shape()[0],
            labels.len()
        )));
    }
    Ok(())
}

/// Single signed-gradient step of size ε, clipped to the valid range.
pub fn fgsm(
    model: &ModelBundle,
    x: &Tensor,
    labels: &[u32],
    epsilon: f32,
) -> Result<AdversarialBatch> {
    check_batch(model, x, labels)?;
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let perturbed = if epsilon == 0.0 {
        x.clone()
    } else {
        let grad = grad_wrt_input(model, x, labels)?;
        let data = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| (v + epsilon * sign(g)).clamp(0.0, 1.0))
            .collect();
        Tensor::new(x.shape().to_vec(), data)?
    };
    Ok(AdversarialBatch {
        originals: x.clone(),
        perturbed,
        labels: labels.to_vec(),
        source_model_id: model.id.clone(),
        config: AttackConfig::fgsm(epsilon),
        cw_stats: None,
    })
}

/// Iterated signed-gradient ascent with projection back into the ε-ball.
///
/// The random start draws each sample's offset from an rng seeded with
/// `cfg.seed ^ sample_index`, so outputs do not depend on batch sharding as
/// long as callers keep indices batch-relative.
pub fn pgd(
    model: &ModelBundle,
    x: &Tensor,
    labels: &[u32],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    if cfg.kind != AttackKind::Pgd {
        return Err(Error::config(format!("pgd called with {:?} config", cfg.kind)));
    }
    cfg.validate()?;
    check_batch(model, x, labels)?;

    let mut current = x.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        let sample = x.numel() / x.shape()[0];
        for i in 0..x.shape()[0] {
            let mut rng = StdRng::seed_from_u64(cfg.seed ^ i as u64);
            for v in &mut current.data_mut()[i * sample..(i + 1) * sample] {
                *v += rng.random_range(-cfg.epsilon..=cfg.epsilon);
            }
        }
        current = project_linf(&current, x, cfg.epsilon)?;
    }
    for _ in 0..cfg.steps {
        let grad = grad_wrt_input(model, &current, labels)?;
        for (v, &g) in current.data_mut().iter_mut().zip(grad.data()) {
            *v += cfg.step_size * sign(g);
        }
        current = project_linf(&current, x, cfg.epsilon)?;
    }
    Ok(AdversarialBatch {
        originals: x.clone(),
        perturbed: current,
        labels: labels.to_vec(),
        source_model_id: model.id.clone(),
        config: cfg.clone(),
        cw_stats: None,
    })
}

/// Untargeted Carlini–Wagner L2: optimize `w` with `x' = (tanh(w)+1)/2`,
/// minimizing `‖x'−x‖₂² + c·max(Z_y − max_{i≠y} Z_i, −κ)` by adaptive-moment
/// gradient descent, keeping the lowest-distortion success per sample.
/// Samples the attack never fooled return their originals.
pub fn cw_l2(
    model: &ModelBundle,
    x: &Tensor,
    labels: &[u32],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    if cfg.kind != AttackKind::Cw {
        return Err(Error::config(format!("cw_l2 called with {:?} config", cfg.kind)));
    }
    cfg.validate()?;
    check_batch(model, x, labels)?;
    let batch = x.shape()[0];
    let classes = model.classes();
    let sample = x.numel() / batch.max(1);

    // tanh-space start at (a clipped copy of) the originals.
    let mut w: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| (2.0 * v - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6).atanh())
        .collect();
    let mut adam_m = vec![0.0f32; w.len()];
    let mut adam_v = vec![0.0f32; w.len()];

    // Constant masks for the margin: one-hot over the true labels.
    let mut onehot = vec![0.0f32; batch * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l as usize] = 1.0;
    }
    let onehot = Tensor::new(vec![batch, classes], onehot)?;
    let suppress = onehot.map(|v| v * -1e9);

    let mut best = x.clone();
    let mut best_l2 = vec![f32::INFINITY; batch];
    let mut success = vec![false; batch];

    // steps updates; one extra forward scores the final iterate.
    for step in 0..=cfg.steps {
        let mut tape = crate::diffcore::Tape::new();
        let wnode = tape.input(Tensor::new(x.shape().to_vec(), w.clone())?);
        let th = tape.tanh(wnode)?;
        let shifted = tape.scale(th, 0.5)?;
        let half = tape.constant(Tensor::scalar(0.5));
        let x_adv = tape.add(shifted, half)?; // (tanh(w)+1)/2, inside (0,1)

        let (_, _, logits, _) = model.forward_on(&mut tape, x_adv)?;

        // Score the current iterate before updating.
        let x_val = tape.value(x_adv);
        let preds = tape.value(logits).argmax_rows();
        for i in 0..batch {
            if preds[i] != labels[i] as usize {
                let l2: f32 = x_val.data()[i * sample..(i + 1) * sample]
                    .iter()
                    .zip(&x.data()[i * sample..(i + 1) * sample])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f32>()
                    .sqrt();
                if l2 < best_l2[i] {
                    best_l2[i] = l2;
                    success[i] = true;
                    best.data_mut()[i * sample..(i + 1) * sample]
                        .copy_from_slice(&x_val.data()[i * sample..(i + 1) * sample]);
                }
            }
        }
        if step == cfg.steps {
            break;
        }

        // Distortion term.
        let orig = tape.constant(x.clone());
        let diff = tape.sub(x_adv, orig)?;
        let sq = tape.mul(diff, diff)?;
        let dist = tape.sum(sq)?;
        // Margin term: Z_y - max_{i != y} Z_i, hinged at -κ. The constant
        // -κ tail is dropped; it does not change gradients.
        let oh = tape.constant(onehot.clone());
        let contrib = tape.mul(logits, oh)?;
        let pick = tape.constant(Tensor::full(&[classes, 1], 1.0));
        let true_col = tape.matmul(contrib, pick)?;
        let true_logit = tape.reshape(true_col, &[batch])?;
        let mask = tape.constant(suppress.clone());
        let masked = tape.add(logits, mask)?;
        let other_max = tape.max_last(masked)?;
        let margin = tape.sub(true_logit, other_max)?;
        let kappa = tape.constant(Tensor::scalar(cfg.kappa));
        let shifted_margin = tape.add(margin, kappa)?;
        let hinge = tape.relu(shifted_margin)?;
        let hinge_sum = tape.sum(hinge)?;
        let weighted = tape.scale(hinge_sum, cfg.c)?;
        let objective = tape.add(dist, weighted)?;

        let grads = tape.backward(objective)?;
        let gw = grads.wrt(wnode);
        let t = (step + 1) as f32;
        let bc1 = 1.0 - 0.9f32.powf(t);
        let bc2 = 1.0 - 0.999f32.powf(t);
        for i in 0..w.len() {
            let g = gw.data()[i];
            adam_m[i] = 0.9 * adam_m[i] + 0.1 * g;
            adam_v[i] = 0.999 * adam_v[i] + 0.001 * g * g;
            w[i] -= cfg.lr * (adam_m[i] / bc1) / ((adam_v[i] / bc2).sqrt() + 1e-8);
        }
    }

    let l2 = best_l2
        .iter()
        .map(|&v| if v.is_finite() { v } else { 0.0 })
        .collect();
    Ok(AdversarialBatch {
        originals: x.clone(),
        perturbed: best,
        labels: labels.to_vec(),
        source_model_id: model.id.clone(),
        config: cfg.clone(),
        cw_stats: Some(CwStats { success, l2 }),
    })
}

/// Dispatch on the configured attack kind.
pub fn generate(
    model: &ModelBundle,
    x: &Tensor,
    labels: &[u32],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    match cfg.kind {
        AttackKind::Fgsm => {
            let mut batch = fgsm(model, x, labels, cfg.epsilon)?;
            batch.config = cfg.clone();
            Ok(batch)
        }
        AttackKind::Pgd => pgd(model, x, labels, cfg),
        AttackKind::Cw => cw_l2(model, x, labels, cfg),
    }
}

/// Fraction of perturbed samples still classified as their true label.
pub fn robust_accuracy(model: &ModelBundle, batch: &AdversarialBatch) -> Result<f32> {
    accuracy_on(model, &batch.perturbed, &batch.labels)
}

/// Cross-model transfer grid: `R[i][j]` is model `j`'s accuracy on attacks
/// generated against model `i`. The diagonal is the white-box case.
pub fn transfer_matrix(
    models: &[ModelBundle],
    data: &Dataset,
    cfg: &AttackConfig,
) -> Result<EvaluationReport> {
    if models.is_empty() {
        return Err(Error::config("transfer matrix needs at least one model"));
    }
    let shape = models[0].input_shape();
    for m in models {
        if m.input_shape() != shape {
            return Err(Error::config(format!(
                "model {} input shape {:?} differs from {:?}",
                m.id,
                m.input_shape(),
                shape
            )));
        }
    }
    let ids: Vec<String> = models.iter().map(|m| m.id.clone()).collect();
    let mut report = EvaluationReport::new(ids.clone(), ids)?;
    for (i, source) in models.iter().enumerate() {
        let batch = generate(source, &data.images, &data.labels, cfg)?;
        for (j, target) in models.iter().enumerate() {
            report.set(i, j, accuracy_on(target, &batch.perturbed, &batch.labels)?)?;
        }
    }
    report
        .metadata
        .insert("attack".into(), serde_json::to_string(cfg)?);
    Ok(report)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchSidecar {
    source_model_id: String,
    config: AttackConfig,
    labels: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cw_stats: Option<CwStats>,
}

/// Persist a batch as `<stem>.originals.atns`, `<stem>.perturbed.atns` and a
/// JSON sidecar `<stem>.json`.
pub fn save_adversarial_batch(batch: &AdversarialBatch, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    tensor_io::write_tensor_file(&dir.join(format!("{stem}.originals.atns")), &batch.originals)?;
    tensor_io::write_tensor_file(&dir.join(format!("{stem}.perturbed.atns")), &batch.perturbed)?;
    let sidecar = BatchSidecar {
        source_model_id: batch.source_model_id.clone(),
        config: batch.config.clone(),
        labels: batch.labels.clone(),
        cw_stats: batch.cw_stats.clone(),
    };
    let json = serde_json::to_vec_pretty(&sidecar)?;
    tensor_io::atomic_write(&dir.join(format!("{stem}.json")), &json)?;
    Ok(())
}

pub fn load_adversarial_batch(dir: &Path, stem: &str) -> Result<AdversarialBatch> {
    let originals = tensor_io::load_tensor_file(&dir.join(format!("{stem}.originals.atns")))?;
    let perturbed = tensor_io::load_tensor_file(&dir.join(format!("{stem}.perturbed.atns")))?;
    let sidecar: BatchSidecar =
        serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)?;
    if originals.shape() != perturbed.shape() {
        return Err(Error::shape(
            "adversarial-batch",
            originals.shape(),
            perturbed.shape(),
        ));
    }
    Ok(AdversarialBatch {
        originals,
        perturbed,
        labels: sidecar.labels,
        source_model_id: sidecar.source_model_id,
        config: sidecar.config,
        cw_stats: sidecar.cw_stats,
    })
}
