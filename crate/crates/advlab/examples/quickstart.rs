//! Minimal tour: train a tiny frozen-backbone classifier, break it with
//! PGD, then route around the attack with a detector-gated ensemble.
//!
//! Run with `cargo run --release --example quickstart`.

use advlab::attacks::{pgd, robust_accuracy, AttackConfig};
use advlab::defenses::{
    specialized_ensemble_predict, train_adversarial_head, train_posthoc_detector, LatentHead,
    SpecializedEnsemble,
};
use advlab::harness::generate_synthetic;
use advlab::models::{accuracy, build_vit, train_supervised, HeadConfig, TrainConfig, ViTConfig};

fn main() -> advlab::Result<()> {
    let train = generate_synthetic(9, 30, [3, 16, 16], 100)?;
    let val = generate_synthetic(9, 10, [3, 16, 16], 200)?;

    let model = build_vit(&ViTConfig::desk(), &HeadConfig::linear(), 1, "demo")?;
    let tc = TrainConfig {
        epochs: 20,
        lr: 0.1,
        batch_size: 16,
        seed: 1,
    };
    let (mut model, _) = train_supervised(&model, &train, &tc)?;
    model.set_frozen_backbone(true);
    println!("clean accuracy: {:.3}", accuracy(&model, &val)?);

    let attack = AttackConfig::pgd(0.15).with_seed(7);
    let adv_val = pgd(&model, &val.images, &val.labels, &attack)?;
    println!("robust accuracy under PGD: {:.3}", robust_accuracy(&model, &adv_val)?);

    // Detector and specialized head from attacks on the training set.
    let adv_train = pgd(&model, &train.images, &train.labels, &attack.clone().with_seed(23))?;
    let probe_tc = TrainConfig {
        epochs: 40,
        lr: 0.2,
        batch_size: 16,
        seed: 8,
    };
    let (detector, holdout) =
        train_posthoc_detector(&model, &train.images, &adv_train.perturbed, &probe_tc)?;
    println!("detector holdout balanced accuracy: {holdout:.3}");
    let (adv_head, _) =
        train_adversarial_head(&model, &adv_train.perturbed, &adv_train.labels, &probe_tc)?;

    let ensemble = SpecializedEnsemble::new(
        &model,
        detector,
        LatentHead::from_bundle(&model),
        adv_head,
        0.5,
    )?;
    let (preds, _) = specialized_ensemble_predict(&ensemble, &model, &adv_val.perturbed)?;
    let recovered = preds
        .iter()
        .zip(&adv_val.labels)
        .filter(|(&p, &l)| p == l as usize)
        .count() as f32
        / val.len() as f32;
    println!("ensemble accuracy on the same attacks: {recovered:.3}");
    Ok(())
}
