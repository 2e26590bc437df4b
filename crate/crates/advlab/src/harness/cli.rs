//! Experiment command line. Every subcommand reads one JSON run config and
//! writes artifacts plus CSV/JSON reports; runs with equal configs and
//! inputs produce byte-identical CSVs.

use crate::attacks::{
    generate, load_adversarial_batch, save_adversarial_batch, transfer_matrix,
};
use crate::defenses::{
    adversarial_train_head, ensemble_adversarial_train_head, load_latent_head, save_latent_head,
    train_adversarial_head, train_posthoc_detector, DefenseStrategy, LatentHead,
    SpecializedEnsemble,
};
use crate::harness::latent::{export_latents, LatentGroup};
use crate::harness::pca::pca_project;
use crate::harness::report::EvaluationReport;
use crate::harness::runconfig::*;
use crate::harness::tensor_io::atomic_write;
use crate::models::{
    accuracy, build_convnet, build_vit, load_checkpoint, save_checkpoint, train_supervised,
    BackboneConfig, ModelBundle,
};
use crate::{Error, Result};
use std::path::Path;

const USAGE: &str = "usage: advlab <subcommand> --config <file.json>

subcommands:
  train-backbone   build a model, train it supervised, save a checkpoint
  train-head       retrain a fresh head on a frozen checkpointed backbone
  attack           craft an adversarial batch against a checkpoint
  transfer-matrix  source x target robust-accuracy grid across checkpoints
  advtrain         adversarial training of the head (frozen backbone)
  ensemble-at      ensemble adversarial training with a static surrogate
  train-detector   train the latent-space post-hoc detector
  train-advhead    train the adversarial classification head
  ensemble-eval    evaluate defense strategies against an attack grid
  export-latents   dump latent vectors (and optional PCA projection) as CSV
  report           pretty-print a saved report CSV";

/// Run a CLI invocation; returns the process exit code (0 success,
/// 1 config/validation error, 2 I/O error).
pub fn run_cli<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let argv: Vec<String> = args.into_iter().collect();
    if argv.is_empty() || argv[0] == "--help" || argv[0] == "-h" {
        eprintln!("{USAGE}");
        return if argv.is_empty() { 1 } else { 0 };
    }
    let sub = argv[0].as_str();
    let config = match flag_value(&argv[1..], "--config") {
        Ok(p) => p,
        Err(msg) => {
            eprintln!("{msg}\n{USAGE}");
            return 1;
        }
    };
    let outcome = dispatch(sub, Path::new(&config));
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("advlab {sub}: {e}");
            match e {
                Error::Io(_) | Error::Format { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn flag_value(args: &[String], flag: &str) -> std::result::Result<String, String> {
    match args {
        [f, value] if f == flag => Ok(value.clone()),
        [f] if f == flag => Err(format!("{flag} needs a value")),
        [f, _, extra, ..] if f == flag => Err(format!("unexpected argument {extra:?}")),
        [other, ..] => Err(format!("unexpected argument {other:?}")),
        [] => Err(format!("missing {flag}")),
    }
}

fn dispatch(sub: &str, config: &Path) -> Result<()> {
    match sub {
        "train-backbone" => cmd_train_backbone(config),
        "train-head" => cmd_train_head(config),
        "attack" => cmd_attack(config),
        "transfer-matrix" => cmd_transfer(config),
        "advtrain" => cmd_advtrain(config),
        "ensemble-at" => cmd_ensemble_at(config),
        "train-detector" => cmd_train_detector(config),
        "train-advhead" => cmd_train_advhead(config),
        "ensemble-eval" => cmd_ensemble_eval(config),
        "export-latents" => cmd_export_latents(config),
        "report" => cmd_report(config),
        other => Err(Error::config(format!("unknown subcommand {other:?}"))),
    }
}

fn stamp(report: &mut EvaluationReport) {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    report.metadata.insert("generated_unix".into(), now.to_string());
}

fn build_model(spec: &ModelSpec) -> Result<ModelBundle> {
    match &spec.backbone {
        BackboneConfig::Vit(cfg) => build_vit(cfg, &spec.head, spec.seed, &spec.id),
        BackboneConfig::Conv(cfg) => build_convnet(cfg, &spec.head, spec.seed, &spec.id),
    }
}

fn cmd_train_backbone(config: &Path) -> Result<()> {
    let cfg: TrainBackboneConfig = read_config(config)?;
    let data = cfg.data.load()?;
    let model = build_model(&cfg.model)?;
    let (mut trained, curve) = train_supervised(&model, &data, &cfg.train)?;
    trained.set_frozen_backbone(cfg.freeze);
    let train_acc = accuracy(&trained, &data)?;
    save_checkpoint(&trained, &cfg.out)?;
    println!(
        "trained {} for {} epochs (final loss {:.4}, train accuracy {:.4}) -> {}",
        trained.id,
        curve.len(),
        curve.last().copied().unwrap_or(0.0),
        train_acc,
        cfg.out.display()
    );
    if let Some(report_path) = &cfg.report {
        let mut report =
            EvaluationReport::new(vec![trained.id.clone()], vec!["train".into()])?;
        report.set(0, 0, train_acc)?;
        stamp(&mut report);
        report.write_csv(report_path)?;
    }
    Ok(())
}

fn cmd_train_head(config: &Path) -> Result<()> {
    let cfg: TrainHeadConfig = read_config(config)?;
    let base = load_checkpoint(&cfg.checkpoint)?;
    let mut fresh = base.with_new_head(cfg.head.clone(), cfg.head_seed, &cfg.id)?;
    fresh.set_frozen_backbone(true);
    let data = cfg.data.load()?;
    let (trained, _) = train_supervised(&fresh, &data, &cfg.train)?;
    let train_acc = accuracy(&trained, &data)?;
    save_checkpoint(&trained, &cfg.out)?;
    println!(
        "retrained head of {} as {} (train accuracy {:.4}) -> {}",
        base.id,
        trained.id,
        train_acc,
        cfg.out.display()
    );
    if let Some(report_path) = &cfg.report {
        let mut report =
            EvaluationReport::new(vec![trained.id.clone()], vec!["train".into()])?;
        report.set(0, 0, train_acc)?;
        stamp(&mut report);
        report.write_csv(report_path)?;
    }
    Ok(())
}

fn cmd_attack(config: &Path) -> Result<()> {
    let cfg: AttackCmdConfig = read_config(config)?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let data = cfg.data.load()?;
    let batch = generate(&model, &data.images, &data.labels, &cfg.attack)?;
    save_adversarial_batch(&batch, &cfg.out_dir, &cfg.stem)?;
    let clean = accuracy(&model, &data)?;
    let robust = crate::attacks::robust_accuracy(&model, &batch)?;
    println!(
        "{} on {}: clean {:.4}, robust {:.4} -> {}/{}",
        cfg.attack.label(),
        model.id,
        clean,
        robust,
        cfg.out_dir.display(),
        cfg.stem
    );
    if let Some(report_path) = &cfg.report {
        let mut report = EvaluationReport::new(
            vec![model.id.clone()],
            vec!["clean".into(), cfg.attack.label()],
        )?;
        report.set(0, 0, clean)?;
        report.set(0, 1, robust)?;
        stamp(&mut report);
        report.write_csv(report_path)?;
    }
    Ok(())
}

fn cmd_transfer(config: &Path) -> Result<()> {
    let cfg: TransferCmdConfig = read_config(config)?;
    let models: Vec<ModelBundle> = cfg
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<_>>()?;
    let data = cfg.data.load()?;
    let mut report = transfer_matrix(&models, &data, &cfg.attack)?;
    stamp(&mut report);
    report.write_csv(&cfg.report)?;
    print!("{}", report.render());
    Ok(())
}

fn swap_head(
    model: &ModelBundle,
    head: &Option<crate::models::HeadConfig>,
    head_seed: u64,
    id: &str,
) -> Result<ModelBundle> {
    match head {
        Some(cfg) => model.with_new_head(cfg.clone(), head_seed, id),
        None => {
            let mut m = model.clone();
            m.id = id.to_string();
            Ok(m)
        }
    }
}

fn cmd_advtrain(config: &Path) -> Result<()> {
    let cfg: AdvTrainCmdConfig = read_config(config)?;
    let base = load_checkpoint(&cfg.checkpoint)?;
    let model = swap_head(&base, &cfg.head, cfg.head_seed, &cfg.id)?;
    let data = cfg.data.load()?;
    let (trained, stats) = adversarial_train_head(&model, &data, &cfg.config)?;
    save_checkpoint(&trained, &cfg.out)?;
    for (i, s) in stats.iter().enumerate() {
        println!(
            "epoch {:>2}: loss {:.4} clean {:.4} robust {:.4}",
            i + 1,
            s.loss,
            s.clean_accuracy,
            s.robust_accuracy
        );
    }
    if let Some(report_path) = &cfg.report {
        let rows: Vec<String> = (1..=stats.len()).map(|i| format!("epoch-{i}")).collect();
        let mut report =
            EvaluationReport::new(rows, vec!["clean".into(), "robust".into()])?;
        for (i, s) in stats.iter().enumerate() {
            report.set(i, 0, s.clean_accuracy)?;
            report.set(i, 1, s.robust_accuracy)?;
        }
        stamp(&mut report);
        report.write_csv(report_path)?;
    }
    Ok(())
}

fn cmd_ensemble_at(config: &Path) -> Result<()> {
    let cfg: EnsembleAtCmdConfig = read_config(config)?;
    let base = load_checkpoint(&cfg.checkpoint)?;
    let model = swap_head(&base, &cfg.head, cfg.head_seed, &cfg.id)?;
    let surrogate = load_checkpoint(&cfg.surrogate_checkpoint)?;
    let data = cfg.data.load()?;
    let trained = ensemble_adversarial_train_head(&model, &surrogate, &data, &cfg.config)?;
    let train_acc = accuracy(&trained, &data)?;
    save_checkpoint(&trained, &cfg.out)?;
    println!(
        "ensemble-at {} (surrogate {}) train accuracy {:.4} -> {}",
        trained.id,
        surrogate.id,
        train_acc,
        cfg.out.display()
    );
    Ok(())
}

fn cmd_train_detector(config: &Path) -> Result<()> {
    let cfg: TrainDetectorConfig = read_config(config)?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let clean = cfg.clean_data.load()?;
    let batch = load_adversarial_batch(&cfg.adv_batch.dir, &cfg.adv_batch.stem)?;
    let (probe, holdout) =
        train_posthoc_detector(&model, &clean.images, &batch.perturbed, &cfg.train)?;
    let strategy = format!("posthoc-{}", batch.config.label());
    save_latent_head(&probe, &model.id, "posthoc-detector", &strategy, &cfg.out)?;
    println!(
        "detector on {} ({}): holdout balanced accuracy {:.4} -> {}",
        model.id,
        batch.config.label(),
        holdout,
        cfg.out.display()
    );
    if let Some(report_path) = &cfg.report {
        let mut report = EvaluationReport::new(
            vec![strategy.clone()],
            vec!["holdout-balanced".into()],
        )?;
        report.set(0, 0, holdout)?;
        stamp(&mut report);
        report.write_csv(report_path)?;
    }
    Ok(())
}

fn cmd_train_advhead(config: &Path) -> Result<()> {
    let cfg: TrainAdvHeadConfig = read_config(config)?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let batch = load_adversarial_batch(&cfg.adv_batch.dir, &cfg.adv_batch.stem)?;
    let (probe, holdout) =
        train_adversarial_head(&model, &batch.perturbed, &batch.labels, &cfg.train)?;
    let strategy = format!("advhead-{}", batch.config.label());
    save_latent_head(&probe, &model.id, "adversarial-head", &strategy, &cfg.out)?;
    println!(
        "adversarial head on {} ({}): holdout accuracy {:.4} -> {}",
        model.id,
        batch.config.label(),
        holdout,
        cfg.out.display()
    );
    if let Some(report_path) = &cfg.report {
        let mut report =
            EvaluationReport::new(vec![strategy.clone()], vec!["holdout".into()])?;
        report.set(0, 0, holdout)?;
        stamp(&mut report);
        report.write_csv(report_path)?;
    }
    Ok(())
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_ensemble_eval(config: &Path) -> Result<()> {
    let cfg: EnsembleEvalConfig = read_config(config)?;
    let target = load_checkpoint(&cfg.target_checkpoint)?;
    let extra_models: Vec<ModelBundle> = cfg
        .models
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<_>>()?;
    let clean_head = LatentHead::from_bundle(&target);

    let mut ensembles: Vec<(String, SpecializedEnsemble)> = Vec::new();
    for det_path in &cfg.detectors {
        let (detector, det_backbone) = load_latent_head(det_path)?;
        if det_backbone != target.id {
            return Err(Error::config(format!(
                "detector {} was trained on backbone {det_backbone}, target is {}",
                det_path.display(),
                target.id
            )));
        }
        for head_path in &cfg.adv_heads {
            let (adv_head, head_backbone) = load_latent_head(head_path)?;
            if head_backbone != target.id {
                return Err(Error::config(format!(
                    "adversarial head {} was trained on backbone {head_backbone}, target is {}",
                    head_path.display(),
                    target.id
                )));
            }
            let name = format!("ens-{}-{}", stem_of(det_path), stem_of(head_path));
            let ensemble = SpecializedEnsemble::new(
                &target,
                detector.clone(),
                clean_head.clone(),
                adv_head,
                cfg.threshold,
            )?;
            ensembles.push((name, ensemble));
        }
    }

    let mut strategies: Vec<DefenseStrategy> = Vec::new();
    if cfg.include_no_defense {
        strategies.push(DefenseStrategy::Model {
            name: "no-defense".into(),
            model: &target,
        });
    }
    for m in &extra_models {
        strategies.push(DefenseStrategy::Model {
            name: m.id.clone(),
            model: m,
        });
    }
    for (name, ens) in &ensembles {
        strategies.push(DefenseStrategy::Ensemble {
            name: name.clone(),
            ensemble: ens,
            backbone: &target,
        });
    }

    let data = cfg.data.load()?;
    let mut report = crate::defenses::evaluate_defense_grid(
        &target,
        &strategies,
        &cfg.attacks,
        &data,
    )?;
    stamp(&mut report);
    report.write_csv(&cfg.report)?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_export_latents(config: &Path) -> Result<()> {
    let cfg: ExportLatentsConfig = read_config(config)?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let clean = cfg.clean_data.as_ref().map(|d| d.load()).transpose()?;
    let adv = cfg
        .adv_batch
        .as_ref()
        .map(|r| load_adversarial_batch(&r.dir, &r.stem))
        .transpose()?;
    let mut groups = Vec::new();
    if let Some(clean) = &clean {
        groups.push(LatentGroup {
            images: &clean.images,
            labels: &clean.labels,
            adversarial: false,
        });
    }
    if let Some(adv) = &adv {
        groups.push(LatentGroup {
            images: &adv.perturbed,
            labels: &adv.labels,
            adversarial: true,
        });
    }
    export_latents(&model, &groups, &cfg.out)?;
    println!("latents of {} -> {}", model.id, cfg.out.display());
    if cfg.pca {
        let matrix = crate::harness::latent::collect_latents(&model, &groups)?;
        let projection = pca_project(&matrix)?;
        if projection.degenerate {
            eprintln!("warning: latents have no variance; projection is all zeros");
        }
        let mut out = String::from("sample_id,pc1,pc2\n");
        for (i, row) in projection.coords.data().chunks_exact(2).enumerate() {
            out.push_str(&format!("{i},{},{}\n", row[0], row[1]));
        }
        let pca_path = cfg.out.with_extension("pca.csv");
        atomic_write(&pca_path, out.as_bytes())?;
        println!(
            "pca projection (explained {:.4}/{:.4}) -> {}",
            projection.explained[0],
            projection.explained[1],
            pca_path.display()
        );
    }
    Ok(())
}

fn cmd_report(config: &Path) -> Result<()> {
    let cfg: ReportCmdConfig = read_config(config)?;
    let text = std::fs::read_to_string(&cfg.csv)?;
    let report = EvaluationReport::from_csv(&text)?;
    print!("{}", report.render());
    Ok(())
}
