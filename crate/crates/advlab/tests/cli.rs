//! End-to-end CLI flows on miniature configs: the full defense-evaluation
//! recipe, per-subcommand contracts, and exit codes.

use advlab::harness::cli::run_cli;
use advlab::harness::report::EvaluationReport;
use serde_json::json;
use std::path::Path;

fn run(args: &[String]) -> i32 {
    run_cli(args.iter().cloned())
}

fn write_cfg(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
}

fn synthetic(per_class: usize, seed: u64) -> serde_json::Value {
    json!({"source": "synthetic", "classes": 3, "per_class": per_class,
           "channels": 1, "image_size": 8, "seed": seed})
}

fn tiny_vit() -> serde_json::Value {
    json!({"arch": "vit", "image_size": 8, "patch_size": 4, "channels": 1,
           "embed_dim": 16, "depth": 2, "heads": 2, "mlp_ratio": 2.0,
           "latent_layers": 2, "classes": 3})
}

#[test]
fn full_defense_recipe_produces_expected_grid() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = |name: &str| root.join(name);

    // 1. pretrain + freeze the target backbone
    write_cfg(
        &cfg("train.json"),
        &json!({
            "model": {"id": "target", "backbone": tiny_vit(), "head": {"kind": "linear"}, "seed": 1},
            "data": synthetic(24, 100),
            "train": {"epochs": 12, "lr": 0.15, "batch_size": 8, "seed": 1},
            "freeze": true,
            "out": root.join("target.avlb")
        }),
    );
    assert_eq!(run(&["train-backbone".into(), "--config".into(), cfg("train.json").display().to_string()]), 0);

    // 2. surrogate head on the same backbone
    write_cfg(
        &cfg("surrogate.json"),
        &json!({
            "checkpoint": root.join("target.avlb"),
            "id": "surrogate",
            "head": {"kind": "linear"},
            "head_seed": 77,
            "data": synthetic(24, 100),
            "train": {"epochs": 12, "lr": 0.15, "batch_size": 8, "seed": 9},
            "out": root.join("surrogate.avlb")
        }),
    );
    assert_eq!(run(&["train-head".into(), "--config".into(), cfg("surrogate.json").display().to_string()]), 0);

    // 3. adversarial batch on the target (training data, for the probes)
    write_cfg(
        &cfg("atk-train.json"),
        &json!({
            "checkpoint": root.join("target.avlb"),
            "data": synthetic(24, 100),
            "attack": {"kind": "pgd", "epsilon": 0.2, "steps": 8, "step_size": 0.04, "seed": 3},
            "out_dir": root.join("adv"),
            "stem": "train-mid"
        }),
    );
    assert_eq!(run(&["attack".into(), "--config".into(), cfg("atk-train.json").display().to_string()]), 0);

    // 4. detector + adversarial head from that batch
    write_cfg(
        &cfg("det.json"),
        &json!({
            "checkpoint": root.join("target.avlb"),
            "clean_data": synthetic(24, 100),
            "adv_batch": {"dir": root.join("adv"), "stem": "train-mid"},
            "train": {"epochs": 20, "lr": 0.2, "batch_size": 8, "seed": 4},
            "out": root.join("detector.avlb")
        }),
    );
    assert_eq!(run(&["train-detector".into(), "--config".into(), cfg("det.json").display().to_string()]), 0);
    write_cfg(
        &cfg("advhead.json"),
        &json!({
            "checkpoint": root.join("target.avlb"),
            "adv_batch": {"dir": root.join("adv"), "stem": "train-mid"},
            "train": {"epochs": 20, "lr": 0.2, "batch_size": 8, "seed": 5},
            "out": root.join("advhead.avlb")
        }),
    );
    assert_eq!(run(&["train-advhead".into(), "--config".into(), cfg("advhead.json").display().to_string()]), 0);

    // 5. ensemble adversarial training against the surrogate pool
    write_cfg(
        &cfg("ensat.json"),
        &json!({
            "checkpoint": root.join("target.avlb"),
            "surrogate_checkpoint": root.join("surrogate.avlb"),
            "id": "ens-at",
            "data": synthetic(24, 100),
            "config": {
                "surrogate_id": "surrogate",
                "mix_probability": 0.6,
                "attack": {"kind": "pgd", "epsilon": 0.2, "steps": 8, "step_size": 0.04, "seed": 6},
                "epochs": 8, "lr": 0.15, "batch_size": 8, "seed": 7
            },
            "out": root.join("ens-at.avlb")
        }),
    );
    assert_eq!(run(&["ensemble-at".into(), "--config".into(), cfg("ensat.json").display().to_string()]), 0);

    // 6. grid: no-defense + ensemble-AT model + detector x advhead ensemble
    write_cfg(
        &cfg("eval.json"),
        &json!({
            "target_checkpoint": root.join("target.avlb"),
            "detectors": [root.join("detector.avlb")],
            "adv_heads": [root.join("advhead.avlb")],
            "models": [root.join("ens-at.avlb")],
            "attacks": [
                {"kind": "pgd", "epsilon": 0.2, "steps": 8, "step_size": 0.04, "seed": 8},
                {"kind": "fgsm", "epsilon": 0.2, "steps": 1, "step_size": 0.2, "random_start": false}
            ],
            "data": synthetic(8, 200),
            "report": root.join("grid.csv")
        }),
    );
    assert_eq!(run(&["ensemble-eval".into(), "--config".into(), cfg("eval.json").display().to_string()]), 0);

    let report = EvaluationReport::from_csv(&std::fs::read_to_string(root.join("grid.csv")).unwrap()).unwrap();
    // rows: no-defense, ens-at model, detector x advhead ensemble
    assert_eq!(report.row_labels().len(), 3);
    assert_eq!(report.row_labels()[0], "no-defense");
    // cols: clean + 2 attacks
    assert_eq!(report.col_labels(), &["clean", "pgd-0.2", "fgsm-0.2"]);
    for r in 0..3 {
        for c in 0..3 {
            assert!((0.0..=1.0).contains(&report.get(r, c)));
        }
    }

    // 7. latent export with PCA sidecar
    write_cfg(
        &cfg("latents.json"),
        &json!({
            "checkpoint": root.join("target.avlb"),
            "clean_data": synthetic(8, 200),
            "adv_batch": {"dir": root.join("adv"), "stem": "train-mid"},
            "out": root.join("latents.csv"),
            "pca": true
        }),
    );
    assert_eq!(run(&["export-latents".into(), "--config".into(), cfg("latents.json").display().to_string()]), 0);
    let latents = std::fs::read_to_string(root.join("latents.csv")).unwrap();
    assert_eq!(latents.lines().count(), 1 + 24 + 72); // header + clean + adv rows
    assert!(root.join("latents.pca.csv").exists());

    // 8. report pretty-printer accepts the grid
    write_cfg(&cfg("report.json"), &json!({"csv": root.join("grid.csv")}));
    assert_eq!(run(&["report".into(), "--config".into(), cfg("report.json").display().to_string()]), 0);
}

#[test]
fn zero_epsilon_attack_reports_clean_accuracy_as_robust() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_cfg(
        &root.join("train.json"),
        &json!({
            "model": {"id": "m", "backbone": tiny_vit(), "head": {"kind": "linear"}, "seed": 2},
            "data": synthetic(8, 31),
            "train": {"epochs": 4, "lr": 0.1, "batch_size": 8, "seed": 3},
            "out": root.join("m.avlb")
        }),
    );
    assert_eq!(run(&["train-backbone".into(), "--config".into(), root.join("train.json").display().to_string()]), 0);
    write_cfg(
        &root.join("atk.json"),
        &json!({
            "checkpoint": root.join("m.avlb"),
            "data": synthetic(6, 32),
            "attack": {"kind": "fgsm", "epsilon": 0.0, "steps": 1, "step_size": 1e-4, "random_start": false},
            "out_dir": root.join("adv"),
            "stem": "noop",
            "report": root.join("r.csv")
        }),
    );
    assert_eq!(run(&["attack".into(), "--config".into(), root.join("atk.json").display().to_string()]), 0);
    let report = EvaluationReport::from_csv(&std::fs::read_to_string(root.join("r.csv")).unwrap()).unwrap();
    assert_eq!(report.get(0, 0), report.get(0, 1), "clean and robust differ at ε=0");
}

#[test]
fn single_model_transfer_matrix_is_one_by_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_cfg(
        &root.join("train.json"),
        &json!({
            "model": {"id": "solo", "backbone": tiny_vit(), "head": {"kind": "linear"}, "seed": 5},
            "data": synthetic(8, 41),
            "train": {"epochs": 4, "lr": 0.1, "batch_size": 8, "seed": 6},
            "out": root.join("solo.avlb")
        }),
    );
    assert_eq!(run(&["train-backbone".into(), "--config".into(), root.join("train.json").display().to_string()]), 0);
    write_cfg(
        &root.join("tm.json"),
        &json!({
            "checkpoints": [root.join("solo.avlb")],
            "data": synthetic(4, 42),
            "attack": {"kind": "pgd", "epsilon": 0.1, "steps": 4, "step_size": 0.025, "seed": 2},
            "report": root.join("tm.csv")
        }),
    );
    assert_eq!(run(&["transfer-matrix".into(), "--config".into(), root.join("tm.json").display().to_string()]), 0);
    let report = EvaluationReport::from_csv(&std::fs::read_to_string(root.join("tm.csv")).unwrap()).unwrap();
    assert_eq!(report.row_labels(), &["solo"]);
    assert_eq!(report.col_labels(), &["solo"]);
}

#[test]
fn exit_codes_distinguish_config_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // unknown subcommand -> 1
    assert_eq!(run(&["frobnicate".into(), "--config".into(), "x.json".into()]), 1);

    // missing config file -> 2 (i/o)
    assert_eq!(
        run(&["attack".into(), "--config".into(), root.join("nope.json").display().to_string()]),
        2
    );

    // config with unknown key -> 1 (validation)
    let bad = root.join("bad.json");
    std::fs::write(&bad, br#"{"csv": "x.csv", "typo": 1}"#).unwrap();
    assert_eq!(run(&["report".into(), "--config".into(), bad.display().to_string()]), 1);

    // structurally valid config pointing at a corrupt checkpoint -> 2
    let ck = root.join("corrupt.avlb");
    std::fs::write(&ck, b"AVLBgarbage").unwrap();
    let atk = root.join("atk.json");
    write_cfg(
        &atk,
        &json!({
            "checkpoint": ck,
            "data": synthetic(2, 1),
            "attack": {"kind": "fgsm", "epsilon": 0.1, "steps": 1, "step_size": 0.1, "random_start": false},
            "out_dir": root.join("adv"),
            "stem": "x"
        }),
    );
    assert_eq!(run(&["attack".into(), "--config".into(), atk.display().to_string()]), 2);

    // invalid attack config (negative epsilon) -> 1
    let train = root.join("train.json");
    write_cfg(
        &train,
        &json!({
            "model": {"id": "m", "backbone": tiny_vit(), "head": {"kind": "linear"}, "seed": 1},
            "data": synthetic(4, 1),
            "train": {"epochs": 1, "lr": 0.1, "batch_size": 4, "seed": 1},
            "out": root.join("m.avlb")
        }),
    );
    assert_eq!(run(&["train-backbone".into(), "--config".into(), train.display().to_string()]), 0);
    let atk2 = root.join("atk2.json");
    write_cfg(
        &atk2,
        &json!({
            "checkpoint": root.join("m.avlb"),
            "data": synthetic(2, 2),
            "attack": {"kind": "pgd", "epsilon": -0.5, "steps": 2, "step_size": 0.1, "seed": 0},
            "out_dir": root.join("adv"),
            "stem": "y"
        }),
    );
    assert_eq!(run(&["attack".into(), "--config".into(), atk2.display().to_string()]), 1);
}
