//! JSON run configurations for the CLI. Unknown keys are rejected so typos
//! fail fast instead of silently running the wrong experiment.

use crate::attacks::AttackConfig;
use crate::defenses::{AdvTrainConfig, EnsembleATConfig};
use crate::harness::dataset::{generate_synthetic, Dataset};
use crate::harness::tensor_io;
use crate::models::{BackboneConfig, HeadConfig, TrainConfig};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Where an experiment's data comes from: generated on the fly or read from
/// tensor/label files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "source")]
pub enum DataSource {
    Synthetic {
        classes: usize,
        per_class: usize,
        channels: usize,
        image_size: usize,
        seed: u64,
    },
    Files {
        images: PathBuf,
        labels: PathBuf,
        classes: usize,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic {
                classes,
                per_class,
                channels,
                image_size,
                seed,
            } => generate_synthetic(*classes, *per_class, [*channels, *image_size, *image_size], *seed),
            DataSource::Files {
                images,
                labels,
                classes,
            } => {
                let images = tensor_io::load_tensor_file(images)?;
                let labels = tensor_io::load_label_file(labels)?;
                Dataset::new(images, labels, *classes)
            }
        }
    }
}

/// Architecture + identity of a model to build from scratch.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub id: String,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBackboneConfig {
    pub model: ModelSpec,
    pub data: DataSource,
    pub train: TrainConfig,
    /// Freeze the backbone in the saved checkpoint (the pretrain-then-freeze
    /// workflow); defaults to true.
    #[serde(default = "default_true")]
    pub freeze: bool,
    pub out: PathBuf,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHeadConfig {
    pub checkpoint: PathBuf,
    pub id: String,
    pub head: HeadConfig,
    pub head_seed: u64,
    pub data: DataSource,
    pub train: TrainConfig,
    pub out: PathBuf,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackCmdConfig {
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub attack: AttackConfig,
    pub out_dir: PathBuf,
    pub stem: String,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferCmdConfig {
    pub checkpoints: Vec<PathBuf>,
    pub data: DataSource,
    pub attack: AttackConfig,
    pub report: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvTrainCmdConfig {
    pub checkpoint: PathBuf,
    pub id: String,
    /// When set, the checkpoint's head is replaced with a freshly
    /// initialized one of this shape before training (robust head training
    /// wants the MLP preset, not the pretrained linear head).
    #[serde(default)]
    pub head: Option<HeadConfig>,
    #[serde(default)]
    pub head_seed: u64,
    pub data: DataSource,
    pub config: AdvTrainConfig,
    pub out: PathBuf,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleAtCmdConfig {
    pub checkpoint: PathBuf,
    pub surrogate_checkpoint: PathBuf,
    pub id: String,
    /// Optional fresh head, as in [`AdvTrainCmdConfig::head`].
    #[serde(default)]
    pub head: Option<HeadConfig>,
    #[serde(default)]
    pub head_seed: u64,
    pub data: DataSource,
    pub config: EnsembleATConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvBatchRef {
    pub dir: PathBuf,
    pub stem: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDetectorConfig {
    pub checkpoint: PathBuf,
    pub clean_data: DataSource,
    pub adv_batch: AdvBatchRef,
    pub train: TrainConfig,
    pub out: PathBuf,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainAdvHeadConfig {
    pub checkpoint: PathBuf,
    pub adv_batch: AdvBatchRef,
    pub train: TrainConfig,
    pub out: PathBuf,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleEvalConfig {
    /// The undefended target model; evaluation attacks are crafted on it and
    /// its head doubles as the ensembles' clean head.
    pub target_checkpoint: PathBuf,
    /// Detector artifacts; crossed with `adv_heads` to form ensembles.
    #[serde(default)]
    pub detectors: Vec<PathBuf>,
    #[serde(default)]
    pub adv_heads: Vec<PathBuf>,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
    /// Extra whole-model strategies (e.g. ensemble-AT checkpoints).
    #[serde(default)]
    pub models: Vec<PathBuf>,
    #[serde(default = "default_true")]
    pub include_no_defense: bool,
    pub attacks: Vec<AttackConfig>,
    pub data: DataSource,
    pub report: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportLatentsConfig {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub clean_data: Option<DataSource>,
    #[serde(default)]
    pub adv_batch: Option<AdvBatchRef>,
    pub out: PathBuf,
    /// Also write `<out>.pca.csv` with 2-D projections.
    #[serde(default)]
    pub pca: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportCmdConfig {
    pub csv: PathBuf,
}

fn default_true() -> bool {
    true
}

fn default_threshold() -> f32 {
    0.5
}

/// Parse a JSON run config, rejecting unknown keys.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{"source":"synthetic","classes":3,"per_class":4,"channels":1,"image_size":8,"seed":1,"typo":5}"#;
        let parsed: std::result::Result<DataSource, _> = serde_json::from_str(json);
        assert!(parsed.is_err());
    }

    #[test]
    fn synthetic_source_loads() {
        let src = DataSource::Synthetic {
            classes: 3,
            per_class: 2,
            channels: 1,
            image_size: 8,
            seed: 4,
        };
        let data = src.load().unwrap();
        assert_eq!(data.len(), 6);
        assert_eq!(data.image_shape(), [1, 8, 8]);
    }
}
