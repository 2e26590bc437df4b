//! Experiment plumbing: datasets, binary formats, reports, latent export,
//! PCA projection, and the CLI entry point.

pub mod cli;
pub mod dataset;
pub mod latent;
pub mod pca;
pub mod report;
pub mod runconfig;
pub mod tensor_io;

pub use dataset::{
    balance_dataset, generate_synthetic, remap_superclasses, Dataset, DatasetSpec, SuperclassMap,
};
pub use pca::{pca_project, PcaProjection};
pub use report::EvaluationReport;
pub use tensor_io::{load_label_file, load_tensor_file, write_label_file, write_tensor_file};
