//! Desk-scale adversarial robustness laboratory.
//!
//! A self-contained stack for studying gradient-based evasion attacks and
//! frozen-backbone defenses on miniature image classifiers:
//!
//! - [`diffcore`] — reverse-mode automatic differentiation over dense f32
//!   tensors, with gradients w.r.t. both parameters and inputs.
//! - [`models`] — a tiny vision transformer with per-layer `[CLS]` tracing,
//!   a small residual conv net, classification heads, supervised training
//!   and checkpoint persistence.
//! - [`attacks`] — FGSM, PGD (L∞) and Carlini–Wagner (L2) white-box attacks,
//!   robust-accuracy evaluation and cross-model transfer matrices.
//! - [`defenses`] — adversarial training of the classification head,
//!   ensemble adversarial training with a static surrogate, and an ensemble
//!   of specialized heads routed by a latent-space detector.
//! - [`harness`] — datasets (synthetic and file-backed), binary tensor I/O,
//!   latent export, PCA projection, CSV reports and the experiment CLI.

pub mod attacks;
pub mod defenses;
pub mod diffcore;
pub mod harness;
pub mod models;

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the lab.
#[derive(Debug)]
pub enum Error {
    /// Two tensors fed to `op` have incompatible shapes.
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A primitive was applied with invalid attributes or arity.
    InvalidPrimitive { op: String, reason: String },
    /// A class label fell outside `[0, classes)`.
    LabelOutOfRange { label: u32, classes: usize },
    /// `backward` was asked to differentiate a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// A configuration constraint was violated.
    InvalidConfig(String),
    /// A binary file failed to parse; `offset` is the byte position.
    Format {
        path: String,
        offset: u64,
        reason: String,
    },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch, lhs={lhs:?} rhs={rhs:?}")
            }
            Error::InvalidPrimitive { op, reason } => write!(f, "{op}: {reason}"),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar root, got shape {shape:?}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Format {
                path,
                offset,
                reason,
            } => write!(f, "{path}: {reason} at byte {offset}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl Error {
    pub(crate) fn shape(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn primitive(op: &str, reason: impl Into<String>) -> Self {
        Error::InvalidPrimitive {
            op: op.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
