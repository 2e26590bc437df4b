//! Model persistence.
//!
//! Format: magic `AVLB`, u32 version (1), u32 config-blob length, UTF-8 JSON
//! config, then per-tensor records until end of file — u32 path length,
//! UTF-8 path, u32 rank, u32 dims, f32 little-endian data. All integers
//! little-endian regardless of host.

use crate::diffcore::{ParameterSet, Tensor};
use crate::harness::tensor_io::atomic_write;
use crate::models::{BackboneConfig, HeadConfig, ModelBundle, TrainMeta};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    id: String,
    backbone: BackboneConfig,
    head: HeadConfig,
    frozen_backbone: bool,
    meta: TrainMeta,
}

/// Serialize any config blob + parameter set in the checkpoint container.
pub(crate) fn write_container(path: &Path, blob: &[u8], params: &ParameterSet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    buf.extend_from_slice(blob);
    for (path, tensor) in params.iter() {
        buf.extend_from_slice(&(path.len() as u32).to_le_bytes());
        buf.extend_from_slice(path.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

pub fn save_checkpoint(model: &ModelBundle, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        id: model.id.clone(),
        backbone: model.backbone.clone(),
        head: model.head.clone(),
        frozen_backbone: model.frozen_backbone,
        meta: model.meta.clone(),
    };
    let blob = serde_json::to_vec(&meta)?;
    write_container(path, &blob, &model.params)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.offset == self.bytes.len()
    }
}

/// Parse the checkpoint container: (config blob, tensors, source path).
pub(crate) fn read_container(path: &Path) -> Result<(Vec<u8>, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor {
        bytes: &bytes,
        offset: 0,
        path: path.display().to_string(),
    };
    let magic = c.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        c.offset = 0;
        return Err(c.fail(format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}")));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(c.fail(format!("unsupported checkpoint version {version}")));
    }
    let blob_len = c.u32("config length")? as usize;
    let blob = c.take(blob_len, "config blob")?.to_vec();

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    while !c.done() {
        let path_len = c.u32("tensor path length")? as usize;
        let path_bytes = c.take(path_len, "tensor path")?;
        let tpath = std::str::from_utf8(path_bytes)
            .map_err(|_| c.fail("tensor path is not utf-8"))?
            .to_string();
        let rank = c.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(c.fail(format!("tensor {tpath} rank {rank} exceeds maximum 8")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for i in 0..rank {
            let d = c.u32(&format!("dim {i} of {tpath}"))? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| c.fail(format!("tensor {tpath} dimension overflow")))?;
            shape.push(d);
        }
        let data_bytes = c.take(numel * 4, &format!("data of {tpath}"))?;
        let data = data_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if tensors.insert(tpath.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(c.fail(format!("duplicate tensor {tpath}")));
        }
    }
    Ok((blob, tensors))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let (blob, tensors) = read_container(path)?;
    let fail = |reason: String| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        reason,
    };
    let meta: CheckpointMeta =
        serde_json::from_slice(&blob).map_err(|e| fail(format!("config blob: {e}")))?;
    meta.backbone.validate()?;
    meta.head.validate()?;

    // Structural check against what the configs imply.
    let mut expected: BTreeMap<String, Vec<usize>> =
        meta.backbone.param_shapes().into_iter().collect();
    expected.extend(meta.head.param_shapes(
        "head",
        meta.backbone.latent_width(),
        meta.backbone.classes(),
    ));
    for (p, shape) in &expected {
        match tensors.get(p) {
            None => return Err(fail(format!("missing tensor {p}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(fail(format!(
                    "tensor {p} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
        return Err(fail(format!("unexpected tensor {extra}")));
    }

    let mut params = ParameterSet::new();
    for (p, t) in tensors {
        params.insert(p, t);
    }
    let mut bundle = ModelBundle {
        id: meta.id,
        backbone: meta.backbone,
        head: meta.head,
        frozen_backbone: meta.frozen_backbone,
        params,
        meta: meta.meta,
    };
    bundle.set_frozen_backbone(bundle.frozen_backbone);
    Ok(bundle)
}
