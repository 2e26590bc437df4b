//! Binary tensor and label files.
//!
//! Tensor format: magic `ATNS`, u32 version (1), u32 rank, u32 dims[rank],
//! f32 little-endian payload. Label format: magic `ALBL`, u32 count,
//! u32 labels[count]. All integers little-endian. Writes go through a
//! temp-file-then-rename so readers never observe partial files.

use crate::diffcore::Tensor;
use crate::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const TENSOR_MAGIC: &[u8; 4] = b"ATNS";
pub const LABEL_MAGIC: &[u8; 4] = b"ALBL";
pub const TENSOR_VERSION: u32 = 1;
const MAX_RANK: u32 = 8;

/// Write `bytes` to `path` atomically (temp file + rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{ext}.tmp"),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(self.fail(format!(
                "truncated while reading {what} ({n} bytes needed, {} left)",
                self.bytes.len() - self.offset
            )));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_tensor_file(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + tensor.numel() * 4);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn load_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(4, "magic")?;
    if magic != TENSOR_MAGIC {
        r.offset = 0;
        return Err(r.fail(format!("bad magic {magic:?}, expected {TENSOR_MAGIC:?}")));
    }
    let version = r.u32("version")?;
    if version != TENSOR_VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let rank = r.u32("rank")?;
    if rank > MAX_RANK {
        return Err(r.fail(format!("rank {rank} exceeds maximum {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: usize = 1;
    for i in 0..rank {
        let d = r.u32(&format!("dim {i}"))? as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| r.fail(format!("dimension product overflows at dim {i}")))?;
        shape.push(d);
    }
    let remaining = bytes.len() - r.offset;
    if remaining != numel * 4 {
        return Err(r.fail(format!(
            "dims {shape:?} imply {numel} f32 values ({} bytes), payload has {remaining} bytes",
            numel * 4
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in bytes[r.offset..].chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Tensor::new(shape, data)
}

pub fn write_label_file(path: &Path, labels: &[u32]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len() * 4);
    buf.extend_from_slice(LABEL_MAGIC);
    buf.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn load_label_file(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(4, "magic")?;
    if magic != LABEL_MAGIC {
        r.offset = 0;
        return Err(r.fail(format!("bad magic {magic:?}, expected {LABEL_MAGIC:?}")));
    }
    let count = r.u32("count")? as usize;
    let remaining = bytes.len() - r.offset;
    if remaining != count * 4 {
        return Err(r.fail(format!(
            "count {count} implies {} bytes, payload has {remaining}",
            count * 4
        )));
    }
    Ok(bytes[r.offset..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
