//! Latent CSV export for external projection/visualization tools.

use crate::defenses::compute_latents;
use crate::diffcore::Tensor;
use crate::harness::tensor_io::atomic_write;
use crate::models::ModelBundle;
use crate::{Error, Result};
use std::path::Path;

/// One group of samples to export.
pub struct LatentGroup<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [u32],
    pub adversarial: bool,
}

/// Write one CSV row per sample: id, true label, adversarial flag, then the
/// full latent vector. Row order follows the groups; bytes are deterministic
/// for identical inputs.
pub fn export_latents(model: &ModelBundle, groups: &[LatentGroup], path: &Path) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::config("nothing to export"));
    }
    let width = model.latent_width();
    let mut out = String::from("sample_id,label,adversarial");
    for i in 0..width {
        out.push_str(&format!(",z{i}"));
    }
    out.push('\n');
    let mut sample_id = 0usize;
    for group in groups {
        if group.images.shape()[0] != group.labels.len() {
            return Err(Error::config(format!(
                "{} images but {} labels in export group",
                group.images.shape()[0],
                group.labels.len()
            )));
        }
        let latents = compute_latents(model, group.images)?;
        for (row, &label) in latents.data().chunks_exact(width).zip(group.labels) {
            out.push_str(&format!(
                "{sample_id},{label},{}",
                if group.adversarial { 1 } else { 0 }
            ));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
            sample_id += 1;
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Collect all latent rows of the groups into one matrix (input to PCA).
pub fn collect_latents(model: &ModelBundle, groups: &[LatentGroup]) -> Result<Tensor> {
    let width = model.latent_width();
    let mut rows = Vec::new();
    for group in groups {
        rows.extend_from_slice(compute_latents(model, group.images)?.data());
    }
    Tensor::new(vec![rows.len() / width, width], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::generate_synthetic;
    use crate::models::{build_vit, HeadConfig, ViTConfig};

    #[test]
    fn export_is_deterministic_with_partitioning_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            latent_layers: 2,
            classes: 3,
        };
        let m = build_vit(&cfg, &HeadConfig::linear(), 0, "m").unwrap();
        let clean = generate_synthetic(3, 2, [1, 8, 8], 1).unwrap();
        let adv = generate_synthetic(3, 2, [1, 8, 8], 2).unwrap();
        let groups = [
            LatentGroup {
                images: &clean.images,
                labels: &clean.labels,
                adversarial: false,
            },
            LatentGroup {
                images: &adv.images,
                labels: &adv.labels,
                adversarial: true,
            },
        ];
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        export_latents(&m, &groups, &p1).unwrap();
        export_latents(&m, &groups, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        assert_eq!(b1, std::fs::read(&p2).unwrap());

        let text = String::from_utf8(b1).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 12); // header + 12 samples
        let flags: Vec<&str> = lines[1..]
            .iter()
            .map(|l| l.split(',').nth(2).unwrap())
            .collect();
        assert_eq!(&flags[..6], &["0"; 6]);
        assert_eq!(&flags[6..], &["1"; 6]);
    }
}
