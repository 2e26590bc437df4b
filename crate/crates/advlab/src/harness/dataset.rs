//! Labelled image datasets: in-memory form, file-backed descriptors,
//! superclass reduction, balancing and synthetic generation.

use crate::diffcore::Tensor;
use crate::harness::tensor_io;
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// In-memory labelled dataset. Images are `[n, c, h, w]` with pixels in
/// `[0, 1]`; labels index `[0, classes)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u32>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::config(format!(
                "images must be [n, c, h, w], got shape {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::config(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        for &l in &labels {
            if l as usize >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]` of one sample.
    pub fn image_shape(&self) -> [usize; 3] {
        [
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        ]
    }

    fn sample_numel(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// Copy the selected samples into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<u32>) {
        let k = self.sample_numel();
        let mut data = Vec::with_capacity(indices.len() * k);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * k..(i + 1) * k]);
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("gather shape");
        (images, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }

    /// Deterministic split: every `1/holdout_every`-th sample goes to the
    /// second (held-out) part.
    pub fn split_holdout(&self, holdout_every: usize) -> (Dataset, Dataset) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for i in 0..self.len() {
            if holdout_every > 0 && i % holdout_every == holdout_every - 1 {
                held.push(i);
            } else {
                train.push(i);
            }
        }
        (self.subset(&train), self.subset(&held))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// File-backed dataset descriptor: tensor file + label file + metadata.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub classes: usize,
    pub split: String,
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        let images = tensor_io::load_tensor_file(&self.images)?;
        let labels = tensor_io::load_label_file(&self.labels)?;
        Dataset::new(images, labels, self.classes)
    }

    /// Persist `data` under `dir` with the given stem, returning a spec.
    pub fn save(dir: &Path, stem: &str, split: &str, data: &Dataset) -> Result<DatasetSpec> {
        std::fs::create_dir_all(dir)?;
        let images = dir.join(format!("{stem}.images.atns"));
        let labels = dir.join(format!("{stem}.labels.albl"));
        tensor_io::write_tensor_file(&images, &data.images)?;
        tensor_io::write_label_file(&labels, &data.labels)?;
        Ok(DatasetSpec {
            images,
            labels,
            classes: data.classes,
            split: split.to_string(),
        })
    }
}

/// Ordered superclass reduction map: name plus inclusive source-label ranges.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperclassMap {
    pub entries: Vec<SuperclassEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperclassEntry {
    pub name: String,
    /// Inclusive `[lo, hi]` source-label ranges.
    pub ranges: Vec<(u32, u32)>,
}

impl SuperclassMap {
    /// Validates that ranges are well-formed and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen: Vec<(u32, u32, &str)> = Vec::new();
        for e in &self.entries {
            for &(lo, hi) in &e.ranges {
                if lo > hi {
                    return Err(Error::config(format!(
                        "superclass {}: range {lo}..={hi} is inverted",
                        e.name
                    )));
                }
                for &(plo, phi, pname) in &seen {
                    if lo <= phi && plo <= hi {
                        return Err(Error::config(format!(
                            "superclass {} range {lo}..={hi} overlaps {pname} range {plo}..={phi}",
                            e.name
                        )));
                    }
                }
                seen.push((lo, hi, &e.name));
            }
        }
        Ok(())
    }

    /// Superclass index for a source label, if mapped.
    pub fn lookup(&self, label: u32) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.ranges.iter().any(|&(lo, hi)| label >= lo && label <= hi))
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    /// The 9-superclass reduction of a 1000-class label space used by the
    /// bundled example configs (dog, cat, frog, turtle, bird, primate, fish,
    /// crab, insect).
    pub fn reduced_imagenet() -> SuperclassMap {
        let entry = |name: &str, lo: u32, hi: u32| SuperclassEntry {
            name: name.to_string(),
            ranges: vec![(lo, hi)],
        };
        SuperclassMap {
            entries: vec![
                entry("Dog", 151, 268),
                entry("Cat", 281, 285),
                entry("Frog", 30, 32),
                entry("Turtle", 33, 37),
                entry("Bird", 80, 100),
                entry("Primate", 365, 382),
                entry("Fish", 389, 397),
                entry("Crab", 118, 121),
                entry("Insect", 300, 319),
            ],
        }
    }
}

/// Drop samples whose label the map does not cover and renumber the rest to
/// superclass indices.
pub fn remap_superclasses(data: &Dataset, map: &SuperclassMap) -> Result<Dataset> {
    map.validate()?;
    let mut keep = Vec::new();
    let mut new_labels = Vec::new();
    for (i, &l) in data.labels.iter().enumerate() {
        if let Some(sc) = map.lookup(l) {
            keep.push(i);
            new_labels.push(sc as u32);
        }
    }
    let (images, _) = data.gather(&keep);
    Dataset::new(images, new_labels, map.num_classes())
}

/// Uniformly downsample every class to the minimum class count.
pub fn balance_dataset(data: &Dataset, seed: u64) -> Result<Dataset> {
    let counts = data.class_counts();
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::config(format!("class {empty} has no samples")));
    }
    let target = *counts.iter().min().unwrap();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut selected = Vec::new();
    for class in 0..data.classes {
        let mut members: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels[i] as usize == class)
            .collect();
        members.shuffle(&mut rng);
        members.truncate(target);
        members.sort_unstable();
        selected.extend(members);
    }
    Ok(data.subset(&selected))
}

/// Class-conditional synthetic images: one oriented sinusoidal template per
/// class plus bounded per-sample noise. Learnable by a tiny model yet not
/// trivially constant.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<Dataset> {
    let [c, h, w] = shape;
    if classes == 0 || per_class == 0 {
        return Err(Error::config("classes and per_class must be >= 1"));
    }
    if c == 0 || h < 2 || w < 2 {
        return Err(Error::config(format!("degenerate image shape {shape:?}")));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    // Per-class template parameters depend only on the class index, so
    // datasets generated with different seeds describe the same task and
    // differ only in sampling noise. All classes share one spatial frequency
    // and differ in orientation (and a golden-ratio-scrambled phase): the
    // discriminative subspace is low-dimensional and shared, which keeps the
    // task linearly learnable while letting attacks transfer across
    // independently trained models. Amplitude sits close to the noise floor
    // so margins stay small enough for gradient attacks to matter.
    const FREQ: f32 = 2.0;
    const AMPLITUDE: f32 = 0.14;
    const NOISE: f32 = 0.15;
    const JITTER: f32 = 0.06;
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let angle = std::f32::consts::PI * (class as f32 + 0.5) / classes as f32;
        let phase = std::f32::consts::TAU * ((class as f32 * 0.618_034) % 1.0);
        for _ in 0..per_class {
            labels.push(class as u32);
            let jitter: f32 = rng.random::<f32>() * 2.0 * JITTER - JITTER;
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let u = i as f32 / h as f32;
                        let v = j as f32 / w as f32;
                        let t = FREQ * (angle.cos() * u + angle.sin() * v);
                        let base = 0.5
                            + AMPLITUDE
                                * (std::f32::consts::TAU * t + phase + 0.7 * ch as f32).sin();
                        let noise: f32 = rng.random::<f32>() * 2.0 * NOISE - NOISE;
                        data.push((base + jitter + noise).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(labels: &[u32], classes: usize) -> Dataset {
        let n = labels.len();
        let data: Vec<f32> = (0..n * 4).map(|i| (i % 7) as f32 / 10.0).collect();
        Dataset::new(
            Tensor::new(vec![n, 1, 2, 2], data).unwrap(),
            labels.to_vec(),
            classes,
        )
        .unwrap()
    }

    #[test]
    fn remap_drops_unmapped_and_renumbers() {
        let map = SuperclassMap::reduced_imagenet();
        // label 200 falls in Dog (151..=268); label 0 is unmapped.
        let data = tiny_dataset(&[200, 0, 283], 1000);
        let out = remap_superclasses(&data, &map).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.labels, vec![0, 1]); // Dog, Cat
        assert_eq!(out.classes, 9);
    }

    #[test]
    fn bundled_superclass_config_matches_builtin_map() {
        let json = include_str!("../../configs/superclasses_reduced.json");
        let parsed: SuperclassMap = serde_json::from_str(json).unwrap();
        parsed.validate().unwrap();
        let builtin = SuperclassMap::reduced_imagenet();
        assert_eq!(parsed.entries.len(), builtin.entries.len());
        for (a, b) in parsed.entries.iter().zip(&builtin.entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.ranges, b.ranges);
        }
    }

    #[test]
    fn identity_map_only_renumbers() {
        let map = SuperclassMap {
            entries: vec![
                SuperclassEntry {
                    name: "a".into(),
                    ranges: vec![(0, 0)],
                },
                SuperclassEntry {
                    name: "b".into(),
                    ranges: vec![(1, 1)],
                },
            ],
        };
        let data = tiny_dataset(&[1, 0, 1], 2);
        let out = remap_superclasses(&data, &map).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.labels, vec![1, 0, 1]);
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let map = SuperclassMap {
            entries: vec![
                SuperclassEntry {
                    name: "a".into(),
                    ranges: vec![(0, 5)],
                },
                SuperclassEntry {
                    name: "b".into(),
                    ranges: vec![(5, 9)],
                },
            ],
        };
        assert!(map.validate().is_err());
    }

    #[test]
    fn balance_downsamples_to_min_count() {
        let data = tiny_dataset(&[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2], 3);
        let out = balance_dataset(&data, 11).unwrap();
        assert_eq!(out.class_counts(), vec![7, 7, 7]);
    }

    #[test]
    fn balance_of_balanced_is_permutation() {
        let data = tiny_dataset(&[0, 1, 2, 0, 1, 2], 3);
        let out = balance_dataset(&data, 5).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out.class_counts(), vec![2, 2, 2]);
    }

    #[test]
    fn balance_rejects_empty_class() {
        let data = tiny_dataset(&[0, 0, 2], 3);
        assert!(balance_dataset(&data, 0).is_err());
    }

    #[test]
    fn remap_after_balance_preserves_uniform_counts() {
        let data = tiny_dataset(&[0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2], 3);
        let balanced = balance_dataset(&data, 3).unwrap();
        assert_eq!(balanced.class_counts(), vec![3, 3, 3]);
        let identity = SuperclassMap {
            entries: (0..3)
                .map(|c| SuperclassEntry {
                    name: format!("c{c}"),
                    ranges: vec![(c, c)],
                })
                .collect(),
        };
        let remapped = remap_superclasses(&balanced, &identity).unwrap();
        assert_eq!(remapped.class_counts(), vec![3, 3, 3]);
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = generate_synthetic(3, 5, [1, 8, 8], 42).unwrap();
        let b = generate_synthetic(3, 5, [1, 8, 8], 42).unwrap();
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synthetic_is_nearest_centroid_separable() {
        let train = generate_synthetic(9, 20, [3, 16, 16], 7).unwrap();
        let test = generate_synthetic(9, 10, [3, 16, 16], 8).unwrap();
        // class centroids from train
        let k = train.sample_numel();
        let mut centroids = vec![vec![0.0f64; k]; train.classes];
        let counts = train.class_counts();
        for i in 0..train.len() {
            let c = train.labels[i] as usize;
            for (j, &v) in train.images.data()[i * k..(i + 1) * k].iter().enumerate() {
                centroids[c][j] += v as f64;
            }
        }
        for (c, cent) in centroids.iter_mut().enumerate() {
            for v in cent.iter_mut() {
                *v /= counts[c] as f64;
            }
        }
        let mut correct = 0;
        for i in 0..test.len() {
            let img = &test.images.data()[i * k..(i + 1) * k];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d: f64 = img
                    .iter()
                    .zip(cent)
                    .map(|(&a, &b)| (a as f64 - b) * (a as f64 - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best == test.labels[i] as usize {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn dataset_spec_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(2, 3, [1, 4, 4], 1).unwrap();
        let spec = DatasetSpec::save(dir.path(), "toy", "train", &data).unwrap();
        let back = spec.load().unwrap();
        assert!(back.images.bit_eq(&data.images));
        assert_eq!(back.labels, data.labels);
    }
}
