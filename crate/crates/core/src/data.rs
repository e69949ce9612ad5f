//! Labeled datasets: IDX loading, synthetic blobs, class removal and
//! zero-shot probe selection.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Probe,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Probe => "probe",
        })
    }
}

/// Sub-seed for a named pipeline stage, so one user seed drives every stage
/// without the stages sharing a random stream.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut z = seed ^ fnv1a64(stage.as_bytes());
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
    /// FNV-1a over the raw sample bytes followed by the label byte.
    pub hash: u64,
}

impl Sample {
    /// Builds a sample from raw bytes (used for hashing) and the decoded input.
    pub fn from_raw(raw: &[u8], input: Tensor, label: usize) -> Self {
        Self {
            input,
            label,
            hash: sample_hash(raw, label),
        }
    }

    /// Builds a sample whose raw bytes are the little-endian encoding of its values.
    pub fn from_tensor(input: Tensor, label: usize) -> Self {
        let raw: Vec<u8> = input.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::from_raw(&raw, input, label)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

pub fn sample_hash(raw: &[u8], label: usize) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let h = fnv1a64(raw);
    (h ^ (label as u8) as u64).wrapping_mul(PRIME)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    class_count: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, class_count: usize, split: Split) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::InvalidArgument("class count must be positive".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.label >= class_count) {
            return Err(Error::ClassOutOfRange {
                class: s.label,
                class_count,
            });
        }
        Ok(Self {
            samples,
            class_count,
            split,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn hashes(&self) -> BTreeSet<u64> {
        self.samples.iter().map(|s| s.hash).collect()
    }

    pub fn count_class(&self, class: usize) -> usize {
        self.samples.iter().filter(|s| s.label == class).count()
    }

    /// Keeps samples matching `keep`, preserving order.
    pub fn filter(&self, split: Split, keep: impl Fn(&Sample) -> bool) -> Self {
        Self {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            class_count: self.class_count,
            split,
        }
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        Self {
            samples: self.samples.iter().take(n).cloned().collect(),
            class_count: self.class_count,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn manifest(&self, sources: Vec<String>) -> DatasetManifest {
        DatasetManifest {
            sources,
            split: self.split,
            hashes: self.hashes().len(),
            class_count: self.class_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sources: Vec<String>,
    pub split: Split,
    pub hashes: usize,
    #[serde(rename = "N_c")]
    pub class_count: usize,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Loads an IDX image/label file pair. Images become `[1, rows, cols]`
/// tensors with pixels scaled to `[0, 1]`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    class_count: usize,
    split: Split,
) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic {
            path: images_path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let magic = be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxBadMagic {
            path: labels_path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_images = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(Error::IdxCountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let pixels = rows * cols;
    let expected = 16 + n_images * pixels;
    if images.len() < expected {
        return Err(Error::IdxTruncated {
            path: images_path.to_path_buf(),
            expected,
            found: images.len(),
        });
    }
    if labels.len() < 8 + n_labels {
        return Err(Error::IdxTruncated {
            path: labels_path.to_path_buf(),
            expected: 8 + n_labels,
            found: labels.len(),
        });
    }
    if pixels == 0 {
        return Err(Error::InvalidArgument(format!(
            "{}: zero-sized images",
            images_path.display()
        )));
    }

    let samples = (0..n_images)
        .map(|i| {
            let raw = &images[16 + i * pixels..16 + (i + 1) * pixels];
            let label = labels[8 + i] as usize;
            let input = Tensor::from_parts(
                vec![1, rows, cols],
                raw.iter().map(|&p| p as f64 / 255.0).collect(),
            );
            Sample::from_raw(raw, input, label)
        })
        .collect();
    LabeledDataset::new(samples, class_count, split)
}

/// Writes a dataset of `[1, rows, cols]` samples with pixels in `[0, 1]` as
/// an IDX image/label pair. Pixels are quantized to bytes.
pub fn write_idx(
    dataset: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let first = dataset.samples().first().ok_or(Error::EmptyDataset)?;
    let &[1, rows, cols] = first.input.shape() else {
        return Err(Error::InvalidArgument(format!(
            "idx export needs [1, rows, cols] samples, got {:?}",
            first.input.shape()
        )));
    };
    let mut images = Vec::with_capacity(16 + dataset.len() * rows * cols);
    images.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend((dataset.len() as u32).to_be_bytes());
    images.extend((rows as u32).to_be_bytes());
    images.extend((cols as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend(IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend((dataset.len() as u32).to_be_bytes());
    for s in dataset.samples() {
        if s.input.shape() != first.input.shape() {
            return Err(Error::InvalidArgument("idx export needs uniform shapes".into()));
        }
        images.extend(
            s.input
                .data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        labels.push(s.label as u8);
    }
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    std::fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Standard MNIST file names inside a data directory.
#[derive(Debug, Clone)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn exist(&self) -> bool {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
        .iter()
        .all(|p| p.is_file())
    }

    pub fn load_train(&self) -> Result<LabeledDataset> {
        load_idx(&self.train_images, &self.train_labels, 10, Split::Train)
    }

    pub fn load_test(&self) -> Result<LabeledDataset> {
        load_idx(&self.test_images, &self.test_labels, 10, Split::Test)
    }
}

/// D' = D without any sample of `class`; order is preserved.
pub fn remove_class(dataset: &LabeledDataset, class: usize) -> Result<LabeledDataset> {
    if class >= dataset.class_count() {
        return Err(Error::ClassOutOfRange {
            class,
            class_count: dataset.class_count(),
        });
    }
    Ok(dataset.filter(dataset.split(), |s| s.label != class))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub target_class: usize,
    pub sample_count: usize,
    pub seed: u64,
}

/// Selects `spec.sample_count` samples of the target class from a held-out
/// split under a seeded shuffle, and refuses any sample whose hash appears
/// in `training_fingerprint`.
pub fn make_probe_set(
    test_set: &LabeledDataset,
    spec: &ProbeSpec,
    training_fingerprint: &BTreeSet<u64>,
) -> Result<LabeledDataset> {
    if spec.target_class >= test_set.class_count() {
        return Err(Error::ClassOutOfRange {
            class: spec.target_class,
            class_count: test_set.class_count(),
        });
    }
    if spec.sample_count == 0 {
        return Err(Error::InvalidArgument("probe sample count must be >= 1".into()));
    }
    let mut candidates: Vec<&Sample> = test_set
        .samples()
        .iter()
        .filter(|s| s.label == spec.target_class)
        .collect();
    if candidates.len() < spec.sample_count {
        return Err(Error::InsufficientSamples {
            class: spec.target_class,
            requested: spec.sample_count,
            available: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    candidates.shuffle(&mut rng);
    let chosen: Vec<Sample> = candidates
        .into_iter()
        .take(spec.sample_count)
        .cloned()
        .collect();
    check_disjoint(&chosen, training_fingerprint)?;
    LabeledDataset::new(chosen, test_set.class_count(), Split::Probe)
}

/// Fails with `ZeroShotViolation` if any sample hash is in the fingerprint.
pub fn check_disjoint(samples: &[Sample], training_fingerprint: &BTreeSet<u64>) -> Result<()> {
    let overlap = samples
        .iter()
        .filter(|s| training_fingerprint.contains(&s.hash))
        .count();
    if overlap > 0 {
        return Err(Error::ZeroShotViolation { overlap });
    }
    Ok(())
}

/// Gaussian blobs with unit variance and class means `separation` apart
/// along distinct axes, labels interleaved.
pub fn synth_blobs(class_count: usize, per_class: usize, dimension: usize, seed: u64) -> LabeledDataset {
    synth_blobs_with_separation(class_count, per_class, dimension, seed, 10.0)
}

pub fn synth_blobs_with_separation(
    class_count: usize,
    per_class: usize,
    dimension: usize,
    seed: u64,
    separation: f64,
) -> LabeledDataset {
    assert!(class_count > 0 && per_class > 0 && dimension > 0, "counts must be positive");
    let means = blob_means(class_count, dimension, separation, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut samples = Vec::with_capacity(class_count * per_class);
    for _ in 0..per_class {
        for (class, mean) in means.iter().enumerate() {
            let x: Vec<f64> = mean.iter().map(|m| m + unit.sample(&mut rng)).collect();
            samples.push(Sample::from_tensor(
                Tensor::from_parts(vec![dimension], x),
                class,
            ));
        }
    }
    LabeledDataset::new(samples, class_count, Split::Train).expect("labels in range")
}

/// Class means: `±separation/√2` on one axis each while axes remain, so any two
/// means are at least `separation` apart; random directions beyond that.
pub fn blob_means(class_count: usize, dimension: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let scale = separation / std::f64::consts::SQRT_2;
    (0..class_count)
        .map(|c| {
            let mut m = vec![0.0; dimension];
            if c < 2 * dimension {
                m[c % dimension] = if c < dimension { scale } else { -scale };
            } else {
                for v in &mut m {
                    *v = unit.sample(&mut rng) * separation;
                }
            }
            m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let a = synth_blobs(2, 10, 4, 3);
        assert_eq!(a.len(), 20);
        assert_eq!(a.count_class(0), 10);
        assert_eq!(a.count_class(1), 10);
        assert_eq!(a, synth_blobs(2, 10, 4, 3));
        assert_ne!(a, synth_blobs(2, 10, 4, 4));
    }

    #[test]
    fn nearest_mean_separates_wide_blobs() {
        let d = synth_blobs(4, 50, 3, 8);
        let means = blob_means(4, 3, 10.0, 8);
        let correct = d
            .samples()
            .iter()
            .filter(|s| {
                let dist = |m: &Vec<f64>| -> f64 {
                    s.input.data().iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum()
                };
                let best = (0..4)
                    .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                    .unwrap();
                best == s.label
            })
            .count();
        assert_eq!(correct, d.len());
    }

    #[test]
    fn remove_class_properties() {
        let d = synth_blobs(3, 4, 2, 1);
        let r = remove_class(&d, 1).unwrap();
        assert_eq!(r.count_class(1), 0);
        assert_eq!(r.len() + d.count_class(1), d.len());
        assert_eq!(remove_class(&r, 1).unwrap(), r);
        assert!(remove_class(&d, 3).is_err());
        let labels: Vec<usize> = r.samples().iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 2, 0, 2, 0, 2, 0, 2]);
    }

    #[test]
    fn probe_selection_contract() {
        let test = synth_blobs(2, 8, 2, 5).with_split(Split::Test);
        let spec = ProbeSpec {
            target_class: 1,
            sample_count: 3,
            seed: 0,
        };
        let probe = make_probe_set(&test, &spec, &BTreeSet::new()).unwrap();
        assert_eq!(probe.len(), 3);
        assert!(probe.samples().iter().all(|s| s.label == 1));
        assert_eq!(probe.split(), Split::Probe);

        let too_many = ProbeSpec {
            sample_count: 9,
            ..spec
        };
        assert!(matches!(
            make_probe_set(&test, &too_many, &BTreeSet::new()),
            Err(Error::InsufficientSamples { available: 8, .. })
        ));

        let fingerprint = test.hashes();
        assert!(matches!(
            make_probe_set(&test, &spec, &fingerprint),
            Err(Error::ZeroShotViolation { overlap: 3 })
        ));
    }

    #[test]
    fn hash_depends_on_label() {
        assert_ne!(sample_hash(b"abc", 0), sample_hash(b"abc", 1));
        assert_eq!(sample_hash(b"abc", 1), sample_hash(b"abc", 1));
        // Reference FNV-1a 64 vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
