//! Datasets: IDX loading, synthetic Gaussian clusters, mean subtraction,
//! IID partitioning and batch sampling.
//!
//! Every sample keeps the `id` it had in the dataset it was loaded or
//! generated into, so partitions can be checked for disjointness and
//! losslessness after shuffling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nn::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Noise standard deviation of the synthetic clusters.
pub const SYNTHETIC_NOISE_STD: f64 = 0.2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: bad magic number at byte offset {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        file: &'static str,
        offset: usize,
        expected: u32,
        found: u32,
    },
    #[error(
        "{file}: truncated at byte offset {offset}: need {needed} bytes, {available} available"
    )]
    Truncated {
        file: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("input dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("label {label} of sample {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },
    #[error("batch of {batch} requested from {available} samples")]
    BatchTooLarge { batch: usize, available: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Position in the originating dataset.
    pub id: usize,
    pub x: Tensor,
    pub y: usize,
}

/// An immutable labelled dataset with a fixed input width and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_count: usize,
    input_dim: usize,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        class_count: usize,
        input_dim: usize,
    ) -> Result<Self, DataError> {
        if class_count == 0 || input_dim == 0 {
            return Err(DataError::InvalidArgument(
                "class count and input dimension must be positive".into(),
            ));
        }
        for (index, s) in samples.iter().enumerate() {
            if s.x.len() != input_dim {
                return Err(DataError::DimMismatch {
                    expected: input_dim,
                    found: s.x.len(),
                });
            }
            if s.y >= class_count {
                return Err(DataError::LabelOutOfRange {
                    index,
                    label: s.y,
                    classes: class_count,
                });
            }
        }
        Ok(Self {
            samples,
            class_count,
            input_dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, index: usize) -> &Sample {
        &self.samples[index]
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

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.class_count];
        for s in &self.samples {
            hist[s.y] += 1;
        }
        hist
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            samples,
            class_count: self.class_count,
            input_dim: self.input_dim,
        }
    }

    /// The first `count` samples (all of them when `count` exceeds the length).
    pub fn truncated(&self, count: usize) -> Self {
        self.with_samples(self.samples.iter().take(count).cloned().collect())
    }

    /// Shuffles with `seed` and moves `held_out` samples into a second dataset.
    pub fn split_off(&self, held_out: usize, seed: u64) -> Result<(Dataset, Dataset), DataError> {
        if held_out >= self.len() {
            return Err(DataError::InvalidArgument(format!(
                "cannot hold out {held_out} of {} samples",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.samples[i].clone()).collect();
        let (rest, held) = order.split_at(self.len() - held_out);
        Ok((self.with_samples(pick(rest)), self.with_samples(pick(held))))
    }
}

/// Client datasets produced by [`partition_iid`].
#[derive(Debug, Clone)]
pub struct Partition {
    pub client_datasets: Vec<Dataset>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.client_datasets.iter().map(Dataset::len).collect()
    }

    pub fn total(&self) -> usize {
        self.client_datasets.iter().map(Dataset::len).sum()
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, file: &'static str) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            file,
            offset,
            needed: 4,
            available: bytes.len().saturating_sub(offset),
        })
}

fn check_magic(bytes: &[u8], expected: u32, file: &'static str) -> Result<(), DataError> {
    let found = read_be_u32(bytes, 0, file)?;
    if found != expected {
        return Err(DataError::BadMagic {
            file,
            offset: 0,
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses IDX image and label buffers. Pixels are scaled to `[0, 1]`; the
/// class count is one more than the largest label.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset, DataError> {
    check_magic(images, IDX_IMAGES_MAGIC, "images")?;
    check_magic(labels, IDX_LABELS_MAGIC, "labels")?;
    let image_count = read_be_u32(images, 4, "images")? as usize;
    let rows = read_be_u32(images, 8, "images")? as usize;
    let cols = read_be_u32(images, 12, "images")? as usize;
    let label_count = read_be_u32(labels, 4, "labels")? as usize;
    if image_count != label_count {
        return Err(DataError::CountMismatch {
            images: image_count,
            labels: label_count,
        });
    }
    let dim = rows * cols;
    if dim == 0 {
        return Err(DataError::InvalidArgument(
            "IDX images have zero pixels".into(),
        ));
    }
    let pixel_bytes = &images[16..];
    if pixel_bytes.len() < image_count * dim {
        return Err(DataError::Truncated {
            file: "images",
            offset: 16 + pixel_bytes.len(),
            needed: image_count * dim,
            available: pixel_bytes.len(),
        });
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < label_count {
        return Err(DataError::Truncated {
            file: "labels",
            offset: 8 + label_bytes.len(),
            needed: label_count,
            available: label_bytes.len(),
        });
    }
    let class_count = label_bytes[..label_count]
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(1);
    let samples = (0..image_count)
        .map(|i| {
            let pixels = pixel_bytes[i * dim..(i + 1) * dim]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect();
            Sample {
                id: i,
                x: Tensor::new(vec![dim], pixels).expect("pixel data is finite"),
                y: label_bytes[i] as usize,
            }
        })
        .collect();
    Dataset::new(samples, class_count, dim)
}

/// Loads an IDX image/label file pair.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset, DataError> {
    let read = |p: &Path| {
        fs::read(p).map_err(|source| DataError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    parse_idx(&read(images_path.as_ref())?, &read(labels_path.as_ref())?)
}

/// Encodes images in the IDX3 layout.
pub fn encode_idx_images(rows: u32, cols: u32, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * (rows * cols) as usize);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    for image in images {
        out.extend_from_slice(image);
    }
    out
}

/// Encodes labels in the IDX1 layout.
pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Mean of class `class` in the synthetic family: points on a circle in the
/// first two coordinates with adjacent means one unit apart (a line for
/// one-dimensional inputs).
fn synthetic_mean(class: usize, classes: usize, dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    if dim == 1 || classes < 3 {
        mean[0] = class as f64;
        return mean;
    }
    let angle = std::f64::consts::TAU * class as f64 / classes as f64;
    let radius = 0.5 / (std::f64::consts::PI / classes as f64).sin();
    mean[0] = radius * angle.cos();
    mean[1] = radius * angle.sin();
    mean
}

/// Gaussian clusters, `n_per_class` samples per class, shuffled by `seed`.
pub fn gen_synthetic(
    class_count: usize,
    input_dim: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if class_count == 0 || input_dim == 0 || n_per_class == 0 {
        return Err(DataError::InvalidArgument(format!(
            "synthetic data needs positive sizes, got classes={class_count} dim={input_dim} n={n_per_class}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(class_count * n_per_class);
    for class in 0..class_count {
        let mean = synthetic_mean(class, class_count, input_dim);
        for _ in 0..n_per_class {
            let x: Vec<f64> = mean
                .iter()
                .map(|m| m + SYNTHETIC_NOISE_STD * rng.sample::<f64, _>(StandardNormal))
                .collect();
            points.push((x, class));
        }
    }
    points.shuffle(&mut rng);
    let samples = points
        .into_iter()
        .enumerate()
        .map(|(id, (x, y))| Sample {
            id,
            x: Tensor::vector(x).expect("gaussian draws are finite"),
            y,
        })
        .collect();
    Dataset::new(samples, class_count, input_dim)
}

/// Subtracts the per-feature mean of `train` from `train` and every dataset
/// in `others`. Returns the transformed datasets and the mean.
pub fn subtract_mean(
    train: &Dataset,
    others: &[&Dataset],
) -> Result<(Dataset, Vec<Dataset>, Vec<f64>), DataError> {
    for other in others {
        if other.input_dim != train.input_dim {
            return Err(DataError::DimMismatch {
                expected: train.input_dim,
                found: other.input_dim,
            });
        }
    }
    let mut mean = vec![0.0; train.input_dim];
    for s in &train.samples {
        mean.iter_mut().zip(s.x.data()).for_each(|(m, v)| *m += v);
    }
    if !train.is_empty() {
        let n = train.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
    }
    let shift = |d: &Dataset| {
        let samples = d
            .samples
            .iter()
            .map(|s| {
                let mut x = s.x.clone();
                x.map_in_place(|i, v| v - mean[i]);
                Sample {
                    id: s.id,
                    x,
                    y: s.y,
                }
            })
            .collect();
        d.with_samples(samples)
    };
    let train_out = shift(train);
    let others_out = others.iter().map(|d| shift(d)).collect();
    Ok((train_out, others_out, mean))
}

/// Shuffles with `seed`, then deals contiguous shares; the first
/// `len % clients` clients get one extra sample.
pub fn partition_iid(d: &Dataset, clients: usize, seed: u64) -> Result<Partition, DataError> {
    if clients == 0 || clients > d.len() {
        return Err(DataError::TooManyClients {
            clients,
            samples: d.len(),
        });
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = d.len() / clients;
    let extra = d.len() % clients;
    let mut start = 0;
    let client_datasets = (0..clients)
        .map(|k| {
            let size = base + usize::from(k < extra);
            let share = order[start..start + size]
                .iter()
                .map(|&i| d.samples[i].clone())
                .collect();
            start += size;
            d.with_samples(share)
        })
        .collect();
    Ok(Partition { client_datasets })
}

/// Draws `batch_size` distinct sample indices uniformly at random.
pub fn sample_batch(
    d: &Dataset,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<usize>, DataError> {
    if batch_size > d.len() {
        return Err(DataError::BatchTooLarge {
            batch: batch_size,
            available: d.len(),
        });
    }
    Ok(rand::seq::index::sample(rng, d.len(), batch_size).into_vec())
}
