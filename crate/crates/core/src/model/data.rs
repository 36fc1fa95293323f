//! Labelled datasets, minibatches and dataset readers.
//!
//! MNIST is read from the standard big-endian IDX files and CIFAR-10 from
//! its binary batch files. Gaussian blobs stand in for either when no
//! download is available.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use super::ModelError;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// A minibatch: `B × input-shape` inputs and one class index per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Tensor,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self, ModelError> {
        if labels.is_empty() || inputs.shape().len() < 2 || inputs.shape()[0] != labels.len() {
            return Err(ModelError::BatchShape { inputs: inputs.shape().to_vec(), labels: labels.len() });
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// In-memory classification dataset. Features are kept as `f32` to halve
/// the footprint of the full MNIST training set; batches are `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_shape: Vec<usize>,
    num_classes: usize,
    features: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        input_shape: Vec<usize>,
        num_classes: usize,
        features: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self, DataError> {
        let width: usize = input_shape.iter().product();
        if width == 0 || features.len() != width * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature values for {} examples of shape {input_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(DataError::Invalid(format!("label {l} outside {num_classes} classes")));
        }
        Ok(Self { input_shape, num_classes, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn width(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn features_f64(&self, range: Range<usize>) -> Vec<f64> {
        let w = self.width();
        self.features[range.start * w..range.end * w].iter().map(|&v| v as f64).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch, ModelError> {
        let w = self.width();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend(self.features[i * w..(i + 1) * w].iter().map(|&v| v as f64));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.input_shape);
        let inputs = Tensor::new(shape, data)?;
        Batch::new(inputs, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let w = self.width();
        let mut features = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            features.extend_from_slice(&self.features[i * w..(i + 1) * w]);
        }
        Dataset {
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

const MNIST_MEAN: f32 = 0.1307;
const MNIST_STD: f32 = 0.3081;

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parse an IDX file of unsigned bytes, returning its dimensions and payload.
pub fn parse_idx_u8(bytes: &[u8], path: &str) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let bad = |msg: &str| DataError::Format { path: path.to_string(), msg: msg.to_string() };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("missing IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(bad("only unsigned-byte IDX data is supported"));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if rank == 0 || bytes.len() < header {
        return Err(bad("truncated IDX header"));
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(bad("IDX payload length does not match its dimensions"));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Load an MNIST split from `dir`, normalizing pixels to zero mean and unit
/// variance with the usual training-set statistics.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (dims, pixels) = parse_idx_u8(&read(&img_path)?, &img_path.display().to_string())?;
    let (ldims, labels) = parse_idx_u8(&read(&lbl_path)?, &lbl_path.display().to_string())?;
    if dims.len() != 3 || ldims.len() != 1 || dims[0] != ldims[0] {
        return Err(DataError::Format {
            path: img_path.display().to_string(),
            msg: format!("image dims {dims:?} do not match label dims {ldims:?}"),
        });
    }
    let features = pixels.iter().map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD).collect();
    Dataset::new(vec![1, dims[1], dims[2]], 10, features, labels)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Decode CIFAR-10 binary records (`label byte + 3072 channel-major pixels`).
pub fn parse_cifar10(bytes: &[u8], path: &str) -> Result<Dataset, DataError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::Format {
            path: path.to_string(),
            msg: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        for (c, plane) in rec[1..].chunks_exact(1024).enumerate() {
            features.extend(plane.iter().map(|&p| (p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]));
        }
    }
    Dataset::new(vec![3, 32, 32], 10, features, labels)
}

/// Load CIFAR-10 from the `cifar-10-batches-bin` layout.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut bytes = Vec::new();
    for f in &files {
        bytes.extend(read(&dir.join(f))?);
    }
    parse_cifar10(&bytes, &dir.display().to_string())
}

/// Class-conditional Gaussian blobs: each class has a random mean with
/// per-feature scale `separation`, examples add unit-variance noise.
/// Labels cycle through the classes, so every class is equally represented
/// whenever `count` is a multiple of `num_classes`.
pub fn gaussian_blobs(
    count: usize,
    input_shape: &[usize],
    num_classes: usize,
    separation: f32,
    seed: u64,
) -> Dataset {
    let width: usize = input_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f32>> = (0..num_classes)
        .map(|_| {
            (0..width)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    separation * z as f32
                })
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let labels: Vec<u8> = order.iter().map(|i| (i % num_classes) as u8).collect();
    let mut features = Vec::with_capacity(count * width);
    for &l in &labels {
        for m in &means[l as usize] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(m + z as f32);
        }
    }
    Dataset::new(input_shape.to_vec(), num_classes, features, labels)
        .expect("generated dataset is consistent")
}
