//! Datasets: IDX files (MNIST layout) and synthetic Gaussian blobs.

mod idx;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::RealTensor;

pub use idx::{
    encode_idx, load_idx_images, load_idx_labels, parse_idx, read_idx, write_idx, write_idx_f32, write_idx_images_u8,
    write_idx_labels, IdxData, IdxFile,
};

/// Labelled samples; `images` has the sample index as its leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar = f32> {
    images: RealTensor<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: RealTensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!("{} labels for images {:?}", labels.len(), images.shape())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Invalid(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn images(&self) -> &RealTensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// The samples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (RealTensor<T>, Vec<usize>) {
        (self.images.gather_rows(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Dataset { images: self.images.slice_rows(0, n), labels: self.labels[..n].to_vec(), num_classes: self.num_classes }
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset { images: self.images.cast(), labels: self.labels.clone(), num_classes: self.num_classes }
    }
}

/// Sample order for one epoch: a permutation determined by `(seed, epoch)`.
/// Uses streams `1 + epoch`, leaving stream 0 of the seed to initialization.
pub fn epoch_order(len: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Gaussian blobs: class `c` is centered at `spread * d_c`, where `d_c` is a
/// unit vector drawn from the seed, plus unit-variance noise. Samples are
/// interleaved by class, giving shape `(num_classes * per_class, dim)`.
pub fn synth_blobs<T: Scalar>(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset<T>> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::Invalid("blob counts must be positive".into()));
    }
    if !spread.is_finite() {
        return Err(Error::Invalid(format!("spread must be finite, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let d = loop {
            let d: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break d.into_iter().map(|v| spread * v / norm).collect::<Vec<f64>>();
            }
        };
        centers.push(d);
    }
    rng.set_stream(1);
    let n = num_classes * per_class;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        for &m in &centers[c] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            values.push(T::from_f64_lossy(m + noise));
        }
        labels.push(c);
    }
    Dataset::new(RealTensor::new(vec![n, dim], values)?, labels, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefixes(self) -> &'static [&'static str] {
        match self {
            Split::Train => &["train"],
            Split::Test => &["t10k", "test"],
        }
    }
}

fn find_file(dir: &Path, split: Split, kind: &str) -> Result<PathBuf> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if split.prefixes().iter().any(|p| name.starts_with(&format!("{p}-{kind}"))) {
            found.push(entry.path());
        }
    }
    found.sort();
    match found.len() {
        1 => Ok(found.pop().unwrap()),
        0 => Err(Error::Invalid(format!("{}: no {:?} {kind} file", dir.display(), split))),
        _ => Err(Error::Invalid(format!("{}: several {:?} {kind} files: {found:?}", dir.display(), split))),
    }
}

/// Loads one split from a directory holding `{train,t10k,test}-images*` and
/// `{train,t10k,test}-labels*` IDX files (optionally gzipped).
pub fn load_split<T: Scalar>(dir: &Path, split: Split, num_classes: usize) -> Result<Dataset<T>> {
    let images = load_idx_images(&find_file(dir, split, "images")?)?;
    let labels = load_idx_labels(&find_file(dir, split, "labels")?)?;
    Dataset::new(images, labels, num_classes)
}

/// Writes a dataset as `{prefix}-images.idx[.gz]` (float IDX) and
/// `{prefix}-labels.idx[.gz]`.
pub fn save_split<T: Scalar>(dir: &Path, prefix: &str, data: &Dataset<T>, gzip: bool) -> Result<()> {
    let ext = if gzip { "idx.gz" } else { "idx" };
    write_idx_f32(&dir.join(format!("{prefix}-images.{ext}")), data.images())?;
    write_idx_labels(&dir.join(format!("{prefix}-labels.{ext}")), data.labels())
}
