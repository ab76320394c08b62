//! IDX loading for MNIST-format datasets.
//!
//! Images: magic `0x00000803`, then big-endian `u32` count, rows, cols, then
//! one byte per pixel. Labels: magic `0x00000801`, count, one byte per label.
//! Pixels are scaled by 1/255 and each image is flattened row-major.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{AfmError, Result};
use crate::matrix::Matrix2D;
use crate::rng;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Matrix2D,
    pub labels: Vec<usize>,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(images: Matrix2D, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(AfmError::Consistency(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.images.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
        }
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            if l < NUM_CLASSES {
                h[l] += 1;
            }
        }
        h
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AfmError::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| AfmError::Length {
            path: path.to_path_buf(),
            detail: format!("header truncated at byte {offset}"),
        })
}

fn check_magic(found: u32, expected: u32, path: &Path) -> Result<()> {
    if found != expected {
        return Err(AfmError::Format {
            path: path.to_path_buf(),
            detail: format!("magic 0x{found:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

/// Reads an IDX image file into an `N × (rows·cols)` matrix in `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Matrix2D> {
    let bytes = read_file(path)?;
    check_magic(be_u32(&bytes, 0, path)?, IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let width = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * width {
        return Err(AfmError::Length {
            path: path.to_path_buf(),
            detail: format!("header declares {n} images of {rows}x{cols} ({} bytes), file holds {}", n * width, body.len()),
        });
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Matrix2D::from_vec(n, width, data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    check_magic(be_u32(&bytes, 0, path)?, LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(AfmError::Length {
            path: path.to_path_buf(),
            detail: format!("header declares {n} labels, file holds {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads a paired image/label IDX set.
pub fn load_idx(images_path: &Path, labels_path: &Path, name: &str) -> Result<LabeledDataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.rows() != labels.len() {
        return Err(AfmError::Consistency(format!(
            "{} has {} images but {} has {} labels",
            images_path.display(),
            images.rows(),
            labels_path.display(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(AfmError::Format {
            path: labels_path.to_path_buf(),
            detail: format!("label {bad} outside [0, {NUM_CLASSES})"),
        });
    }
    LabeledDataset::new(images, labels, name)
}

/// Standard file names inside a dataset directory.
#[derive(Debug, Clone)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl IdxPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels]
    }

    pub fn first_missing(&self) -> Option<&Path> {
        self.all().into_iter().find(|p| !p.exists())
    }
}

/// Seed-deterministic shuffled split; the first part holds
/// `round(fraction · N)` rows.
pub fn split(dataset: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(AfmError::Input(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng::stream(seed, rng::streams::SPLIT));
    let cut = (fraction * dataset.len() as f64).round() as usize;
    Ok((dataset.select(&idx[..cut]), dataset.select(&idx[cut..])))
}

pub fn write_idx_images(path: &Path, pixels: &[u8], count: usize, rows: usize, cols: usize) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| AfmError::io(path, e))?;
    let mut buf = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend_from_slice(pixels);
    f.write_all(&buf).map_err(|e| AfmError::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| AfmError::io(path, e))?;
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    f.write_all(&buf).map_err(|e| AfmError::io(path, e))
}
