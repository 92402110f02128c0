//! CIFAR-10 binary and MNIST IDX readers, plus deterministic batching.
//!
//! Pixels are kept as raw bytes and scaled by 1/255 when a batch is built.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

pub const CIFAR_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("corrupt record {record} in {path}: label byte {label}")]
    CorruptRecord { path: PathBuf, record: usize, label: u8 },
    #[error("inconsistent dataset: {0}")]
    Consistency(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
        })
    }
}

/// Labeled images of one split, stored as bytes in `[N, C, H, W]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub shuffle_seed: u64,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl DatasetSplit {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: SplitName,
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let image_len = channels * height * width;
        if image_len == 0 || pixels.len() != labels.len() * image_len {
            return Err(DataError::Consistency(format!(
                "{} pixel bytes for {} labels of {channels}x{height}x{width} images",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(DataError::Consistency(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Self {
            name,
            channels,
            height,
            width,
            num_classes,
            shuffle_seed: 0,
            pixels,
            labels,
        })
    }

    pub fn with_shuffle_seed(mut self, seed: u64) -> Self {
        self.shuffle_seed = seed;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().map(|&l| l as usize)
    }

    /// Image `i` as a `[C, H, W]` tensor in `[0, 1]`.
    pub fn image<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let table = byte_table::<T>();
        let data = self.image_bytes(i).iter().map(|&b| table[b as usize]).collect();
        Tensor::from_vec([self.channels, self.height, self.width], data).unwrap()
    }

    /// The whole split as a `[N, C, H, W]` tensor in `[0, 1]`.
    pub fn images<T: Scalar>(&self) -> Tensor<T> {
        let table = byte_table::<T>();
        let data = self.pixels.iter().map(|&b| table[b as usize]).collect();
        Tensor::from_vec([self.len(), self.channels, self.height, self.width], data).unwrap()
    }

    /// The first `n` examples (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Examples at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Self {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for l in self.labels() {
            counts[l] += 1;
        }
        counts
    }
}

fn byte_table<T: Scalar>() -> [T; 256] {
    std::array::from_fn(|b| T::from_f64(b as f64 / 255.0))
}

/// Decodes one CIFAR-10 batch file: records of one label byte followed by
/// the red, green and blue 32×32 planes.
pub fn parse_cifar10_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let expected = CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE;
    if bytes.len() != expected {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            detail: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let mut pixels = Vec::with_capacity(CIFAR_RECORDS_PER_FILE * (CIFAR_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(CIFAR_RECORDS_PER_FILE);
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = chunk[0];
        if label > 9 {
            return Err(DataError::CorruptRecord {
                path: path.to_path_buf(),
                record,
                label,
            });
        }
        labels.push(label);
        pixels.extend_from_slice(&chunk[1..]);
    }
    Ok((pixels, labels))
}

/// Loads `data_batch_1.bin` .. `data_batch_5.bin` as the training split and
/// `test_batch.bin` as validation.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(DatasetSplit, DatasetSplit)> {
    let dir = dir.as_ref();
    let load = |names: &[String], split: SplitName| -> Result<DatasetSplit> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for name in names {
            let path = dir.join(name);
            let (p, l) = parse_cifar10_batch(&read(&path)?, &path)?;
            pixels.extend(p);
            labels.extend(l);
        }
        DatasetSplit::new(split, 3, 32, 32, 10, pixels, labels)
    };
    let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let train = load(&train_files, SplitName::Train)?;
    let val = load(&["test_batch.bin".to_string()], SplitName::Val)?;
    Ok((train, val))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            detail: format!("file of {} bytes is shorter than its {need}-byte header", bytes.len()),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            detail: format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        });
    }
    let dims: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let payload: usize = dims.iter().product();
    if bytes.len() != need + payload {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            detail: format!(
                "header {dims:?} implies {} bytes, found {}",
                need + payload,
                bytes.len()
            ),
        });
    }
    Ok(dims)
}

/// Decodes an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let dims = header(bytes, path, MNIST_IMAGE_MAGIC, 3)?;
    Ok((dims[0], dims[1], dims[2], bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    header(bytes, path, MNIST_LABEL_MAGIC, 1)?;
    Ok(bytes[8..].to_vec())
}

fn mnist_file(dir: &Path, stem: &str, kind: &str) -> PathBuf {
    let dashed = dir.join(format!("{stem}-{kind}"));
    if dashed.exists() {
        return dashed;
    }
    let dotted = dir.join(format!("{stem}.{kind}"));
    if dotted.exists() {
        dotted
    } else {
        dashed
    }
}

fn load_mnist_pair(dir: &Path, prefix: &str, split: SplitName) -> Result<DatasetSplit> {
    let img_path = mnist_file(dir, &format!("{prefix}-images"), "idx3-ubyte");
    let lbl_path = mnist_file(dir, &format!("{prefix}-labels"), "idx1-ubyte");
    let (n, rows, cols, pixels) = parse_idx_images(&read(&img_path)?, &img_path)?;
    let labels = parse_idx_labels(&read(&lbl_path)?, &lbl_path)?;
    if labels.len() != n {
        return Err(DataError::Consistency(format!(
            "{} holds {n} images but {} holds {} labels",
            img_path.display(),
            lbl_path.display(),
            labels.len()
        )));
    }
    if let Some((record, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(DataError::CorruptRecord {
            path: lbl_path,
            record,
            label,
        });
    }
    DatasetSplit::new(split, 1, rows, cols, 10, pixels, labels)
}

/// Loads the `train-*` files as training split and `t10k-*` as validation.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(DatasetSplit, DatasetSplit)> {
    let dir = dir.as_ref();
    Ok((
        load_mnist_pair(dir, "train", SplitName::Train)?,
        load_mnist_pair(dir, "t10k", SplitName::Val)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentationConfig {
    pub random_crop: Option<usize>,
    pub enabled: bool,
}

impl AugmentationConfig {
    pub fn crop(size: usize) -> Self {
        Self {
            random_crop: Some(size),
            enabled: true,
        }
    }

    /// Crop edge when cropping is active.
    pub fn active_crop(&self) -> Option<usize> {
        self.random_crop.filter(|_| self.enabled)
    }

    /// Spatial size of the images that batches will carry.
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        match self.active_crop() {
            Some(c) => (c.min(height), c.min(width)),
            None => (height, width),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[B, C, H, W]` in `[0, 1]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// Positions of these examples in the split.
    pub indices: Vec<usize>,
    /// Top-left corner of each crop (zero without cropping).
    pub offsets: Vec<(usize, usize)>,
}

fn epoch_rng(shuffle_seed: u64, epoch_seed: u64) -> ChaCha8Rng {
    let mixed = shuffle_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29) ^ epoch_seed;
    ChaCha8Rng::seed_from_u64(mixed)
}

/// The order in which one epoch visits the split.
pub fn permutation(n: usize, shuffle_seed: u64, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(shuffle_seed, epoch_seed));
    order
}

fn crop_into<T: Scalar>(
    split: &DatasetSplit,
    index: usize,
    (oy, ox): (usize, usize),
    (h, w): (usize, usize),
    table: &[T; 256],
    out: &mut Vec<T>,
) {
    let src = split.image_bytes(index);
    for c in 0..split.channels {
        for y in 0..h {
            let row = c * split.height * split.width + (oy + y) * split.width + ox;
            out.extend(src[row..row + w].iter().map(|&b| table[b as usize]));
        }
    }
}

/// Training batches for one epoch: a permutation derived from
/// `(split.shuffle_seed, epoch_seed)`, the last partial batch kept, and a
/// uniformly random crop offset per image when cropping is enabled.
pub fn batches<'a, T: Scalar>(
    split: &'a DatasetSplit,
    batch_size: usize,
    epoch_seed: u64,
    aug: &AugmentationConfig,
) -> impl Iterator<Item = Batch<T>> + 'a {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut rng = epoch_rng(split.shuffle_seed, epoch_seed);
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut rng);
    let size = aug.output_size(split.height, split.width);
    let table = byte_table::<T>();
    let crop = aug.active_crop().is_some();
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |indices| {
        let offsets: Vec<(usize, usize)> = indices
            .iter()
            .map(|_| {
                if crop {
                    (
                        rng.random_range(0..=split.height - size.0),
                        rng.random_range(0..=split.width - size.1),
                    )
                } else {
                    (0, 0)
                }
            })
            .collect();
        assemble(split, indices, offsets, size, &table)
    })
}

/// Evaluation batches in storage order, center-cropped when cropping is enabled.
pub fn eval_batches<'a, T: Scalar>(
    split: &'a DatasetSplit,
    batch_size: usize,
    aug: &AugmentationConfig,
) -> impl Iterator<Item = Batch<T>> + 'a {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let size = aug.output_size(split.height, split.width);
    let center = ((split.height - size.0) / 2, (split.width - size.1) / 2);
    let table = byte_table::<T>();
    (0..split.len()).step_by(batch_size).map(move |start| {
        let indices: Vec<usize> = (start..(start + batch_size).min(split.len())).collect();
        let offsets = vec![center; indices.len()];
        assemble(split, indices, offsets, size, &table)
    })
}

fn assemble<T: Scalar>(
    split: &DatasetSplit,
    indices: Vec<usize>,
    offsets: Vec<(usize, usize)>,
    size: (usize, usize),
    table: &[T; 256],
) -> Batch<T> {
    let mut data = Vec::with_capacity(indices.len() * split.channels * size.0 * size.1);
    for (&i, &off) in indices.iter().zip(&offsets) {
        crop_into(split, i, off, size, table, &mut data);
    }
    let images = Tensor::from_vec([indices.len(), split.channels, size.0, size.1], data).unwrap();
    Batch {
        images,
        labels: indices.iter().map(|&i| split.label(i)).collect(),
        indices,
        offsets,
    }
}
