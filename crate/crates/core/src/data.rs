//! Image datasets: IDX and CIFAR-10 binary loaders, a synthetic generator,
//! and seeded minibatching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images sharing one shape `[C, H, W]`, with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
    shape: Vec<usize>,
    name: String,
    split: Split,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, images: Vec<Tensor>) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let shape = first.dims().to_vec();
        if shape.len() != 3 {
            return Err(Error::Contract(format!("images must be [C, H, W], got {shape:?}")));
        }
        for (i, img) in images.iter().enumerate() {
            if img.dims() != shape {
                return Err(Error::dim("dataset image", &shape, img.dims()));
            }
            if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Contract(format!("image {i} has value {v} outside [0, 1]")));
            }
        }
        Ok(Dataset { images, shape, name: name.into(), split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// The first `limit` images (all of them if `limit` is larger).
    pub fn take(&self, limit: usize) -> Result<Dataset> {
        Dataset::new(self.name.clone(), self.split, self.images.iter().take(limit).cloned().collect())
    }

    /// Stacks the selected images into `[B, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let picked: Vec<&Tensor> = indices
            .iter()
            .map(|&i| {
                self.images
                    .get(i)
                    .ok_or_else(|| Error::Contract(format!("index {i} out of range for {} images", self.len())))
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&picked)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn split_from_name(path: &Path) -> Split {
    let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
    if name.starts_with("t10k") || name.contains("test") {
        Split::Test
    } else {
        Split::Train
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads an IDX image file (magic 2051, dims `N × rows × cols`, u8 payload),
/// scaling pixels by `1/255`.
pub fn load_idx(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let length = |expected: usize| Error::Length { path: path.to_path_buf(), expected, found: bytes.len() };
    if bytes.len() < 16 {
        return Err(length(16));
    }
    let magic = be_u32(&bytes, 0);
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected IDX image magic 2051, found {magic}"),
        });
    }
    let (n, rows, cols) = (be_u32(&bytes, 4) as usize, be_u32(&bytes, 8) as usize, be_u32(&bytes, 12) as usize);
    let pixels = rows * cols;
    let expected = 16 + n * pixels;
    if bytes.len() < expected {
        return Err(length(expected));
    }
    let images = bytes[16..expected]
        .chunks_exact(pixels)
        .map(|px| Tensor::from_vec([1, rows, cols], px.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dataset_name(path), split_from_name(path), images)
}

/// Writes single-channel images as an IDX file with pixels `round(255·v)`.
pub fn write_idx(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [c, rows, cols] = dataset.shape()[..] else { unreachable!("dataset shape is rank 3") };
    if c != 1 {
        return Err(Error::Contract(format!("IDX export needs one channel, got {c}")));
    }
    let mut bytes = Vec::with_capacity(16 + dataset.len() * rows * cols);
    for word in [IDX_IMAGE_MAGIC, dataset.len() as u32, rows as u32, cols as u32] {
        bytes.extend_from_slice(&word.to_be_bytes());
    }
    for img in dataset.images() {
        bytes.extend(img.data().iter().map(|&v| to_byte(v)));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `round(255·v)` for `v ∈ [0, 1]`.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a CIFAR-10 binary batch (3073-byte records, label byte first),
/// discarding labels. Images are `[3, 32, 32]`.
pub fn load_cifar10_batch(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: (bytes.len() / CIFAR_RECORD).max(1) * CIFAR_RECORD,
            found: bytes.len(),
        });
    }
    let images = bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|rec| Tensor::from_vec([3, 32, 32], rec[1..].iter().map(|&b| b as f64 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dataset_name(path), split_from_name(path), images)
}

/// `n` single-channel `side × side` images, each a Gaussian bump with a
/// seeded random center and width, clipped to `[0, 1]`.
pub fn synthetic_blobs(n: usize, side: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if side < 4 {
        return Err(Error::Config(format!("blob images need side >= 4, got {side}")));
    }
    let mut rng = seeded(seed);
    let s = side as f64;
    let images = (0..n)
        .map(|_| {
            let (cy, cx) = (rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s));
            let width = rng.random_range(0.1 * s..0.25 * s);
            let amp = rng.random_range(0.7..1.2);
            let data = (0..side * side)
                .map(|i| {
                    let (y, x) = ((i / side) as f64 + 0.5, (i % side) as f64 + 0.5);
                    let r2 = (y - cy).powi(2) + (x - cx).powi(2);
                    (amp * (-r2 / (2.0 * width * width)).exp()).clamp(0.0, 1.0)
                })
                .collect();
            Tensor::from_vec([1, side, side], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(format!("blobs{side}"), Split::Train, images)
}

/// Index batches covering `0..len` after a seeded shuffle; the final batch
/// may be short.
pub fn batches(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seeded(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
