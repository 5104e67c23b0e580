//! Dataset selection shared by all commands.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use rvae_core::data::{load_cifar10_batch, load_idx, synthetic_blobs, Dataset, Split};
use rvae_core::rng::derive_seed;

use crate::error::{CliError, Result};

pub const DEFAULT_BLOB_COUNT: usize = 1024;
pub const DEFAULT_BLOB_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Mnist,
    Blobs,
    Cifar10,
}

/// Where the training and test images come from; stored in checkpoints so
/// later commands can reload the matching test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub kind: DataKind,
    pub dir: Option<PathBuf>,
    /// Cap on training images.
    pub limit: Option<usize>,
    /// Cap on test images.
    pub test_limit: Option<usize>,
    /// Side length of synthetic blob images.
    pub side: usize,
    /// Seed for synthetic data.
    pub seed: u64,
}

impl DataSpec {
    fn dir(&self) -> Result<&Path> {
        self.dir.as_deref().ok_or_else(|| CliError::Usage(format!("--data-dir is required for {:?} data", self.kind)))
    }

    pub fn load(&self, split: Split) -> Result<Dataset> {
        let cap = match split {
            Split::Train => self.limit,
            Split::Test => self.test_limit,
        };
        let ds = match self.kind {
            DataKind::Mnist => {
                let file = match split {
                    Split::Train => "train-images-idx3-ubyte",
                    Split::Test => "t10k-images-idx3-ubyte",
                };
                load_idx(self.dir()?.join(file))?
            }
            DataKind::Cifar10 => {
                let dir = self.dir()?;
                let files: Vec<PathBuf> = match split {
                    Split::Train => {
                        (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).filter(|p| p.exists()).collect()
                    }
                    Split::Test => vec![dir.join("test_batch.bin")],
                };
                if files.is_empty() {
                    return Err(CliError::Usage(format!("no data_batch_*.bin files in {}", dir.display())));
                }
                let mut images = Vec::new();
                for f in &files {
                    images.extend_from_slice(load_cifar10_batch(f)?.images());
                }
                Dataset::new("cifar10", split, images)?
            }
            DataKind::Blobs => {
                let (n, seed) = match split {
                    Split::Train => (self.limit.unwrap_or(DEFAULT_BLOB_COUNT), self.seed),
                    Split::Test => (self.test_limit.unwrap_or(DEFAULT_BLOB_COUNT / 4), derive_seed(self.seed, 1)),
                };
                let ds = synthetic_blobs(n, self.side, seed)?;
                return Ok(Dataset::new(ds.name().to_string(), split, ds.images().to_vec())?);
            }
        };
        match cap {
            Some(n) => Ok(ds.take(n)?),
            None => Ok(ds),
        }
    }
}
