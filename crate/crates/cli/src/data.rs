//! Dataset access and batch assembly for a run.

use std::path::{Path, PathBuf};

use backeisnn::network::Encoding;
use backeisnn::{Element, SpikeBatch};
use backeisnn_data::augment::augment_cifar;
use backeisnn_data::encode::{collate, encode_bernoulli, encode_direct};
use backeisnn_data::nmnist::{bin_events, EventSet};
use backeisnn_data::{cifar, idx, ImageSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetId, RunConfig};
use crate::CliError;

/// Environment variable naming the dataset root when `--data-root` is absent.
pub const DATA_ROOT_ENV: &str = "BACKEISNN_DATA_ROOT";

/// Purposes for which per-item random streams are derived.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Purpose {
    TrainSample = 1,
    TestSample = 2,
    Dropout = 3,
}

/// Generator stream used for shuffling.
pub const SHUFFLE_STREAM: u64 = 2;

/// Independent generator for one `(purpose, epoch, item)` triple, so encoding
/// never depends on batch composition or processing order.
pub fn derived_rng(seed: u64, purpose: Purpose, epoch: u32, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 60) | (u64::from(epoch) << 32) | item as u64);
    rng
}

#[derive(Debug, Clone)]
pub enum Split {
    Images(ImageSet),
    Events(EventSet),
}

impl Split {
    pub fn len(&self) -> usize {
        match self {
            Split::Images(s) => s.len(),
            Split::Events(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, index: usize) -> usize {
        match self {
            Split::Images(s) => s.label(index),
            Split::Events(s) => s.label(index),
        }
    }

    fn limit(self, n: Option<usize>) -> Split {
        match (self, n) {
            (Split::Images(s), Some(n)) => Split::Images(s.take(n)),
            (Split::Events(s), Some(n)) => Split::Events(s.filter(|i| i < n)),
            (s, None) => s,
        }
    }

    /// Encodes samples `indices` into a `[T, B, ...]` batch.
    pub fn batch<T: Element>(
        &self,
        indices: &[usize],
        cfg: &RunConfig,
        train: bool,
        epoch: u32,
    ) -> Result<(SpikeBatch<T>, Vec<usize>), CliError> {
        let purpose = if train {
            Purpose::TrainSample
        } else {
            Purpose::TestSample
        };
        let mut sequences = Vec::with_capacity(indices.len());
        for &i in indices {
            let mut rng = derived_rng(cfg.seed, purpose, if train { epoch } else { 0 }, i);
            let seq = match self {
                Split::Images(set) => {
                    let mut sample = set.sample::<T>(i);
                    if train && cfg.augment {
                        sample = augment_cifar(&sample, &mut rng);
                    }
                    match cfg.encoding {
                        Encoding::Bernoulli => {
                            encode_bernoulli(&sample.pixels, cfg.time_steps, &mut rng)?
                        }
                        Encoding::Direct => encode_direct(&sample.pixels, cfg.time_steps)?,
                        Encoding::Event => {
                            return Err(CliError::Config(
                                "event encoding needs an event dataset".into(),
                            ))
                        }
                    }
                }
                Split::Events(set) => {
                    let binned = bin_events::<T>(&set.load(i)?, cfg.event_bins)?;
                    let per_step = binned.len() / cfg.event_bins;
                    let mut shape = binned.shape().to_vec();
                    shape[0] = cfg.time_steps;
                    let data = binned.data()[..cfg.time_steps * per_step].to_vec();
                    backeisnn::Tensor::from_vec(shape, data).expect("prefix of whole steps")
                }
            };
            sequences.push(seq);
        }
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        Ok((collate(&sequences)?, labels))
    }
}

#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Split,
    pub test: Split,
}

/// Resolves the dataset root: explicit flag, then config, then the
/// environment variable, then `./data`.
pub fn resolve_root(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data_root.clone())
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn load(cfg: &RunConfig, root: &Path) -> Result<DataSplits, CliError> {
    let dir = root.join(cfg.dataset.dir_name());
    let (train, test) = match cfg.dataset {
        DatasetId::Mnist | DatasetId::Fashion => (
            Split::Images(idx::load_split(&dir, true)?.with_normalization(cfg.normalization)?),
            Split::Images(idx::load_split(&dir, false)?.with_normalization(cfg.normalization)?),
        ),
        DatasetId::Cifar10 => (
            Split::Images(cifar::load_split(&dir, true, None, cfg.normalization)?),
            Split::Images(cifar::load_split(&dir, false, None, cfg.normalization)?),
        ),
        DatasetId::Nmnist => (
            Split::Events(EventSet::open(&dir.join("Train"))?),
            Split::Events(EventSet::open(&dir.join("Test"))?),
        ),
    };
    let train = train.limit(cfg.train_limit);
    let test = test.limit(cfg.test_limit);
    if train.is_empty() {
        return Err(CliError::Data(backeisnn_data::DataError::Invalid(format!(
            "no training samples under {}",
            dir.display()
        ))));
    }
    Ok(DataSplits { train, test })
}
