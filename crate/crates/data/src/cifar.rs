//! CIFAR-10 binary batches: each record is one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes of a 32x32 image.

use std::path::{Path, PathBuf};

use crate::{DataError, ImageSet, Normalization, Result};

pub const IMAGE_BYTES: usize = 3 * 32 * 32;
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
/// Records in each official batch file.
pub const RECORDS_PER_FILE: usize = 10_000;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Splits a batch into `(pixels, labels)`.
pub fn parse_batch(bytes: &[u8], what: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(DataError::PartialRecord {
            what: what.into(),
            len: bytes.len(),
            record: RECORD_BYTES,
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

pub fn encode_batch(pixels: &[u8], labels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != labels.len() * IMAGE_BYTES {
        return Err(DataError::CountMismatch {
            images: pixels.len() / IMAGE_BYTES,
            labels: labels.len(),
        });
    }
    let mut out = Vec::with_capacity(labels.len() * RECORD_BYTES);
    for (label, img) in labels.iter().zip(pixels.chunks_exact(IMAGE_BYTES)) {
        out.push(*label);
        out.extend_from_slice(img);
    }
    Ok(out)
}

/// Loads and concatenates batch files. With `records_per_file` set, each
/// file must hold exactly that many records.
pub fn load_cifar10(
    paths: &[PathBuf],
    records_per_file: Option<usize>,
    normalization: Normalization,
) -> Result<ImageSet> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        let what = path.display().to_string();
        let (p, l) = parse_batch(&bytes, &what)?;
        if let Some(expected) = records_per_file {
            if l.len() != expected {
                return Err(DataError::RecordCount {
                    what,
                    expected,
                    found: l.len(),
                });
            }
        }
        pixels.extend(p);
        labels.extend(l);
    }
    ImageSet::new([3, 32, 32], 10, pixels, labels, normalization)
}

/// Loads the train (five batches) or test split from `dir`, or from its
/// `cifar-10-batches-bin` subdirectory if present.
pub fn load_split(
    dir: &Path,
    train: bool,
    records_per_file: Option<usize>,
    normalization: Normalization,
) -> Result<ImageSet> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    };
    let paths: Vec<PathBuf> = if train {
        TRAIN_FILES.iter().map(|f| dir.join(f)).collect()
    } else {
        vec![dir.join(TEST_FILE)]
    };
    load_cifar10(&paths, records_per_file, normalization)
}
