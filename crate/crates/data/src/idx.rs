//! IDX files as used by MNIST and Fashion-MNIST.

use std::path::Path;

use crate::{DataError, ImageSet, Normalization, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Split file names shared by MNIST and Fashion-MNIST.
pub const TRAIN_FILES: (&str, &str) = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte");
pub const TEST_FILES: (&str, &str) = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DataError::Truncated {
            what: what.into(),
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(DataError::BadMagic {
            what: what.into(),
            expected,
            found,
        });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], header: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let expected = header + len;
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            what: what.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(&bytes[header..])
}

/// Parses an image file, returning `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8], what: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IMAGES_MAGIC, what)?;
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let pixels = body(bytes, 16, n * rows * cols, what)?;
    Ok((n, rows, cols, pixels.to_vec()))
}

pub fn parse_labels(bytes: &[u8], what: &str) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, what)?;
    let n = be_u32(bytes, 4, what)? as usize;
    Ok(body(bytes, 8, n, what)?.to_vec())
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| DataError::io(path, e))
}

/// Loads an image/label file pair as 10-class, `[0, 1]`-scaled samples.
pub fn load_idx(images: &Path, labels: &Path) -> Result<ImageSet> {
    let (n, rows, cols, pixels) = parse_images(&read(images)?, &images.display().to_string())?;
    let labels = parse_labels(&read(labels)?, &labels.display().to_string())?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    ImageSet::new([1, rows, cols], 10, pixels, labels, Normalization::Unit)
}

/// Loads the train or test split from a directory holding the standard
/// uncompressed file names.
pub fn load_split(dir: &Path, train: bool) -> Result<ImageSet> {
    let (images, labels) = if train { TRAIN_FILES } else { TEST_FILES };
    load_idx(&dir.join(images), &dir.join(labels))
}
