use backeisnn::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::{DataError, Result};

/// Mapping from stored bytes to network input values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Normalization {
    /// `byte / 255`, giving values in `[0, 1]`.
    #[default]
    Unit,
    /// `(byte / 255 - mean[c]) / std[c]` per channel.
    Channel { mean: [f64; 3], std: [f64; 3] },
}

impl Normalization {
    /// Commonly used CIFAR-10 training-set channel statistics.
    pub const CIFAR10: Normalization = Normalization::Channel {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2470, 0.2435, 0.2616],
    };

    pub fn apply(&self, byte: u8, channel: usize) -> f64 {
        let unit = f64::from(byte) / 255.0;
        match self {
            Normalization::Unit => unit,
            Normalization::Channel { mean, std } => (unit - mean[channel]) / std[channel],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if let Normalization::Channel { std, .. } = self {
            if channels > 3 {
                return Err(DataError::Invalid(format!(
                    "channel normalization supports at most 3 channels, images have {channels}"
                )));
            }
            if std[..channels].iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(DataError::Invalid(format!(
                    "normalization std {std:?} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// One image with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample<T> {
    /// `[C, H, W]`.
    pub pixels: Tensor<T>,
    pub label: usize,
}

/// A labelled image collection stored as raw bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    shape: [usize; 3],
    classes: usize,
    raw: Vec<u8>,
    labels: Vec<u8>,
    normalization: Normalization,
}

impl ImageSet {
    pub fn new(
        shape: [usize; 3],
        classes: usize,
        raw: Vec<u8>,
        labels: Vec<u8>,
        normalization: Normalization,
    ) -> Result<Self> {
        let size: usize = shape.iter().product();
        if size == 0 {
            return Err(DataError::Invalid(format!("empty image shape {shape:?}")));
        }
        if !raw.len().is_multiple_of(size) || raw.len() / size != labels.len() {
            return Err(DataError::CountMismatch {
                images: raw.len() / size,
                labels: labels.len(),
            });
        }
        if let Some((index, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| usize::from(l) >= classes)
        {
            return Err(DataError::Label {
                index,
                label: l.into(),
                classes,
            });
        }
        normalization.validate(shape[0])?;
        Ok(Self {
            shape,
            classes,
            raw,
            labels,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Result<Self> {
        normalization.validate(self.shape[0])?;
        self.normalization = normalization;
        Ok(self)
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index].into()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Stored bytes of image `index`, channel-major.
    pub fn raw(&self, index: usize) -> &[u8] {
        let size = self.sample_len();
        &self.raw[index * size..(index + 1) * size]
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample<T: Element>(&self, index: usize) -> ImageSample<T> {
        let plane = self.shape[1] * self.shape[2];
        let data = self
            .raw(index)
            .iter()
            .enumerate()
            .map(|(i, &b)| T::from_f64(self.normalization.apply(b, i / plane)))
            .collect();
        ImageSample {
            pixels: Tensor::from_vec(self.shape, data).expect("shape matches stored length"),
            label: self.label(index),
        }
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> ImageSet {
        let n = n.min(self.len());
        ImageSet {
            raw: self.raw[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    /// Concatenates two sets with identical shape and class count.
    pub fn concat(mut self, other: &ImageSet) -> Result<ImageSet> {
        if other.shape != self.shape || other.classes != self.classes {
            return Err(DataError::Invalid(format!(
                "cannot join {:?}/{} images with {:?}/{}",
                self.shape, self.classes, other.shape, other.classes
            )));
        }
        self.raw.extend_from_slice(&other.raw);
        self.labels.extend_from_slice(&other.labels);
        Ok(self)
    }

    fn clone_meta(&self) -> ImageSet {
        ImageSet {
            shape: self.shape,
            classes: self.classes,
            raw: Vec::new(),
            labels: Vec::new(),
            normalization: self.normalization,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_normalization_endpoints() {
        let set = ImageSet::new([1, 1, 2], 2, vec![0, 255], vec![1], Normalization::Unit).unwrap();
        let s = set.sample::<f64>(0);
        assert_eq!(s.pixels.data(), &[0.0, 1.0]);
        assert_eq!(s.label, 1);
    }

    #[test]
    fn channel_normalization_uses_the_channel_of_each_byte() {
        let norm = Normalization::Channel {
            mean: [0.0, 1.0, 0.5],
            std: [1.0, 0.5, 0.25],
        };
        let set = ImageSet::new([3, 1, 1], 10, vec![255, 255, 0], vec![0], norm).unwrap();
        assert_eq!(set.sample::<f64>(0).pixels.data(), &[1.0, 0.0, -2.0]);
    }

    #[test]
    fn rejects_bad_labels_and_counts() {
        assert!(matches!(
            ImageSet::new([1, 1, 1], 2, vec![0, 0], vec![0, 2], Normalization::Unit),
            Err(DataError::Label {
                index: 1,
                label: 2,
                ..
            })
        ));
        assert!(matches!(
            ImageSet::new([1, 1, 2], 2, vec![0, 0, 0], vec![0], Normalization::Unit),
            Err(DataError::CountMismatch { .. })
        ));
    }

    #[test]
    fn take_and_concat() {
        let set = ImageSet::new(
            [1, 1, 1],
            3,
            vec![1, 2, 3],
            vec![0, 1, 2],
            Normalization::Unit,
        )
        .unwrap();
        let head = set.take(2);
        assert_eq!(head.len(), 2);
        let joined = head.concat(&set.take(1)).unwrap();
        assert_eq!(joined.labels(), &[0, 1, 0]);
        assert_eq!(joined.raw(2), &[1]);
    }
}
