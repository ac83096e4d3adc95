//! Dataset loaders and input pipelines for spiking networks.
//!
//! Static image sets (IDX and CIFAR-10 binary batches) are kept as raw bytes
//! and normalized on access. Event-camera samples (N-MNIST) are decoded from
//! 5-byte address-event records and binned into fixed-width time windows.

pub mod augment;
pub mod cifar;
pub mod encode;
mod error;
pub mod idx;
mod images;
pub mod nmnist;

pub use error::DataError;
pub use images::{ImageSample, ImageSet, Normalization};

pub type Result<T, E = DataError> = std::result::Result<T, E>;
