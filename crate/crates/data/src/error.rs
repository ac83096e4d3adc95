use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        what: String,
        expected: u32,
        found: u32,
    },
    #[error("{what}: truncated, expected {expected} bytes, found {found}")]
    Truncated {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{what}: {len} bytes is not a whole number of {record}-byte records")]
    PartialRecord {
        what: String,
        len: usize,
        record: usize,
    },
    #[error("{what}: expected {expected} records, found {found}")]
    RecordCount {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("label {label} at index {index} is outside 0..{classes}")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("pixel {value} at index {index} is outside [0, 1]")]
    PixelRange { index: usize, value: f64 },
    #[error("event {index} at ({x}, {y}) lies outside the {width}x{height} sensor")]
    Coordinate {
        index: usize,
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },
    #[error("timestamp {0} does not fit in 23 bits")]
    Timestamp(u32),
    #[error("number of time bins must be positive")]
    NoTimeBins,
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}
