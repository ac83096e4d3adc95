//! N-MNIST event streams.
//!
//! Each event is a 5-byte record: x, y, then a big-endian 24-bit word whose
//! top bit is the polarity and whose low 23 bits are the timestamp in µs.

use std::path::{Path, PathBuf};

use backeisnn::{Element, Tensor};

use crate::{DataError, Result};

pub const SENSOR: u16 = 34;
pub const RECORD_BYTES: usize = 5;
/// Length of the binned recording window.
pub const WINDOW_US: u64 = 300_000;
const MAX_TIMESTAMP: u32 = (1 << 23) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// `false` for OFF (0), `true` for ON (1).
    pub polarity: bool,
    pub timestamp: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventStream {
    /// Sorted by timestamp.
    pub events: Vec<Event>,
}

impl EventStream {
    /// Sorts events by timestamp (stable) and checks coordinates.
    pub fn new(mut events: Vec<Event>) -> Result<Self> {
        for (index, e) in events.iter().enumerate() {
            if e.x >= SENSOR || e.y >= SENSOR {
                return Err(DataError::Coordinate {
                    index,
                    x: e.x,
                    y: e.y,
                    width: SENSOR,
                    height: SENSOR,
                });
            }
        }
        events.sort_by_key(|e| e.timestamp);
        Ok(Self { events })
    }

    /// Span between the first and last event in µs.
    pub fn duration(&self) -> u32 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0,
        }
    }
}

pub fn decode(bytes: &[u8], what: &str) -> Result<EventStream> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(DataError::PartialRecord {
            what: what.into(),
            len: bytes.len(),
            record: RECORD_BYTES,
        });
    }
    let events = bytes
        .chunks_exact(RECORD_BYTES)
        .map(|r| Event {
            x: r[0].into(),
            y: r[1].into(),
            polarity: r[2] & 0x80 != 0,
            timestamp: (u32::from(r[2] & 0x7f) << 16) | (u32::from(r[3]) << 8) | u32::from(r[4]),
        })
        .collect();
    EventStream::new(events)
}

pub fn encode(events: &[Event]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(events.len() * RECORD_BYTES);
    for (index, e) in events.iter().enumerate() {
        if e.x > 255 || e.y > 255 {
            return Err(DataError::Coordinate {
                index,
                x: e.x,
                y: e.y,
                width: 256,
                height: 256,
            });
        }
        if e.timestamp > MAX_TIMESTAMP {
            return Err(DataError::Timestamp(e.timestamp));
        }
        let ts = e.timestamp;
        out.extend_from_slice(&[
            e.x as u8,
            e.y as u8,
            (u8::from(e.polarity) << 7) | (ts >> 16) as u8,
            (ts >> 8) as u8,
            ts as u8,
        ]);
    }
    Ok(out)
}

pub fn load_nmnist(path: &Path) -> Result<EventStream> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

/// Time bin of a timestamp when the window is split into `bins` equal
/// parts; timestamps past the window land in the last bin.
pub fn bin_index(timestamp: u32, bins: usize) -> usize {
    ((u64::from(timestamp) * bins as u64 / WINDOW_US) as usize).min(bins - 1)
}

/// Binary occupancy tensor `[bins, 2, 34, 34]`: a cell is 1 if at least one
/// event of that polarity hit that pixel during the bin.
pub fn bin_events<T: Element>(stream: &EventStream, bins: usize) -> Result<Tensor<T>> {
    if bins == 0 {
        return Err(DataError::NoTimeBins);
    }
    let s = usize::from(SENSOR);
    let mut data = vec![T::from_f64(0.0); bins * 2 * s * s];
    for e in &stream.events {
        let t = bin_index(e.timestamp, bins);
        data[((t * 2 + usize::from(e.polarity)) * s + usize::from(e.y)) * s + usize::from(e.x)] =
            T::from_f64(1.0);
    }
    Ok(Tensor::from_vec([bins, 2, s, s], data).expect("shape matches length"))
}

/// An N-MNIST split laid out as `<root>/<digit>/<sample>.bin`; samples are
/// read from disk on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSet {
    files: Vec<PathBuf>,
    labels: Vec<u8>,
}

impl EventSet {
    pub fn open(root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for digit in 0..10u8 {
            let dir = root.join(digit.to_string());
            let listing = std::fs::read_dir(&dir).map_err(|e| DataError::io(&dir, e))?;
            let mut files = Vec::new();
            for entry in listing {
                let path = entry.map_err(|e| DataError::io(&dir, e))?.path();
                if path.extension().is_some_and(|x| x == "bin") {
                    files.push(path);
                }
            }
            files.sort();
            entries.extend(files.into_iter().map(|f| (f, digit)));
        }
        let (files, labels) = entries.into_iter().unzip();
        Ok(Self { files, labels })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index].into()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn path(&self, index: usize) -> &Path {
        &self.files[index]
    }

    pub fn load(&self, index: usize) -> Result<EventStream> {
        load_nmnist(&self.files[index])
    }

    /// Keeps every sample for which `keep(index)` is true.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> EventSet {
        let (files, labels) = self
            .files
            .iter()
            .zip(&self.labels)
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, (f, l))| (f.clone(), *l))
            .unzip();
        EventSet { files, labels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codec_round_trip() {
        let e = Event {
            x: 1,
            y: 2,
            polarity: true,
            timestamp: 7,
        };
        let bytes = encode(&[e]).unwrap();
        assert_eq!(bytes, vec![1, 2, 0x80, 0, 7]);
        assert_eq!(decode(&bytes, "x").unwrap().events, vec![e]);
    }

    #[test]
    fn bad_lengths_and_coordinates() {
        assert!(matches!(
            decode(&[0; 7], "x"),
            Err(DataError::PartialRecord { len: 7, .. })
        ));
        assert!(matches!(
            decode(&[34, 0, 0, 0, 0], "x"),
            Err(DataError::Coordinate { x: 34, .. })
        ));
        assert!(decode(&[], "x").unwrap().events.is_empty());
    }

    #[test]
    fn bins_split_the_window_evenly() {
        assert_eq!(bin_index(2999, 100), 0);
        assert_eq!(bin_index(3000, 100), 1);
        assert_eq!(bin_index(299_999, 100), 99);
        assert_eq!(bin_index(400_000, 100), 99);
    }
}
