//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "BEISNNCK" | version u32 | dtype tag u8
//! config: u32 length + TOML text
//! epoch u32 | best accuracy f64
//! parameters: u32 count, then records
//! adam: beta1 f64, beta2 f64, eps f64, clip flag u8 + f64, step u64,
//!       first-moment records, second-moment records (u32 count each)
//! rng: seed [u8; 32], stream u64, word position u128
//! ```
//!
//! A tensor record is `u32 name length, name, u32 rank, u64 dims..., values`.

use std::path::Path;

use backeisnn::network::ParamStore;
use backeisnn::optimizer::{AdamConfig, AdamState};
use backeisnn::{DType, Element, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::{CliError, RunConfig};

pub const MAGIC: &[u8; 8] = b"BEISNNCK";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    /// Completed training epochs.
    pub epoch: u32,
    pub best_accuracy: f64,
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    pub rng: RngState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn tensor<T: Element>(&mut self, name: &str, t: &Tensor<T>) {
        self.str(name);
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            v.write_le(&mut self.0);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                format!(
                    "truncated: wanted {n} bytes at offset {} of {}",
                    self.pos,
                    self.buf.len()
                )
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| format!("invalid UTF-8: {e}"))
    }
    fn tensor<T: Element>(&mut self) -> Result<(String, Tensor<T>), String> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let size = std::mem::size_of::<T>();
        let bytes = self.take(n.checked_mul(size).ok_or("tensor size overflows")?)?;
        let data = bytes.chunks_exact(size).map(T::read_le).collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| e.to_string())?;
        Ok((name, t))
    }
    fn tensors<T: Element>(&mut self) -> Result<Vec<(String, Tensor<T>)>, String> {
        let n = self.u32()?;
        (0..n).map(|_| self.tensor()).collect()
    }
}

fn dtype_of<T: Element>() -> DType {
    if std::mem::size_of::<T>() == 4 {
        DType::F32
    } else {
        DType::F64
    }
}

impl<T: Element> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.bytes(&[dtype_of::<T>().tag()]);
        w.str(&self.config.to_toml());
        w.u32(self.epoch);
        w.f64(self.best_accuracy);
        w.u32(self.params.len() as u32);
        for p in self.params.iter() {
            w.tensor(&p.name, &p.value);
        }
        let c = &self.adam.config;
        w.f64(c.beta1);
        w.f64(c.beta2);
        w.f64(c.eps);
        w.bytes(&[u8::from(c.clip_norm.is_some())]);
        w.f64(c.clip_norm.unwrap_or(0.0));
        w.u64(self.adam.t);
        for moments in [&self.adam.m, &self.adam.v] {
            w.u32(moments.len() as u32);
            for (p, m) in self.params.iter().zip(moments) {
                w.tensor(&p.name, m);
            }
        }
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err("not a checkpoint file (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| format!("unknown dtype tag {tag}"))?;
        if dtype != dtype_of::<T>() {
            return Err(format!(
                "checkpoint holds {dtype} values, expected {}",
                dtype_of::<T>()
            ));
        }
        let config = RunConfig::from_toml(&r.str()?).map_err(|e| e.to_string())?;
        let epoch = r.u32()?;
        let best_accuracy = r.f64()?;
        let mut params = ParamStore::default();
        for (name, t) in r.tensors()? {
            params.push(name, t);
        }
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let has_clip = r.u8()? != 0;
        let clip = r.f64()?;
        let t = r.u64()?;
        let mut moments = [Vec::new(), Vec::new()];
        for slot in &mut moments {
            let records = r.tensors::<T>()?;
            if records.len() != params.len() {
                return Err(format!(
                    "{} moment tensors for {} parameters",
                    records.len(),
                    params.len()
                ));
            }
            for ((name, m), p) in records.into_iter().zip(params.iter()) {
                if name != p.name || m.shape() != p.value.shape() {
                    return Err(format!(
                        "moment `{name}` does not match parameter `{}`",
                        p.name
                    ));
                }
                slot.push(m);
            }
        }
        let [m, v] = moments;
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            config,
            epoch,
            best_accuracy,
            params,
            adam: AdamState {
                config: AdamConfig {
                    beta1,
                    beta2,
                    eps,
                    clip_norm: has_clip.then_some(clip),
                },
                t,
                m,
                v,
            },
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| CliError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Reads only the dtype tag of a checkpoint file.
pub fn peek_dtype(path: &Path) -> Result<DType, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let err = |reason: &str| CliError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file (bad magic)"));
    }
    DType::from_tag(bytes[12]).ok_or_else(|| err("unknown dtype tag"))
}
