//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CWSLCKPT" | u32 version | 32-byte config hash | u64 epoch | u64 seed
//! u32 config length | config text (UTF-8)
//! u32 array count, then per array:
//!   u32 name length | name | u32 rank | u64 dims... | f32 values...
//! ```
//!
//! Arrays include batch-norm running statistics. The RNG state is the seed:
//! every random stream in training is derived from it and the epoch.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CWSLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Epoch (zero-based) whose parameters are stored.
    pub epoch: u64,
    pub seed: u64,
    /// Values rounded to f32, in store order.
    pub arrays: Vec<(String, Tensor)>,
}

fn round_f32(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

impl Checkpoint {
    pub fn from_store(config: &TrainConfig, epoch: u64, store: &ParamStore) -> Self {
        Checkpoint {
            config: config.clone(),
            epoch,
            seed: config.seed,
            arrays: store.entries().iter().map(|e| (e.name.clone(), round_f32(&e.tensor))).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_all(&self.config.hash())?;
        w.write_u64::<LE>(self.epoch)?;
        w.write_u64::<LE>(self.seed)?;
        let text = self.config.to_text();
        w.write_u32::<LE>(text.len() as u32)?;
        w.write_all(text.as_bytes())?;
        w.write_u32::<LE>(self.arrays.len() as u32)?;
        for (name, t) in &self.arrays {
            w.write_u32::<LE>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LE>(t.ndim() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LE>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f32::<LE>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let ck = Self::read(&mut r)?;
        if r.position() as usize != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last array".into()));
        }
        Ok(ck)
    }

    fn read<R: Read>(r: &mut R) -> Result<Self> {
        let trunc = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LE>().map_err(trunc)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash).map_err(trunc)?;
        let epoch = r.read_u64::<LE>().map_err(trunc)?;
        let seed = r.read_u64::<LE>().map_err(trunc)?;
        let text = read_string(r)?;
        let config = TrainConfig::from_text(&text)?;
        if config.hash() != hash {
            return Err(Error::ConfigHashMismatch);
        }
        let count = r.read_u32::<LE>().map_err(trunc)? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_string(r)?;
            let rank = r.read_u32::<LE>().map_err(trunc)? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("array {name:?} has rank {rank}")));
            }
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.read_u64::<LE>().map(|d| d as usize))
                .collect::<std::io::Result<_>>()
                .map_err(trunc)?;
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LE>(&mut data).map_err(trunc)?;
            arrays.push((name, Tensor::new(&shape, data.into_iter().map(f64::from).collect())?));
        }
        Ok(Checkpoint { config, epoch, seed, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails unless `config` describes the same architecture.
    pub fn check_matches(&self, config: &TrainConfig) -> Result<()> {
        if self.config.hash() != config.hash() {
            return Err(Error::ConfigHashMismatch);
        }
        Ok(())
    }
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let trunc = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
    let len = r.read_u32::<LE>().map_err(trunc)? as usize;
    if len > 1 << 24 {
        return Err(Error::Checkpoint(format!("string length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(trunc)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}
