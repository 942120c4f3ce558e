//! Versioned binary checkpoints with a bit-exact round trip.
//!
//! Layout (all integers little-endian):
//!   magic `HMT1`
//!   u32 version (currently 1)
//!   u32 config length, then that many bytes of UTF-8 `key = value` text
//!   u32 tensor count
//!   per tensor: u16 name length, name bytes, u8 rank, rank × u32 dims,
//!               row-major f64 payload
//!   u64 rng seed, u64 rng counter, u64 step counter
//!
//! Optimizer moments ride along as tensors named `<param>.m1` / `<param>.m2`.

use std::fs;
use std::path::Path;

use crate::error::{HmtError, Result};
use crate::numerics::rng::RngState;

pub const MAGIC: &[u8; 4] = b"HMT1";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub rng: RngState,
    pub step: u64,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ckpt.version.to_le_bytes());
    let cfg = ckpt.config_text.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &ckpt.tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(HmtError::Contract(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        if shape.len() > u8::MAX as usize {
            return Err(HmtError::Contract(format!("tensor rank too high: {name}")));
        }
        buf.push(shape.len() as u8);
        for &dim in shape {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&ckpt.rng.seed().to_le_bytes());
    buf.extend_from_slice(&ckpt.rng.counter().to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(HmtError::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(HmtError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(HmtError::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_off = r.pos as u64;
    let cfg_bytes = r.take(cfg_len, "config text")?;
    let config_text = String::from_utf8(cfg_bytes.to_vec()).map_err(|e| HmtError::Format {
        offset: cfg_off,
        message: format!("config text is not UTF-8: {e}"),
    })?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name_off = r.pos as u64;
        let name_bytes = r.take(name_len, "tensor name")?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|e| HmtError::Format {
            offset: name_off,
            message: format!("tensor name is not UTF-8: {e}"),
        })?;
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, "tensor payload")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }

    let rng_seed = r.u64("rng seed")?;
    let rng_counter = r.u64("rng counter")?;
    let step = r.u64("step counter")?;
    if r.pos != buf.len() {
        return Err(HmtError::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes after checkpoint", buf.len() - r.pos),
        });
    }
    Ok(Checkpoint {
        version,
        config_text,
        tensors,
        rng: RngState::from_parts(rng_seed, rng_counter),
        step,
    })
}
