//! Binary weight files.
//!
//! Layout, little-endian: magic `WWT1`, `u32` format version, `u32` entry
//! count, then per entry `u32` name length, UTF-8 name, `u32` rank, `u64`
//! extent per axis and `f32` data in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Result, WwtError};
use crate::model::WwtParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"WWT1";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &WwtParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(WwtError::Checkpoint(format!(
                "truncated at byte {} reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<WwtParams<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(WwtError::Checkpoint("not a WWT1 weight file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(WwtError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = r.u32("entry count")?;
    let mut params = WwtParams::from_map(Default::default());
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| WwtError::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        if params.contains(&name) {
            return Err(WwtError::Checkpoint(format!("duplicate entry '{name}'")));
        }
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(WwtError::Checkpoint(format!(
                "entry '{name}' has rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| WwtError::Checkpoint(format!("entry '{name}' is too large")))?;
        let raw = r.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(&name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(WwtError::Checkpoint(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &WwtParams<f32>) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| WwtError::io(path, e))
}

pub fn load(path: &Path) -> Result<WwtParams<f32>> {
    decode(&fs::read(path).map_err(|e| WwtError::io(path, e))?)
}
