//! `FDCK` checkpoint container: named f32 tensors in a flat binary file.
//!
//! Layout (little-endian throughout):
//!   magic "FDCK" | version u32 | count u32
//!   per tensor: name_len u16 | name utf-8 | rank u8 | dims u32 × rank | f32 × numel
//! Tensors are written in lexicographic name order so files are reproducible.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::diffcore::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FDCK";
const VERSION: u32 = 1;

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "FDCK", reason: reason.into() }
}

pub fn save_checkpoint(path: &Path, params: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        if name.len() > u16::MAX as usize {
            return Err(format_err(format!("name too long: {name}")));
        }
        if t.rank() > u8::MAX as usize {
            return Err(format_err(format!("rank too large for {name}")));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Cursor { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| format_err("name is not utf-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32()? as f64);
        }
        let t = Tensor::new(shape, data, Precision::Standard32)
            .map_err(|e| format_err(format!("tensor {name}: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(format_err(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(format_err(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
