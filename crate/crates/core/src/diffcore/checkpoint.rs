//! `SCK1` named-tensor checkpoints.
//!
//! Layout (little endian): magic `SCK1`, u32 version, u32 tensor count, then
//! per tensor: u32 name length, UTF-8 name, u32 rank, rank x u32 extents,
//! row-major f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::array::Array;
use crate::error::{Error, Result};
use crate::io::Reader;

pub const MAGIC: &[u8; 4] = b"SCK1";
pub const VERSION: u32 = 1;

pub fn encode_tensors(tensors: &BTreeMap<String, Array<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Array<f32>>> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.f32s(n)?;
        let t = Array::new(shape, data).map_err(|e| Error::TensorMismatch {
            name: name.clone(),
            detail: e.to_string(),
        })?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("checkpoint repeats tensor `{name}`")));
        }
    }
    r.finish()?;
    Ok(tensors)
}

pub fn save_tensors(path: &Path, tensors: &BTreeMap<String, Array<f32>>) -> Result<()> {
    fs::write(path, encode_tensors(tensors))?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Array<f32>>> {
    decode_tensors(&fs::read(path)?)
}
