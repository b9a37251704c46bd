//! "IGCK" tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"IGCK" | version: u32 | record*
//! record := name_len: u32 | name: utf-8 | rank: u32 | dims: u64 * rank | payload: f64 * prod(dims)
//! ```
//!
//! Records run to end of file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode<'a, I>(tensors: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>,
{
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, dims, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 4];
    read_exact(&mut bytes, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an IGCK checkpoint".into()));
    }
    let version = read_u32(&mut bytes)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut tensors = Vec::new();
    while !bytes.is_empty() {
        let name_len = read_u32(&mut bytes)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut bytes, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut bytes)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut bytes)? as usize);
        }
        let count: usize = dims.iter().product();
        if count.saturating_mul(8) > bytes.len() {
            return Err(Error::Format(format!("tensor {name}: truncated payload")));
        }
        let data = bytes[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        bytes = &bytes[count * 8..];
        tensors.push(Tensor { name, dims, data });
    }
    Ok(tensors)
}

/// Writes to a sibling temp file and renames over `path`, so a crash never
/// leaves a half-written checkpoint behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<Tensor>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

fn read_exact(bytes: &mut &[u8], out: &mut [u8]) -> Result<()> {
    if bytes.len() < out.len() {
        return Err(Error::Format("unexpected end of checkpoint".into()));
    }
    out.copy_from_slice(&bytes[..out.len()]);
    *bytes = &bytes[out.len()..];
    Ok(())
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(bytes, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(bytes: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(bytes, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
