//! Checkpoint files: a config digest followed by a named-parameter table.
//!
//! Layout (little-endian): magic `VLAC`, version `u32`, config digest `u64`,
//! entry count `u64`, then per entry a `u32` name length, the UTF-8 name and
//! the tensor in `VLAT` form. Entries are written in name order.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{read_u32, read_u64, ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"VLAC";
const VERSION: u32 = 1;

pub fn checkpoint_bytes(config_digest: u64, params: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&config_digest.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        t.write_vlat(&mut buf).expect("vec write");
    }
    buf
}

pub fn write_checkpoint(path: &Path, config_digest: u64, params: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, checkpoint_bytes(config_digest, params)).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint, returning its config digest and parameters.
pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<(u64, ParamStore)> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let digest = read_u64(&mut r)?;
    let count = read_u64(&mut r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > r.len() {
            return Err(Error::Format("truncated parameter name".into()));
        }
        let (name, rest) = r.split_at(len);
        let name = std::str::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        r = rest;
        let t = Tensor::read_vlat(&mut r)?;
        params.insert(name, t);
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.len())));
    }
    Ok((digest, params))
}

/// Reads a checkpoint and verifies it was written for `expected_digest`.
pub fn read_checkpoint(path: &Path, expected_digest: Option<u64>) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (digest, params) = read_checkpoint_bytes(&bytes)?;
    if let Some(expected) = expected_digest {
        if digest != expected {
            return Err(Error::Compatibility(format!(
                "{} was written for config {digest:016x}, expected {expected:016x}",
                path.display()
            )));
        }
    }
    Ok(params)
}
