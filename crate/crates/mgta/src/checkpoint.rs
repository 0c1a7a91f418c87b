//! Binary parameter checkpoints.
//!
//! Layout: 4-byte magic `MGTA`, `u32` LE version, then one record per
//! parameter in name order: `u32` LE name length, UTF-8 name, dtype byte
//! (0 = f64), rank byte, `u64` LE dims, and the raw values as little-endian
//! f64. Writing the same store twice produces identical bytes.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MGTA";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

fn io_err(path: &Path, err: std::io::Error) -> Error {
    Error::data(format!("checkpoint {}: {err}", path.display()))
}

/// Serializes every parameter in the store.
pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for name in store.names() {
        let t = store.get(&name)?;
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(DTYPE_F64);
        let shape = t.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::config(format!("parameter {name} rank too large")));
        }
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::data(format!(
                "checkpoint {}: truncated at byte {}",
                self.path.display(),
                self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parses a checkpoint file into (name, tensor) pairs in file order.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| io_err(path, e))?;
    let mut cur = Cursor { buf: &buf, at: 0, path };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::data(format!(
            "checkpoint {}: bad magic, not a checkpoint file",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "checkpoint {}: version {version}, this build reads {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    while cur.at < buf.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| {
                Error::data(format!(
                    "checkpoint {}: parameter name is not UTF-8",
                    path.display()
                ))
            })?
            .to_string();
        let dtype = cur.byte()?;
        if dtype != DTYPE_F64 {
            return Err(Error::data(format!(
                "checkpoint {}: unknown dtype {dtype} for {name}",
                path.display()
            )));
        }
        let rank = cur.byte()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

/// Loads a checkpoint into a store whose parameter set must match the file
/// exactly (same names, same shapes).
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    let entries = read_checkpoint(path)?;
    let store_names = store.names();
    let file_names: Vec<&String> = entries.iter().map(|(n, _)| n).collect();
    for n in &store_names {
        if !file_names.iter().any(|f| *f == n) {
            return Err(Error::data(format!(
                "checkpoint {} lacks parameter {n}",
                path.display()
            )));
        }
    }
    for (name, tensor) in entries {
        if !store_names.contains(&name) {
            return Err(Error::data(format!(
                "checkpoint {} carries unknown parameter {name}",
                path.display()
            )));
        }
        if store.get(&name)?.shape() != tensor.shape() {
            return Err(Error::data(format!(
                "checkpoint {}: {name} has shape {:?}, the model expects {:?}",
                path.display(),
                tensor.shape(),
                store.get(&name)?.shape()
            )));
        }
        store.set(&name, tensor)?;
    }
    Ok(())
}

/// Loads the intersection of the file and the store by name; returns the
/// loaded names and the names left at their fresh initialization. A shape
/// mismatch on a shared name is still an error.
pub fn load_partial(path: &Path, store: &mut ParamStore) -> Result<(Vec<String>, Vec<String>)> {
    let entries = read_checkpoint(path)?;
    let mut loaded = Vec::new();
    let store_names = store.names();
    for (name, tensor) in entries {
        if !store_names.contains(&name) {
            continue;
        }
        if store.get(&name)?.shape() != tensor.shape() {
            return Err(Error::data(format!(
                "checkpoint {}: {name} has shape {:?}, the model expects {:?}",
                path.display(),
                tensor.shape(),
                store.get(&name)?.shape()
            )));
        }
        store.set(&name, tensor)?;
        loaded.push(name);
    }
    let fresh: Vec<String> = store_names
        .into_iter()
        .filter(|n| !loaded.contains(n))
        .collect();
    Ok((loaded, fresh))
}
