//! Binary checkpoint format. All integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "MOTPCKPT"
//! version  u32      currently 1
//! meta     u64 length + UTF-8 bytes (free-form, JSON model config)
//! count    u64      number of parameters
//! repeated count times, in store order:
//!   name   u32 length + UTF-8 bytes
//!   ndim   u32, then ndim × u64 dimensions
//!   values product(dims) × f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so save/load is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nd::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOTPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, meta: &str, store: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for p in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
}

/// Returns the metadata string and the parameters in stored order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(String, ParamStore)> {
    let magic: [u8; 8] = read_array(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let meta = read_string(&mut r, meta_len)?;
    let count = read_u64(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| read_array::<8, _>(&mut r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        store.add(name, Tensor::new(shape, data)?)?;
    }
    Ok((meta, store))
}

pub fn save_checkpoint(path: impl AsRef<Path>, meta: &str, store: &ParamStore) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), meta, store)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(String, ParamStore)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
