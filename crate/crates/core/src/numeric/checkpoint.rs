//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "MBSRCKPT"
//! version   u8       currently 1
//! n_meta    u32      then n_meta × (u32 len, utf8 key, u32 len, utf8 value)
//! n_tensors u32      then per tensor:
//!   u32 len, utf8 name
//!   u32 ndim, ndim × u64 dims
//!   u32 n_frozen, n_frozen × u64 frozen row index
//!   numel × f64 values
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MBSRCKPT";
pub const VERSION: u8 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes()).map_err(io_err)
}

pub fn write_checkpoint(w: &mut impl Write, params: &ParamSet, meta: &BTreeMap<String, String>) -> Result<()> {
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&[VERSION]).map_err(io_err)?;
    put_u32(w, meta.len() as u32)?;
    for (k, v) in meta {
        put_str(w, k)?;
        put_str(w, v)?;
    }
    put_u32(w, params.len() as u32)?;
    for p in params.iter() {
        put_str(w, &p.name)?;
        put_u32(w, p.value.shape().len() as u32)?;
        for &d in p.value.shape() {
            put_u64(w, d as u64)?;
        }
        put_u32(w, p.frozen_rows.len() as u32)?;
        for &r in &p.frozen_rows {
            put_u64(w, r as u64)?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 8);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)?;
    }
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    get::<4>(r).map(u32::from_le_bytes)
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    get::<8>(r).map(u64::from_le_bytes)
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let len = get_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(io_err)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(ParamSet, BTreeMap<String, String>)> {
    if &get::<8>(r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let [version] = get::<1>(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut meta = BTreeMap::new();
    for _ in 0..get_u32(r)? {
        let k = get_str(r)?;
        let v = get_str(r)?;
        meta.insert(k, v);
    }
    let mut params = ParamSet::new();
    for _ in 0..get_u32(r)? {
        let name = get_str(r)?;
        let ndim = get_u32(r)? as usize;
        let shape = (0..ndim)
            .map(|_| get_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let frozen = (0..get_u32(r)?)
            .map(|_| get_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw).map_err(io_err)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if params.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        params.add_with_frozen_rows(name, Tensor::from_vec(&shape, data)?, frozen);
    }
    Ok((params, meta))
}
