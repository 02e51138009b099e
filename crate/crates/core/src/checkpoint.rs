//! Parameter checkpoints: one file holding a metadata block and a list of
//! named row-major `float32` tensors.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "SGCK" | version | meta_len | meta (UTF-8 key=value lines)
//! n_tensors | { name_len | name | dtype (u8, 0 = f32) | ndim | dims.. | payload }*
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"SGCK";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub params: ParamStore,
}

pub fn encode(meta: &str, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for &x in value.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    read_exact(&mut cur, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut cur)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u32(&mut cur)? as usize;
    let meta = String::from_utf8(read_vec(&mut cur, meta_len)?)
        .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
    let count = read_u32(&mut cur)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut cur)? as usize;
        let name = String::from_utf8(read_vec(&mut cur, name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut dtype = [0u8; 1];
        read_exact(&mut cur, &mut dtype)?;
        if dtype[0] != DTYPE_F32 {
            return Err(Error::Format(format!("{name}: unsupported dtype {}", dtype[0])));
        }
        let ndim = read_u32(&mut cur)? as usize;
        let dims = (0..ndim)
            .map(|_| read_u32(&mut cur).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return Err(Error::Format(format!("{name}: expected 1 or 2 dims"))),
        };
        let raw = read_vec(&mut cur, rows * cols * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let value = Array2::from_shape_vec((rows, cols), data).expect("shape matches payload");
        if params.find(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        params.add(name, value);
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint { meta, params })
}

pub fn save(path: &Path, meta: &str, params: &ParamStore) -> Result<()> {
    fs::write(path, encode(meta, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| Error::Format("checkpoint truncated".into()))
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vec(cur: &mut Cursor<&[u8]>, len: usize) -> Result<Vec<u8>> {
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if len > remaining {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let mut v = vec![0u8; len];
    read_exact(cur, &mut v)?;
    Ok(v)
}
