//! Flat binary tensor archive.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic      8 bytes   b"SAFETNSR"
//! version    u32       1
//! kind       u32       caller-defined payload tag
//! count      u32       number of tensors
//! per tensor:
//!   ndim     u32
//!   dims     u64 × ndim
//! payload    f64 × Σ numel, tensors concatenated in header order
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SAFETNSR";
const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, kind: u32, tensors: &[&Tensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&kind.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
    }
    for t in tensors {
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads an archive, returning its kind tag and tensors (all frozen).
pub fn read_tensors<R: Read>(mut r: R) -> Result<(u32, Vec<Tensor>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = read_u32(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("implausible rank {ndim}")));
        }
        let dims = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        shapes.push(dims);
    }
    let mut out = Vec::with_capacity(count);
    for shape in shapes {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let values = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Tensor::new(shape, values)?);
    }
    Ok((kind, out))
}
