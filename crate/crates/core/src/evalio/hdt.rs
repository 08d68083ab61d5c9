//! HDT tensor files: a minimal little-endian container for n-d arrays.
//!
//! Layout, in order: 4-byte magic `HDT1`, one dtype code byte
//! (f32 = 0, f64 = 1, u8 = 2), a `u32` rank, `rank` `u32` extents, then the
//! row-major payload. Everything multi-byte is little-endian; there is no
//! compression or alignment padding, so files are byte-reproducible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::ArrayD;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"HDT1";

/// Element type codes stored in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

fn write_header<W: Write>(w: &mut W, dtype: Dtype, shape: &[usize]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[dtype.code()])?;
    let rank = u32::try_from(shape.len())
        .map_err(|_| Error::Format(format!("rank {} exceeds u32", shape.len())))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(Dtype, Vec<usize>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    let dtype = Dtype::from_code(byte[0])?;
    let mut quad = [0u8; 4];
    r.read_exact(&mut quad)?;
    let rank = u32::from_le_bytes(quad) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut quad)?;
        shape.push(u32::from_le_bytes(quad) as usize);
    }
    Ok((dtype, shape))
}

/// Write a real-valued tensor.
pub fn hdt_write<S: Scalar, W: Write>(w: &mut W, arr: &ArrayD<S>) -> Result<()> {
    write_header(w, S::DTYPE, arr.shape())?;
    let mut payload = Vec::with_capacity(arr.len() * S::DTYPE.byte_width());
    for &v in arr.iter() {
        v.put_le(&mut payload);
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Read a real-valued tensor; the stored dtype must match `S`.
pub fn hdt_read<S: Scalar, R: Read>(r: &mut R) -> Result<ArrayD<S>> {
    let (dtype, shape) = read_header(r)?;
    if dtype != S::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {dtype:?}, requested {:?}",
            S::DTYPE
        )));
    }
    let n: usize = shape.iter().product();
    let width = dtype.byte_width();
    let mut payload = vec![0u8; n * width];
    r.read_exact(&mut payload)?;
    let mut values = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(width) {
        values.push(S::get_le(chunk));
    }
    ArrayD::from_shape_vec(shape, values)
        .map_err(|e| Error::Format(format!("shape/payload mismatch: {e}")))
}

/// Write a byte tensor (masks, labels).
pub fn hdt_write_u8<W: Write>(w: &mut W, arr: &ArrayD<u8>) -> Result<()> {
    write_header(w, Dtype::U8, arr.shape())?;
    let payload: Vec<u8> = arr.iter().copied().collect();
    w.write_all(&payload)?;
    Ok(())
}

/// Read a byte tensor.
pub fn hdt_read_u8<R: Read>(r: &mut R) -> Result<ArrayD<u8>> {
    let (dtype, shape) = read_header(r)?;
    if dtype != Dtype::U8 {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {dtype:?}, requested U8"
        )));
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n];
    r.read_exact(&mut payload)?;
    ArrayD::from_shape_vec(shape, payload)
        .map_err(|e| Error::Format(format!("shape/payload mismatch: {e}")))
}

/// Save a real-valued tensor to `path`.
pub fn hdt_save<S: Scalar, P: AsRef<Path>>(path: P, arr: &ArrayD<S>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    hdt_write(&mut f, arr)
}

/// Load a real-valued tensor from `path`.
pub fn hdt_load<S: Scalar, P: AsRef<Path>>(path: P) -> Result<ArrayD<S>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    hdt_read(&mut f)
}

/// Save a byte tensor to `path`.
pub fn hdt_save_u8<P: AsRef<Path>>(path: P, arr: &ArrayD<u8>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    hdt_write_u8(&mut f, arr)
}

/// Load a byte tensor from `path`.
pub fn hdt_load_u8<P: AsRef<Path>>(path: P) -> Result<ArrayD<u8>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    hdt_read_u8(&mut f)
}
