//! The VPKF tensor container: `"VPKF"`, `u32` version, `u32` rank,
//! `u32` extents, then little-endian `f64` values in row-major order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;
use vpkl_core::Tensor;

pub const MAGIC: [u8; 4] = *b"VPKF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"VPKF\"")]
    Magic { found: [u8; 4] },
    #[error("unsupported tensor format version {0} (this build reads {VERSION})")]
    Version(u32),
    #[error("truncated tensor: {0}")]
    Truncated(&'static str),
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("{0} trailing bytes after tensor payload")]
    Trailing(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encoded_len(t: &Tensor) -> usize {
    12 + 4 * t.rank() + 8 * t.len()
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> io::Result<()> {
    let mut buf = Vec::with_capacity(encoded_len(t));
    encode_into(&mut buf, t);
    w.write_all(&buf)
}

pub fn encode_into(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_len(t));
    encode_into(&mut buf, t);
    buf
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FormatError::Truncated(what),
        _ => FormatError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor from the stream, leaving any following bytes unread.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, FormatError> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::Magic { found: magic });
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let rank = read_u32(r, "rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(FormatError::Invalid(format!("rank {rank} outside 1..=8")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, "extents")? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .filter(|&n| n <= (1 << 32))
        .ok_or_else(|| FormatError::Invalid(format!("extents {shape:?} are too large")))?;
    let mut raw = vec![0u8; n * 8];
    read_exact_or(r, &mut raw, "payload")?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| FormatError::Invalid(e.to_string()))
}

/// Decodes a buffer holding exactly one tensor.
pub fn from_bytes(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(FormatError::Trailing(cursor.len()));
    }
    Ok(t)
}

pub fn save(path: &Path, t: &Tensor) -> io::Result<()> {
    fs::write(path, to_bytes(t))
}

pub fn load(path: &Path) -> Result<Tensor, FormatError> {
    from_bytes(&fs::read(path)?)
}
