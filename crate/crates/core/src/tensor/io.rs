//! `LBPW` tensor files: magic `b"LBPW"`, then little-endian `u32` version, rows
//! and cols, then `rows * cols` little-endian `f32` values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LBPW";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 16;
// Refuse headers that would need more than 4 GiB of payload.
const MAX_ELEMENTS: u64 = 1 << 30;

/// Encodes `m`. Values are narrowed to `f32`.
pub fn write_tensor<W: Write>(m: &Matrix, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m.data().len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Matrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    decode(&bytes)
}

pub fn save_tensor(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if m.rows() > u32::MAX as usize || m.cols() > u32::MAX as usize {
        return Err(Error::Format(format!(
            "{}x{} does not fit u32 dimensions",
            m.rows(),
            m.cols()
        )));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(m, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated header: {} bytes",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("empty dimensions {rows}x{cols}")));
    }
    let count = rows as u64 * cols as u64;
    if count > MAX_ELEMENTS {
        return Err(Error::Format(format!(
            "dimension overflow: {rows}x{cols} exceeds {MAX_ELEMENTS} elements"
        )));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = count as usize * 4;
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}
