//! VLBE container: a fixed 16-byte header followed by a row-major f32 payload.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VLBE"
//! 4       4     version (u32 LE, currently 1)
//! 8       4     rows    (u32 LE)
//! 12      4     dim     (u32 LE)
//! 16      4*r*d payload, IEEE-754 f32 LE, row-major
//! ```
//!
//! This layer neither normalizes nor validates finiteness; it moves bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VLBE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Raw matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

pub fn encode(rows: usize, dim: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != rows * dim {
        return Err(Error::PayloadMismatch {
            expected_rows: rows,
            dim,
            actual_values: data.len(),
        });
    }
    let rows32 = u32::try_from(rows)
        .map_err(|_| Error::MalformedHeader(format!("row count {rows} exceeds u32")))?;
    let dim32 = u32::try_from(dim)
        .map_err(|_| Error::MalformedHeader(format!("dimension {dim} exceeds u32")))?;

    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&rows32.to_le_bytes());
    buf.extend_from_slice(&dim32.to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<RawMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    let rows = word(8) as usize;
    let dim = word(12) as usize;

    let payload = &bytes[HEADER_LEN..];
    if payload.len() % 4 != 0 {
        return Err(Error::MalformedHeader(format!(
            "payload of {} bytes is not a whole number of f32 values",
            payload.len()
        )));
    }
    let actual_values = payload.len() / 4;
    if actual_values != rows * dim {
        return Err(Error::PayloadMismatch {
            expected_rows: rows,
            dim,
            actual_values,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawMatrix { rows, dim, data })
}

pub fn read(path: &Path) -> Result<RawMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write(path: &Path, rows: usize, dim: usize, data: &[f32]) -> Result<()> {
    let bytes = encode(rows, dim, data)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
