//! Binary matrix records.
//!
//! Layout of one record (all integers little-endian):
//!
//! | bytes | content                    |
//! |-------|----------------------------|
//! | 4     | magic `LTMX`               |
//! | 4     | `u32` rows                 |
//! | 4     | `u32` cols                 |
//! | 8·r·c | `f64` payload, row-major   |
//!
//! Files may hold several records back to back (checkpoints do).

use std::io::{Read, Write};
use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LTMX";

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.as_slice().len() * 8);
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn encode_matrices(ms: &[&Matrix]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in ms {
        write_matrix(&mut out, m).expect("writing to a Vec cannot fail");
    }
    out
}

/// Decodes every record in `bytes`.
pub fn decode_matrices(bytes: &[u8]) -> Result<Vec<Matrix>> {
    let mut out = Vec::new();
    let mut off = 0usize;
    while off < bytes.len() {
        let (m, used) = decode_one(&bytes[off..], off as u64)?;
        out.push(m);
        off += used;
    }
    Ok(out)
}

fn decode_one(bytes: &[u8], base: u64) -> Result<(Matrix, usize)> {
    let fmt = |offset: usize, message: &str| Error::Format {
        offset: base + offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 12 {
        return Err(fmt(bytes.len(), "truncated matrix header"));
    }
    if bytes[..4] != MAGIC {
        return Err(fmt(0, "bad matrix magic"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| fmt(4, "matrix dimensions overflow"))?;
    if bytes.len() < 12 + need {
        return Err(fmt(bytes.len(), "truncated matrix payload"));
    }
    let data = bytes[12..12 + need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Matrix::from_vec(rows, cols, data)?, 12 + need))
}

pub fn save_matrices(path: &Path, ms: &[&Matrix]) -> Result<()> {
    std::fs::write(path, encode_matrices(ms)).map_err(|e| Error::io(path, e))
}

pub fn load_matrices(path: &Path) -> Result<Vec<Matrix>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_matrices(&bytes)
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    save_matrices(path, &[m])
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let mut ms = load_matrices(path)?;
    if ms.len() != 1 {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected one matrix record, found {}", ms.len()),
        });
    }
    Ok(ms.pop().unwrap())
}
