//! Binary matrix format.
//!
//! Layout: magic `CKBA`, version `u32`, rows `u64`, cols `u64`, then
//! row-major little-endian `f64` payload. Round-trips are bit-exact; a 0x0
//! matrix is a valid 24-byte header-only file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, MatrixFormatError, Result};

const MAGIC: [u8; 4] = *b"CKBA";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

/// Writes `m` atomically (temp file + rename). Rejects non-finite entries.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    for (i, v) in m.iter().enumerate() {
        if !v.is_finite() {
            // column-major iteration order; report the flat index we saw
            return Err(Error::MatrixFormat {
                path: path.to_path_buf(),
                kind: MatrixFormatError::NonFinite(i),
            });
        }
    }
    let mut buf =
        Vec::with_capacity(HEADER_LEN as usize + 8 * m.nrows() * m.ncols());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let fail = |kind| Error::MatrixFormat {
        path: path.to_path_buf(),
        kind,
    };
    if bytes.len() < HEADER_LEN as usize {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(fail(MatrixFormatError::BadMagic));
        }
        return Err(fail(MatrixFormatError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len() as u64,
        }));
    }
    if bytes[..4] != MAGIC {
        return Err(fail(MatrixFormatError::BadMagic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(MatrixFormatError::BadVersion(version)));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + 8 * (rows as u64) * (cols as u64);
    if (bytes.len() as u64) != expected {
        return Err(fail(MatrixFormatError::Truncated {
            expected,
            found: bytes.len() as u64,
        }));
    }
    let mut m = DMatrix::zeros(rows, cols);
    let mut off = HEADER_LEN as usize;
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
        }
    }
    Ok(m)
}
