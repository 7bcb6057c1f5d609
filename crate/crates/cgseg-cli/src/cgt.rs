//! The CGT1 raw tensor file: magic "CGT1", a u8 dtype code (1 = f32
//! little-endian, 2 = u8 labels), a u8 rank, rank u32-LE extents, then the
//! row-major payload. Read ∘ write is a bitwise identity for both dtypes;
//! f64 grids are stored at f32 precision.

use std::path::Path;

use cgseg_core::data::LabelGrid;
use cgseg_core::GridTensor;

use crate::error::{io_err, CliError, Result};

pub const MAGIC: [u8; 4] = *b"CGT1";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U8: u8 = 2;

/// Payload of one CGT1 file.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorFile {
    /// dtype 1; values round-trip through f32.
    Grid(GridTensor),
    /// dtype 2; always rank 2, H×W.
    Labels(LabelGrid),
}

pub fn encode_grid(t: &GridTensor) -> Vec<u8> {
    let mut out = header(DTYPE_F32, t.shape());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn encode_labels(l: &LabelGrid) -> Vec<u8> {
    let mut out = header(DTYPE_U8, &[l.height(), l.width()]);
    out.extend_from_slice(l.as_slice());
    out
}

fn header(dtype: u8, shape: &[usize]) -> Vec<u8> {
    assert!(shape.len() <= u8::MAX as usize);
    let mut out = Vec::with_capacity(6 + 4 * shape.len());
    out.extend_from_slice(&MAGIC);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out
}

/// Decodes one CGT1 byte stream; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<TensorFile> {
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if bytes.len() < *cursor + n {
            return Err(CliError::Truncated {
                path: path.to_path_buf(),
                expected: *cursor + n - bytes.len(),
            });
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };

    let magic = take(&mut cursor, 4)?;
    if magic != MAGIC {
        return Err(CliError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let dtype = take(&mut cursor, 1)?[0];
    if dtype != DTYPE_F32 && dtype != DTYPE_U8 {
        return Err(CliError::UnknownDtype {
            path: path.to_path_buf(),
            code: dtype,
        });
    }
    let rank = take(&mut cursor, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = take(&mut cursor, 4)?;
        shape.push(u32::from_le_bytes([e[0], e[1], e[2], e[3]]) as usize);
    }
    let count: usize = shape.iter().product();

    let malformed = |reason: &str| CliError::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    match dtype {
        DTYPE_F32 => {
            let payload = take(&mut cursor, count * 4)?;
            if cursor != bytes.len() {
                return Err(malformed("trailing bytes after the payload"));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let grid = GridTensor::new(shape, data)
                .map_err(|e| malformed(&format!("invalid tensor: {e}")))?;
            Ok(TensorFile::Grid(grid))
        }
        _ => {
            if rank != 2 {
                return Err(malformed(&format!(
                    "label files must be rank 2, this one is rank {rank}"
                )));
            }
            let payload = take(&mut cursor, count)?;
            if cursor != bytes.len() {
                return Err(malformed("trailing bytes after the payload"));
            }
            let labels = LabelGrid::new(shape[0], shape[1], payload.to_vec())
                .map_err(|e| malformed(&format!("invalid labels: {e}")))?;
            Ok(TensorFile::Labels(labels))
        }
    }
}

pub fn write_grid(path: &Path, t: &GridTensor) -> Result<()> {
    std::fs::write(path, encode_grid(t)).map_err(io_err(path))
}

pub fn write_labels(path: &Path, l: &LabelGrid) -> Result<()> {
    std::fs::write(path, encode_labels(l)).map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}

pub fn read_grid(path: &Path) -> Result<GridTensor> {
    match read_file(path)? {
        TensorFile::Grid(g) => Ok(g),
        TensorFile::Labels(_) => Err(CliError::Malformed {
            path: path.to_path_buf(),
            reason: "expected an f32 grid, found labels".to_string(),
        }),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelGrid> {
    match read_file(path)? {
        TensorFile::Labels(l) => Ok(l),
        TensorFile::Grid(_) => Err(CliError::Malformed {
            path: path.to_path_buf(),
            reason: "expected labels, found an f32 grid".to_string(),
        }),
    }
}
