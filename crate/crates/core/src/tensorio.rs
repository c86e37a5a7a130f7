//! Little-endian binary tensor files used by the backend adapter.
//!
//! Layout: magic `PSTN`, `u32` version, `u32` dtype (0 = f32, 1 = f64),
//! `u32` rank, `rank` x `u64` dims, then the row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PSTN";
const VERSION: u32 = 1;

pub fn write_f64(path: &Path, array: &ArrayD<f64>) -> Result<()> {
    let mut buf = header(1, array.shape());
    for v in array.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn write_f32(path: &Path, array: &ArrayD<f32>) -> Result<()> {
    let mut buf = header(0, array.shape());
    for v in array.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn header(dtype: u32, shape: &[usize]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&dtype.to_le_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    buf
}

/// Reads either dtype, widening f32 to f64.
pub fn read(path: &Path) -> Result<ArrayD<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Adapter(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a tensor file"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(bad("unsupported tensor version"));
    }
    let dtype = word(8);
    let rank = word(12) as usize;
    let mut at = 16;
    if bytes.len() < at + 8 * rank {
        return Err(bad("truncated header"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize);
        at += 8;
    }
    let count: usize = shape.iter().product();
    let width = match dtype {
        0 => 4,
        1 => 8,
        _ => return Err(bad("unknown dtype")),
    };
    if bytes.len() != at + count * width {
        return Err(bad("payload length does not match shape"));
    }
    let data: Vec<f64> = bytes[at..]
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                f32::from_le_bytes(c.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(c.try_into().unwrap())
            }
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| bad(&e.to_string()))
}
