//! Binary tensor container.
//!
//! Layout: magic `M2CI`, one dtype byte (0 = `f32`, 1 = `f64`), one rank
//! byte, `rank` little-endian `u32` dims, then the row-major little-endian
//! payload.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"M2CI";

/// Bytes before the payload for a tensor of the given rank.
pub fn header_len(rank: usize) -> usize {
    MAGIC.len() + 2 + 4 * rank
}

fn dtype_width(code: u8) -> Option<usize> {
    match code {
        0 => Some(4),
        1 => Some(8),
        _ => None,
    }
}

/// Appends the encoding of `tensor` to `out`.
pub fn encode_tensor<T: Scalar>(tensor: &ArrayViewD<'_, T>, out: &mut Vec<u8>) -> Result<()> {
    if tensor.ndim() > u8::MAX as usize {
        return Err(Error::invalid("tensor encoding", format!("rank {} too large", tensor.ndim())));
    }
    if let Some(pos) = tensor.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("tensor element {pos}")));
    }
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE_CODE);
    out.push(tensor.ndim() as u8);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("tensor encoding", format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.iter() {
        v.to_le_bytes_vec(out);
    }
    Ok(())
}

/// Decodes one tensor from the start of `bytes`, returning it and the number
/// of bytes consumed. Offsets in errors are relative to `base`.
pub fn decode_tensor<T: Scalar>(bytes: &[u8], base: usize) -> Result<(ArrayD<T>, usize)> {
    let fail = |offset: usize, message: String| Error::Format { offset: base + offset, message };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let got = &bytes[..bytes.len().min(4)];
        return Err(fail(0, format!("bad magic {:?}", String::from_utf8_lossy(got))));
    }
    let Some(&dtype) = bytes.get(4) else {
        return Err(fail(4, "truncated before dtype".into()));
    };
    let Some(width) = dtype_width(dtype) else {
        return Err(fail(4, format!("unknown dtype code {dtype}")));
    };
    if dtype != T::DTYPE_CODE {
        return Err(fail(4, format!("dtype code {dtype} does not match requested code {}", T::DTYPE_CODE)));
    }
    let Some(&rank) = bytes.get(5) else {
        return Err(fail(5, "truncated before rank".into()));
    };
    let rank = rank as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 6 + 4 * i;
        let Some(raw) = bytes.get(at..at + 4) else {
            return Err(fail(bytes.len(), format!("truncated in dimension {i}")));
        };
        shape.push(u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize);
    }
    let start = header_len(rank);
    let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let Some(len) = count.and_then(|c| c.checked_mul(width)) else {
        return Err(fail(6, "payload size overflows".into()));
    };
    let Some(payload) = bytes.get(start..start + len) else {
        return Err(fail(bytes.len(), format!("truncated payload: need {len} bytes after offset {start}")));
    };
    let data: Vec<T> = payload.chunks_exact(width).map(T::from_le_slice).collect();
    let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length matches shape");
    Ok((tensor, start + len))
}

pub fn write_tensor<T: Scalar>(path: &Path, tensor: &ArrayViewD<'_, T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(header_len(tensor.ndim()) + tensor.len() * 8);
    encode_tensor(tensor, &mut bytes)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<ArrayD<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tensor, used) = decode_tensor(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::Format { offset: used, message: format!("{} trailing bytes", bytes.len() - used) });
    }
    Ok(tensor)
}

/// Reads a rank-2 tensor.
pub fn read_matrix<T: Scalar>(path: &Path) -> Result<ndarray::Array2<T>> {
    let t = read_tensor::<T>(path)?;
    let rank = t.ndim();
    t.into_dimensionality()
        .map_err(|_| Error::Format { offset: 5, message: format!("expected rank 2, found rank {rank}") })
}
