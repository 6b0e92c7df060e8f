//! Dense matrix files: a `(rows, cols)` header of two little-endian `u64`
//! followed by row-major little-endian `f64` values.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

pub fn encode_matrix(matrix: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = matrix.dim();
    let mut buf = Vec::with_capacity(16 + rows * cols * 8);
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in matrix.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 16 {
        return Err(Error::Parse("matrix file shorter than its header".into()));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Parse("matrix header overflows".into()))?;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(Error::Parse(format!(
            "matrix body has {} bytes, header {}x{} needs {}",
            body.len(),
            rows,
            cols,
            expected
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Parse(e.to_string()))
}

pub fn write_matrix(path: impl AsRef<Path>, matrix: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(matrix)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_preserves_bits() {
        let m = array![[1.0, -0.1, f64::MIN_POSITIVE], [1e300, 0.3, -0.0]];
        let back = decode_matrix(&encode_matrix(&m)).unwrap();
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_body_is_rejected() {
        let m = array![[1.0, 2.0]];
        let bytes = encode_matrix(&m);
        assert!(decode_matrix(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_matrix(&bytes[..4]).is_err());
    }
}
