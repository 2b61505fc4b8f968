//! Flat tensor serialization: an ASCII header line `TNSR v1 <rank> <d0> <d1> ...` followed by
//! the values as little-endian f64 in row-major order. Records may be concatenated.

use std::path::Path;

use langseg_core::Tensor;

use crate::error::{self, AppError, Result};

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    let mut header = format!("TNSR v1 {}", t.shape().len());
    for d in t.shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    out.extend_from_slice(header.as_bytes());
    out.reserve(8 * t.data().len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one record from the front of `bytes`, returning it and the unread remainder.
pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<(Tensor, &[u8]), String> {
    let nl = bytes
        .iter()
        .take(256)
        .position(|&b| b == b'\n')
        .ok_or("missing TNSR header line")?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| "header is not ASCII")?;
    let mut it = line.split(' ');
    if it.next() != Some("TNSR") || it.next() != Some("v1") {
        return Err(format!("bad tensor header {line:?}"));
    }
    let nums: Vec<usize> = it
        .map(|s| s.parse().map_err(|_| format!("bad tensor header {line:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let (&rank, shape) = nums.split_first().ok_or("missing rank")?;
    if rank != shape.len() {
        return Err(format!("rank {rank} but {} dimensions", shape.len()));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or("tensor size overflows")?;
    let body = &bytes[nl + 1..];
    let len = n.checked_mul(8).filter(|&l| l <= body.len()).ok_or_else(|| {
        format!("tensor data truncated: need {n} values, have {} bytes", body.len())
    })?;
    let data = body[..len]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok((t, &body[len..]))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out);
    error::write(path, &out)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = error::read(path)?;
    let (t, rest) = decode_tensor(&bytes).map_err(|m| AppError::format(path, m))?;
    if !rest.is_empty() {
        return Err(AppError::format(path, format!("{} trailing bytes", rest.len())));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0, -0.5]).unwrap();
        let mut b = Vec::new();
        encode_tensor(&t, &mut b);
        assert!(b.starts_with(b"TNSR v1 2 2 1\n"));
        assert_eq!(&b[14..22], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 14 + 16);
    }

    #[test]
    fn concatenated_records_roundtrip_bitwise() {
        let a = Tensor::new(&[3], vec![0.1, f64::MIN_POSITIVE, -0.0]).unwrap();
        let s = Tensor::scalar(1.0 / 3.0);
        let mut b = Vec::new();
        encode_tensor(&a, &mut b);
        encode_tensor(&s, &mut b);
        let (a2, rest) = decode_tensor(&b).unwrap();
        let (s2, rest) = decode_tensor(rest).unwrap();
        assert!(rest.is_empty());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!((a2.shape(), bits(&a2)), (a.shape(), bits(&a)));
        assert_eq!(bits(&s2), bits(&s));
    }

    #[test]
    fn corrupt_records_are_rejected() {
        assert!(decode_tensor(b"TNSR v2 1 1\n\0\0\0\0\0\0\0\0").is_err());
        assert!(decode_tensor(b"TNSR v1 1 2\n\0\0\0\0\0\0\0\0").is_err());
        assert!(decode_tensor(b"TNSR v1 2 1\n\0\0\0\0\0\0\0\0").is_err());
    }
}
