//! Raw tensor serialization.
//!
//! Layout: magic `GPT0`, rank as u64 little-endian, one u64 little-endian
//! extent per axis, a one-byte element width tag (4 or 8), then the elements
//! as little-endian IEEE floats in row-major order. Same-width round trips
//! are bit-exact; cross-width reads convert through f64.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"GPT0";

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, data: &[S], shape: &[usize]) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::Format(format!(
            "write_tensor: {} elements for shape {:?}",
            data.len(),
            shape
        )));
    }
    let mut buf = Vec::with_capacity(4 + 8 + shape.len() * 8 + 1 + data.len() * S::WIDTH as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &e in shape {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    buf.push(S::WIDTH);
    for &v in data {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<(Vec<S>, Vec<usize>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?} (expected {:?})",
            magic, MAGIC
        )));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let rank = u64::from_le_bytes(u64buf) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u64buf)?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    let mut width = [0u8; 1];
    r.read_exact(&mut width)?;
    let width = width[0];
    let count: usize = shape.iter().product();
    let mut raw = vec![0u8; count * width as usize];
    r.read_exact(&mut raw)?;
    let data: Vec<S> = match width {
        4 => raw
            .chunks_exact(4)
            .map(|c| S::from_f64(f32::read_le(c) as f64))
            .collect(),
        8 => raw
            .chunks_exact(8)
            .map(|c| S::from_f64(f64::read_le(c)))
            .collect(),
        other => {
            return Err(Error::Format(format!("unknown element width tag {}", other)));
        }
    };
    Ok((data, shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f64_bit_exact() {
        let data = vec![1.5f64, -0.25, 3.141592653589793, 0.0, -0.0, 1e-300];
        let shape = vec![2, 3];
        let mut buf = Vec::new();
        write_tensor(&mut buf, &data, &shape).unwrap();
        let (back, back_shape) = read_tensor::<f64, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(back_shape, shape);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[1.0f32, 2.0], &[2]).unwrap();
        assert_eq!(&buf[0..4], b"GPT0");
        assert_eq!(u64::from_le_bytes(buf[4..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 2);
        assert_eq!(buf[20], 4);
        assert_eq!(buf.len(), 21 + 8);
    }

    #[test]
    fn cross_width_read() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[1.5f64, -2.0], &[2]).unwrap();
        let (back, _) = read_tensor::<f32, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![1.5f32, -2.0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE".to_vec();
        assert!(read_tensor::<f64, _>(&mut buf.as_slice()).is_err());
    }
}
