//! XTSR binary tensor files.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "XTSR"
//! 4       1           version (1)
//! 5       1           dtype: 0 = f32, 1 = f64, 2 = u8
//! 6       1           rank
//! 7       1           padding (0)
//! 8       4 * rank    dims, u32 little-endian, outermost first
//! ...                 elements, little-endian, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::{DType, Dims, Scalar, Tensor4};

pub const MAGIC: &[u8; 4] = b"XTSR";
pub const VERSION: u8 = 1;

/// A decoded XTSR payload of any supported element type.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor4<f32>),
    F64(Tensor4<f64>),
    U8 { dims: Vec<u32>, data: Vec<u8> },
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
            Self::U8 { .. } => DType::U8,
        }
    }

    /// Converts to an `f32` tensor. `u8` payloads are scaled to `[0, 1]` by
    /// dividing by 255 and must have rank 4.
    pub fn into_f32(self) -> Result<Tensor4<f32>> {
        match self {
            Self::F32(t) => Ok(t),
            Self::F64(t) => Ok(t.cast()),
            Self::U8 { dims, data } => {
                let d = dims4(&dims)?;
                Tensor4::from_vec(d, data.iter().map(|&b| b as f32 / 255.0).collect())
            }
        }
    }

    pub fn into_f64(self) -> Result<Tensor4<f64>> {
        match self {
            Self::F64(t) => Ok(t),
            other => Ok(other.into_f32()?.cast()),
        }
    }
}

fn dims4(dims: &[u32]) -> Result<Dims> {
    ensure!(
        dims.len() == 4,
        Format,
        "expected rank 4, found rank {}",
        dims.len()
    );
    Ok(Dims::new(
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        dims[3] as usize,
    ))
}

fn header(out: &mut Vec<u8>, dtype: DType, dims: &[u32]) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.push(dims.len() as u8);
    out.push(0);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
}

fn dims_u32(d: Dims) -> Result<[u32; 4]> {
    let conv =
        |v: usize| u32::try_from(v).map_err(|_| Error::Size(format!("dimension {v} exceeds u32")));
    Ok([conv(d.n)?, conv(d.c)?, conv(d.h)?, conv(d.w)?])
}

/// Appends the encoding of `t` to `out`.
pub fn encode_into<T: Scalar>(t: &Tensor4<T>, out: &mut Vec<u8>) -> Result<()> {
    let dims = dims_u32(t.dims())?;
    out.reserve(8 + 16 + t.len() * T::DTYPE.width());
    header(out, T::DTYPE, &dims);
    for &v in t.as_slice() {
        v.write_le(out);
    }
    Ok(())
}

pub fn encode<T: Scalar>(t: &Tensor4<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_into(t, &mut out)?;
    Ok(out)
}

pub fn encode_u8(dims: &[u32], data: &[u8]) -> Result<Vec<u8>> {
    ensure!(dims.len() <= u8::MAX as usize, Format, "rank too large");
    let count: usize = dims.iter().map(|&d| d as usize).product();
    ensure!(count == data.len(), Shape, "u8 payload does not match dims");
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + data.len());
    header(&mut out, DType::U8, dims);
    out.extend_from_slice(data);
    Ok(out)
}

/// Decodes one XTSR block from the front of `bytes`, returning the payload
/// and the number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(TensorData, usize)> {
    ensure!(bytes.len() >= 8, Format, "truncated XTSR header");
    ensure!(&bytes[..4] == MAGIC, Format, "bad magic {:?}", &bytes[..4]);
    ensure!(
        bytes[4] == VERSION,
        Format,
        "unsupported XTSR version {}",
        bytes[4]
    );
    let dtype = DType::from_tag(bytes[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    ensure!(rank >= 1, Format, "rank must be >= 1");
    let dims_end = 8 + 4 * rank;
    ensure!(bytes.len() >= dims_end, Format, "truncated XTSR dims");
    let dims: Vec<u32> = bytes[8..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::Size("XTSR element count overflows".into()))?;
    ensure!(count >= 1, Format, "XTSR dims must be >= 1");
    let payload = count
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::Size("XTSR payload overflows".into()))?;
    let end = dims_end + payload;
    ensure!(bytes.len() >= end, Format, "truncated XTSR payload");
    let raw = &bytes[dims_end..end];
    let data = match dtype {
        DType::F32 => TensorData::F32(Tensor4::from_vec(
            dims4(&dims)?,
            raw.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        DType::F64 => TensorData::F64(Tensor4::from_vec(
            dims4(&dims)?,
            raw.chunks_exact(8).map(f64::read_le).collect(),
        )?),
        DType::U8 => TensorData::U8 {
            dims,
            data: raw.to_vec(),
        },
    };
    Ok((data, end))
}

pub fn write_file<T: Scalar>(path: impl AsRef<Path>, t: &Tensor4<T>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<TensorData> {
    let bytes = fs::read(path)?;
    let (data, used) = decode(&bytes)?;
    ensure!(
        used == bytes.len(),
        Format,
        "trailing bytes after XTSR block"
    );
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_fixed() {
        let t = Tensor4::<f32>::from_vec((1, 1, 1, 2), vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t).unwrap();
        let mut expect = b"XTSR".to_vec();
        expect.extend_from_slice(&[1, 0, 4, 0]);
        for d in [1u32, 1, 1, 2] {
            expect.extend_from_slice(&d.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let t = Tensor4::<f64>::ones((1, 2, 2, 2)).unwrap();
        let mut bytes = encode(&t).unwrap();
        bytes[0] = b'Y';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..5]), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload() {
        let t = Tensor4::<f32>::ones((1, 2, 2, 2)).unwrap();
        let bytes = encode(&t).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn u8_payload_scales() {
        let bytes = encode_u8(&[1, 1, 1, 2], &[0, 255]).unwrap();
        let (data, _) = decode(&bytes).unwrap();
        assert_eq!(data.dtype(), DType::U8);
        assert_eq!(data.into_f32().unwrap().as_slice(), &[0.0, 1.0]);
    }
}
