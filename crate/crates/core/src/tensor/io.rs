//! `.tsr` binary tensor files.
//!
//! Layout: magic `TSRF`, version byte (1), dtype byte (0 = f32, 1 = u32,
//! 2 = f64), ndim byte, `ndim` little-endian u64 extents, then the row-major
//! little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::array::{DType, NDArray, Scalar};

const MAGIC: &[u8; 4] = b"TSRF";
const VERSION: u8 = 1;

/// A decoded `.tsr` payload of any supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum TsrTensor {
    F32(NDArray<f32>),
    U32(NDArray<u32>),
    F64(NDArray<f64>),
}

impl TsrTensor {
    pub fn dtype(&self) -> DType {
        match self {
            TsrTensor::F32(_) => DType::F32,
            TsrTensor::U32(_) => DType::U32,
            TsrTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            TsrTensor::F32(a) => a.dims(),
            TsrTensor::U32(a) => a.dims(),
            TsrTensor::F64(a) => a.dims(),
        }
    }

    /// Converts a float payload to `T`; u32 payloads are rejected.
    pub fn into_float<T: Scalar>(self) -> Option<NDArray<T>> {
        match self {
            TsrTensor::F32(a) => Some(a.cast()),
            TsrTensor::F64(a) => Some(a.cast()),
            TsrTensor::U32(_) => None,
        }
    }

    pub fn into_u32(self) -> Option<NDArray<u32>> {
        match self {
            TsrTensor::U32(a) => Some(a),
            _ => None,
        }
    }
}

impl<T: Scalar> From<&NDArray<T>> for TsrTensor {
    fn from(a: &NDArray<T>) -> Self {
        match T::DTYPE {
            DType::F64 => TsrTensor::F64(a.cast()),
            _ => TsrTensor::F32(a.cast()),
        }
    }
}

fn header(dtype: DType, dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * dims.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

pub fn encode(t: &TsrTensor) -> Vec<u8> {
    let mut out = header(t.dtype(), t.dims());
    match t {
        TsrTensor::F32(a) => a
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        TsrTensor::U32(a) => a
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        TsrTensor::F64(a) => a
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<TsrTensor, String> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err("missing TSRF magic".into());
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    let dtype = DType::from_byte(bytes[5]).ok_or_else(|| format!("unknown dtype {}", bytes[5]))?;
    let ndim = bytes[6] as usize;
    let mut pos = 7;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = bytes.get(pos..pos + 8).ok_or("truncated header")?;
        dims.push(u64::from_le_bytes(raw.try_into().unwrap()) as usize);
        pos += 8;
    }
    let count: usize = dims.iter().product();
    let payload = &bytes[pos..];
    if payload.len() != count * dtype.size() {
        return Err(format!(
            "payload has {} bytes, dims {dims:?} need {}",
            payload.len(),
            count * dtype.size()
        ));
    }
    let size = dtype.size();
    let words = payload.chunks_exact(size);
    let t = match dtype {
        DType::F32 => TsrTensor::F32(
            NDArray::new(
                dims,
                words
                    .map(|w| f32::from_le_bytes(w.try_into().unwrap()))
                    .collect(),
            )
            .map_err(|e| e.to_string())?,
        ),
        DType::U32 => TsrTensor::U32(
            NDArray::new(
                dims,
                words
                    .map(|w| u32::from_le_bytes(w.try_into().unwrap()))
                    .collect(),
            )
            .map_err(|e| e.to_string())?,
        ),
        DType::F64 => TsrTensor::F64(
            NDArray::new(
                dims,
                words
                    .map(|w| f64::from_le_bytes(w.try_into().unwrap()))
                    .collect(),
            )
            .map_err(|e| e.to_string())?,
        ),
    };
    Ok(t)
}

pub fn write_tsr(path: impl AsRef<Path>, t: &TsrTensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_tsr(path: impl AsRef<Path>) -> Result<TsrTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let a = NDArray::<u32>::new(vec![2, 1], vec![7, 0x01020304]).unwrap();
        let bytes = encode(&TsrTensor::U32(a));
        assert_eq!(&bytes[..7], b"TSRF\x01\x01\x02");
        assert_eq!(&bytes[7..15], &2u64.to_le_bytes());
        assert_eq!(&bytes[15..23], &1u64.to_le_bytes());
        assert_eq!(&bytes[23..27], &7u32.to_le_bytes());
        assert_eq!(&bytes[27..], &[4, 3, 2, 1]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(decode(b"NOPE\x01\x00\x01").is_err());
        let mut bytes = encode(&TsrTensor::F32(NDArray::zeros(&[3])));
        bytes.pop();
        assert!(decode(&bytes).is_err());
        bytes[5] = 9;
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trips(dims in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let f = NDArray::<f64>::new(dims.clone(), (0..n).map(|i| (i as f64 + seed as f64).sin()).collect()).unwrap();
            let u = NDArray::<u32>::new(dims.clone(), (0..n).map(|i| i as u32 ^ seed as u32).collect()).unwrap();
            for t in [TsrTensor::F64(f.clone()), TsrTensor::F32(f.cast()), TsrTensor::U32(u)] {
                prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
            }
        }
    }
}
