//! The CWMT binary tensor container.
//!
//! Layout: magic `CWMT`, `u8` version (1), `u8` dtype (0 = f32, 1 = f64),
//! `u8` ndim, `u8` reserved (0), `ndim` little-endian `u32` dims, then the
//! raw little-endian elements in row-major order.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const CWMT_MAGIC: [u8; 4] = *b"CWMT";
pub const CWMT_VERSION: u8 = 1;

/// A tensor read from disk whose element type is only known at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn into_scalar<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_cwmt<T: Scalar, W: Write>(tensor: &Tensor<T>, mut out: W) -> Result<()> {
    let ndim = u8::try_from(tensor.ndim())
        .map_err(|_| Error::Format(format!("rank {} exceeds 255", tensor.ndim())))?;
    let mut buf = Vec::with_capacity(8 + 4 * tensor.ndim() + tensor.numel() * T::DTYPE.size_of());
    buf.extend_from_slice(&CWMT_MAGIC);
    buf.extend_from_slice(&[CWMT_VERSION, T::DTYPE.code(), ndim, 0]);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_header<R: Read>(input: &mut R) -> Result<(DType, Vec<usize>)> {
    let mut head = [0u8; 8];
    input.read_exact(&mut head).map_err(truncated)?;
    if head[..4] != CWMT_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != CWMT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    let dtype = DType::from_code(head[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype {}", head[5])))?;
    if head[7] != 0 {
        return Err(Error::Format(format!("reserved byte is {}", head[7])));
    }
    let mut dims = vec![0u8; 4 * head[6] as usize];
    input.read_exact(&mut dims).map_err(truncated)?;
    let shape = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Ok((dtype, shape))
}

fn read_body<T: Scalar, R: Read>(input: &mut R, shape: Vec<usize>) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let size = T::DTYPE.size_of();
    let mut raw = vec![0u8; numel * size];
    input.read_exact(&mut raw).map_err(truncated)?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated data".into())
    } else {
        Error::Io(e)
    }
}

/// Reads a tensor whose stored dtype must be `T`.
pub fn read_cwmt<T: Scalar, R: Read>(mut input: R) -> Result<Tensor<T>> {
    let (dtype, shape) = read_header(&mut input)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "stored dtype {dtype:?}, expected {:?}",
            T::DTYPE
        )));
    }
    read_body(&mut input, shape)
}

pub fn read_any<R: Read>(mut input: R) -> Result<AnyTensor> {
    let (dtype, shape) = read_header(&mut input)?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(read_body(&mut input, shape)?),
        DType::F64 => AnyTensor::F64(read_body(&mut input, shape)?),
    })
}

impl<T: Scalar> Tensor<T> {
    pub fn to_cwmt_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_cwmt(self, &mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_cwmt_bytes();
        std::fs::write(path, bytes).map_err(|e| Error::Io(e).in_file(path))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Io(e).in_file(path))?;
        read_cwmt(bytes.as_slice()).map_err(|e| e.in_file(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_vec(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_cwmt_bytes();
        assert_eq!(&bytes[..8], b"CWMT\x01\x00\x02\x00");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f64>::zeros(&[3]);
        let mut bytes = t.to_cwmt_bytes();
        let err = read_cwmt::<f64, _>(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        bytes[0] = b'X';
        assert!(read_cwmt::<f64, _>(bytes.as_slice()).is_err());
    }

    #[test]
    fn dtype_is_checked() {
        let bytes = Tensor::<f64>::zeros(&[2]).to_cwmt_bytes();
        assert!(read_cwmt::<f32, _>(bytes.as_slice()).is_err());
        assert_eq!(read_any(bytes.as_slice()).unwrap().dtype(), DType::F64);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let numel: usize = dims.iter().product();
            let mut state = seed;
            let data: Vec<f32> = (0..numel)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f32::from_bits((state >> 32) as u32)
                })
                .collect();
            let t = Tensor::from_vec(dims, data).unwrap();
            let back: Tensor<f32> = read_cwmt(t.to_cwmt_bytes().as_slice()).unwrap();
            prop_assert_eq!(back.to_cwmt_bytes(), t.to_cwmt_bytes());
        }
    }
}
