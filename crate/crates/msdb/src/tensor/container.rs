//! Binary tensor container: magic "MSDT", 1-byte version (=1), 1-byte dtype
//! code (1 = f32, 2 = f64, 3 = u8), 1-byte rank, rank x 8-byte little-endian
//! dims, then the row-major little-endian payload. Round-trips are bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSDT";
const VERSION: u8 = 1;

/// A decoded container payload.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl TensorPayload {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorPayload::F32 { shape, .. }
            | TensorPayload::F64 { shape, .. }
            | TensorPayload::U8 { shape, .. } => shape,
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> TensorPayload {
        let shape = t.shape().to_vec();
        match T::DTYPE {
            Dtype::F32 => TensorPayload::F32 {
                shape,
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            },
            Dtype::F64 => TensorPayload::F64 {
                shape,
                data: t.data().iter().map(|v| v.as_f64()).collect(),
            },
            Dtype::U8 => unreachable!("no u8 Scalar impl"),
        }
    }

    pub fn into_tensor<T: Scalar>(self) -> Result<Tensor<T>> {
        let err = |want: &str, got: &str| {
            Err(Error::InvalidArgument {
                op: "container",
                reason: format!("dtype mismatch: requested {want}, stored {got}"),
            })
        };
        match (self, T::DTYPE) {
            (TensorPayload::F32 { shape, data }, Dtype::F32) => {
                Tensor::new(&shape, data.into_iter().map(|v| T::from_f64(v as f64)).collect())
            }
            (TensorPayload::F64 { shape, data }, Dtype::F64) => {
                Tensor::new(&shape, data.into_iter().map(T::from_f64).collect())
            }
            (TensorPayload::F32 { .. }, _) => err(dtype_name(T::DTYPE), "f32"),
            (TensorPayload::F64 { .. }, _) => err(dtype_name(T::DTYPE), "f64"),
            (TensorPayload::U8 { .. }, _) => err(dtype_name(T::DTYPE), "u8"),
        }
    }
}

fn dtype_name(d: Dtype) -> &'static str {
    match d {
        Dtype::F32 => "f32",
        Dtype::F64 => "f64",
        Dtype::U8 => "u8",
    }
}

/// Serialize a payload into the container encoding.
pub fn write_tensor<W: Write>(w: &mut W, payload: &TensorPayload) -> std::io::Result<()> {
    let (dtype, shape) = match payload {
        TensorPayload::F32 { shape, .. } => (Dtype::F32, shape),
        TensorPayload::F64 { shape, .. } => (Dtype::F64, shape),
        TensorPayload::U8 { shape, .. } => (Dtype::U8, shape),
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(dtype.code());
    buf.push(shape.len() as u8);
    for &d in shape.iter() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match payload {
        TensorPayload::F32 { data, .. } => {
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        TensorPayload::F64 { data, .. } => {
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        TensorPayload::U8 { data, .. } => buf.extend_from_slice(data),
    }
    w.write_all(&buf)
}

/// Decode one container from the reader. `context` names the source in errors.
pub fn read_tensor<R: Read>(r: &mut R, context: &str) -> Result<TensorPayload> {
    let fail = |reason: String| Error::Format {
        path: context.into(),
        reason,
    };
    let ioerr = |e: std::io::Error| Error::io(context, e);

    let mut head = [0u8; 7];
    r.read_exact(&mut head).map_err(ioerr)?;
    if &head[0..4] != MAGIC {
        return Err(fail("bad magic, expected MSDT".into()));
    }
    if head[4] != VERSION {
        return Err(fail(format!("unsupported version {}", head[4])));
    }
    let dtype = Dtype::from_code(head[5]).ok_or_else(|| fail(format!("bad dtype code {}", head[5])))?;
    let rank = head[6] as usize;

    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        r.read_exact(&mut d).map_err(ioerr)?;
        let dim = u64::from_le_bytes(d);
        if dim == 0 {
            return Err(fail("zero extent in stored shape".into()));
        }
        shape.push(dim as usize);
    }
    let numel: usize = shape.iter().product();

    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
        Dtype::U8 => 1,
    };
    let mut raw = vec![0u8; numel * width];
    r.read_exact(&mut raw).map_err(ioerr)?;
    // A well-formed container ends exactly at the payload boundary when read
    // standalone; embedded uses (checkpoints) continue reading after us.

    Ok(match dtype {
        Dtype::F32 => TensorPayload::F32 {
            shape,
            data: raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        },
        Dtype::F64 => TensorPayload::F64 {
            shape,
            data: raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        },
        Dtype::U8 => TensorPayload::U8 { shape, data: raw },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(p: &TensorPayload) -> TensorPayload {
        let mut buf = Vec::new();
        write_tensor(&mut buf, p).unwrap();
        read_tensor(&mut buf.as_slice(), "test").unwrap()
    }

    #[test]
    fn f32_roundtrip_bit_exact() {
        let p = TensorPayload::F32 {
            shape: vec![2, 3],
            data: vec![0.0, -1.5, f32::MIN_POSITIVE, 1e30, -0.0, 7.25],
        };
        let q = roundtrip(&p);
        let (TensorPayload::F32 { data: a, .. }, TensorPayload::F32 { data: b, .. }) = (&p, &q)
        else {
            panic!("dtype changed");
        };
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn u8_roundtrip() {
        let p = TensorPayload::U8 {
            shape: vec![4, 4],
            data: (0..16).collect(),
        };
        assert_eq!(roundtrip(&p), p);
    }

    #[test]
    fn header_layout_is_fixed() {
        let p = TensorPayload::U8 {
            shape: vec![2],
            data: vec![9, 8],
        };
        let mut buf = Vec::new();
        write_tensor(&mut buf, &p).unwrap();
        assert_eq!(&buf[0..4], b"MSDT");
        assert_eq!(buf[4], 1); // version
        assert_eq!(buf[5], 3); // u8 dtype code
        assert_eq!(buf[6], 1); // rank
        assert_eq!(&buf[7..15], &2u64.to_le_bytes());
        assert_eq!(&buf[15..], &[9, 8]);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"XSDT\x01\x01\x01".to_vec();
        assert!(read_tensor(&mut buf.as_slice(), "test").is_err());
    }
}
