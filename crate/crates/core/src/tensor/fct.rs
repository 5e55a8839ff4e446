//! FCT1 raw tensor container.
//!
//! Layout: magic `FCT1`, u8 dtype code, u8 rank, `rank` little-endian u32
//! dimensions, then the little-endian row-major payload.

use std::io::{Read, Write};

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const FCT_MAGIC: &[u8; 4] = b"FCT1";

/// A tensor whose element type is only known after decoding.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    U8(Tensor<u8>),
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::U8(_) => DType::U8,
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::U8(t) => t.shape(),
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        match self {
            AnyTensor::U8(t) => write_tensor(t, out),
            AnyTensor::F32(t) => write_tensor(t, out),
            AnyTensor::F64(t) => write_tensor(t, out),
        }
    }
}

impl From<Tensor<u8>> for AnyTensor {
    fn from(t: Tensor<u8>) -> Self {
        AnyTensor::U8(t)
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

macro_rules! any_variant {
    ($t:ty, $v:ident) => {
        impl TryFrom<AnyTensor> for Tensor<$t> {
            type Error = AnyTensor;

            fn try_from(a: AnyTensor) -> std::result::Result<Self, AnyTensor> {
                match a {
                    AnyTensor::$v(t) => Ok(t),
                    other => Err(other),
                }
            }
        }
    };
}

any_variant!(u8, U8);
any_variant!(f32, F32);
any_variant!(f64, F64);

pub fn write_tensor<T: Element>(t: &Tensor<T>, out: &mut impl Write) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::shape("fct1", format!("rank {} exceeds 255", t.rank())))?;
    let mut buf = Vec::with_capacity(6 + 4 * t.rank() + t.len() * T::DTYPE.size());
    buf.extend_from_slice(FCT_MAGIC);
    buf.push(T::DTYPE as u8);
    buf.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::shape("fct1", format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for x in t.data() {
        x.extend_le(&mut buf);
    }
    out.write_all(&buf)
        .map_err(|e| Error::io("<fct1 stream>", e))
}

/// Tracks the absolute stream offset for diagnostics.
struct Cursor<'a, R> {
    inner: &'a mut R,
    offset: usize,
}

impl<R: Read> Cursor<'_, R> {
    fn take(&mut self, len: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(len);
        let got = self
            .inner
            .by_ref()
            .take(len as u64)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io("<fct1 stream>", e))?;
        if got != len {
            return Err(Error::parse(
                self.offset + got,
                format!("truncated {what}: expected {len} bytes, found {got}"),
            ));
        }
        self.offset += len;
        Ok(buf)
    }
}

fn read_header<R: Read>(cur: &mut Cursor<'_, R>) -> Result<(DType, Vec<usize>)> {
    let start = cur.offset;
    let magic = cur.take(4, "magic")?;
    if magic != FCT_MAGIC {
        return Err(Error::parse(
            start,
            format!("bad magic {magic:02x?}, expected FCT1"),
        ));
    }
    let head = cur.take(2, "header")?;
    let dtype = DType::from_code(head[0])
        .ok_or_else(|| Error::parse(start + 4, format!("unknown dtype code {}", head[0])))?;
    let rank = head[1] as usize;
    let dims = cur.take(4 * rank, "dimensions")?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::parse(
            start + 6,
            format!("zero dimension in {shape:?}"),
        ));
    }
    Ok((dtype, shape))
}

fn read_payload<T: Element, R: Read>(
    cur: &mut Cursor<'_, R>,
    shape: Vec<usize>,
) -> Result<Tensor<T>> {
    let count: usize = shape.iter().product();
    let bytes = cur.take(count * T::DTYPE.size(), "payload")?;
    let data = bytes
        .chunks_exact(T::DTYPE.size())
        .map(T::from_le)
        .collect();
    Tensor::new(shape, data)
}

/// Reads one tensor of a statically known element type.
pub fn read_tensor<T: Element>(input: &mut impl Read) -> Result<Tensor<T>> {
    let mut cur = Cursor {
        inner: input,
        offset: 0,
    };
    let (dtype, shape) = read_header(&mut cur)?;
    if dtype != T::DTYPE {
        return Err(Error::parse(
            4,
            format!("expected {} tensor, found {dtype}", T::DTYPE),
        ));
    }
    read_payload(&mut cur, shape)
}

pub fn read_any(input: &mut impl Read) -> Result<AnyTensor> {
    let mut cur = Cursor {
        inner: input,
        offset: 0,
    };
    let (dtype, shape) = read_header(&mut cur)?;
    Ok(match dtype {
        DType::U8 => AnyTensor::U8(read_payload(&mut cur, shape)?),
        DType::F32 => AnyTensor::F32(read_payload(&mut cur, shape)?),
        DType::F64 => AnyTensor::F64(read_payload(&mut cur, shape)?),
    })
}
