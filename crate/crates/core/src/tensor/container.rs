//! `MTTB` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MTTB" | u32 version (=1) | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 dtype (0 = f32, 1 = f64)
//!            | u8 ndim | ndim x u64 dims | payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MTTB";
const VERSION: u32 = 1;

/// A tensor of either supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.clone(),
        }
    }

    /// Convert to `T`, exactly when the stored dtype already is `T`.
    pub fn to_element<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    /// Wrap a tensor keeping its own dtype.
    pub fn from_element<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
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

fn io_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_mttb<W: Write>(mut w: W, entries: &[(String, AnyTensor)]) -> Result<()> {
    let count = u32::try_from(entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&count.to_le_bytes()).map_err(io_err)?;
    for (name, tensor) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("entry name too long: {} bytes", name.len())))?;
        let ndim = u8::try_from(tensor.shape().len())
            .map_err(|_| Error::Format("tensor rank exceeds 255".into()))?;
        w.write_all(&len.to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&[tensor.dtype() as u8, ndim]).map_err(io_err)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        match tensor {
            AnyTensor::F32(t) => {
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                w.write_all(&bytes).map_err(io_err)?;
            }
            AnyTensor::F64(t) => {
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                w.write_all(&bytes).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    Ok(buf)
}

pub fn read_mttb<R: Read>(mut r: R) -> Result<Vec<(String, AnyTensor)>> {
    if &read_exact::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("bad magic, not an MTTB container".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut entries = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated entry name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let [dtype, ndim] = read_exact::<2, _>(&mut r)?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            let d = u64::from_le_bytes(read_exact(&mut r)?);
            shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("`{name}`: element count overflows")))?;
        let width = match dtype {
            0 => 4,
            1 => 8,
            other => return Err(Error::Format(format!("`{name}`: unknown dtype code {other}"))),
        };
        let mut payload = Vec::new();
        let want = numel
            .checked_mul(width)
            .ok_or_else(|| Error::Format(format!("`{name}`: payload size overflows")))?;
        (&mut r)
            .take(want as u64)
            .read_to_end(&mut payload)
            .map_err(io_err)?;
        if payload.len() != want {
            return Err(Error::Format(format!("`{name}`: truncated payload")));
        }
        let tensor = if dtype == 0 {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            AnyTensor::F32(Tensor::from_vec(shape, data)?)
        } else {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            AnyTensor::F64(Tensor::from_vec(shape, data)?)
        };
        entries.push((name, tensor));
    }
    Ok(entries)
}

pub fn write_mttb_file(path: impl AsRef<Path>, entries: &[(String, AnyTensor)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_mttb(BufWriter::new(file), entries)
}

pub fn read_mttb_file(path: impl AsRef<Path>) -> Result<Vec<(String, AnyTensor)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_mttb(BufReader::new(file))
}
