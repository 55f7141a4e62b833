use std::path::Path;

use super::reader::{push_f32s, ByteReader};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"NFTD";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Encodes a tensor: magic, version, dtype, ndim, u32 extents, f32 payload.
pub fn write_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.shape().len() > u8::MAX as usize {
        return Err(Error::contract("tensor rank exceeds 255"));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::contract("extent exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    push_f32s(&mut out, t.data());
    Ok(out)
}

pub fn read_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected NFTD")));
    }
    let at = r.offset();
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(at, format!("unsupported dtype code {dtype}")));
    }
    let ndim = r.u8("ndim")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32("shape")? as usize);
    }
    let at = r.offset();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(at, "shape volume overflows"))?;
    let data = r.f32s(n, "payload")?;
    r.finish()?;
    Tensor::new(shape, data)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, write_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    read_tensor(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}
