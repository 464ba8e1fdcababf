//! Little-endian tensor container: `"STPK"`, u32 version, u32 rank,
//! u64 extents, then raw `f32` values.

use std::io::{Read, Write};

use super::{check_shape, numel, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"STPK";
pub const TENSOR_VERSION: u32 = 1;

/// Refuse absurd headers before allocating.
const MAX_ELEMENTS: usize = 1 << 31;

pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor) -> Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &e in tensor.shape() {
        out.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.numel() * 4);
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(input)?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let rank = read_u32(input)? as usize;
    let mut shape = Vec::with_capacity(rank.min(8));
    for _ in 0..rank {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("extent overflow".into()))?);
    }
    check_shape(&shape)?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Format(format!("tensor too large: {shape:?}")))?;
    debug_assert_eq!(count, numel(&shape));
    let mut raw = vec![0u8; count * 4];
    input.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data)
}
