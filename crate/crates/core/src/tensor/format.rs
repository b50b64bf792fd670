//! Binary tensor encoding.
//!
//! Layout (all integers little-endian):
//!
//! | field   | type        |
//! |---------|-------------|
//! | magic   | `b"IGVT"`   |
//! | version | `u32`       |
//! | dtype   | `u32` (0 = f64, 1 = f32) |
//! | rank    | `u32`       |
//! | dims    | `rank × u64`|
//! | payload | row-major values of `dtype` |

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"IGVT";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

impl DType {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(dtype as u32).to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| buf.extend(v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend((v as f32).to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated tensor ({what})")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Decode one tensor, returning it with the dtype it was stored in.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Tensor, DType)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!(
            "tensor format version {version}, expected {TENSOR_VERSION}"
        )));
    }
    let dtype = DType::from_code(read_u32(r, "dtype")?)?;
    let rank = read_u32(r, "rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact(r, &mut b, "dims")?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n <= 1 << 32)
        .ok_or_else(|| Error::Format(format!("implausible shape {shape:?}")))?;
    let width = if dtype == DType::F64 { 8 } else { 4 };
    let mut payload = vec![0u8; n * width];
    read_exact(r, &mut payload, "payload")?;
    let data = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensor(&mut buf, t, dtype).unwrap();
        buf
    }

    #[test]
    fn header_layout() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let b = encode(&t, DType::F64);
        assert_eq!(&b[..4], b"IGVT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(b.len(), 16 + 2 * 8 + 3 * 8);
        assert_eq!(f64::from_le_bytes(b[32..40].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_flipped_magic_and_truncation() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut b = encode(&t, DType::F64);
        let short = b[..b.len() - 3].to_vec();
        assert!(matches!(read_tensor(&mut &short[..]), Err(Error::Format(_))));
        b[0] = b'X';
        assert!(matches!(read_tensor(&mut &b[..]), Err(Error::Format(_))));
    }

    #[test]
    fn f32_storage_mode_rounds() {
        let mut rng = SplitMix64::new(5);
        let t = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let (back, dtype) = read_tensor(&mut &encode(&t, DType::F32)[..]).unwrap();
        assert_eq!(dtype, DType::F32);
        assert!(back.bit_eq(&t.to_f32_lossy()));
    }

    proptest! {
        #[test]
        fn f64_roundtrip_is_bit_exact(
            rows in 1usize..5,
            cols in 1usize..5,
            seed in any::<u64>(),
            bits in proptest::collection::vec(any::<u64>(), 25),
        ) {
            let mut rng = SplitMix64::new(seed);
            let mut t = Tensor::randn(&[rows, cols], 1.0, &mut rng);
            // include arbitrary bit patterns (NaN payloads, subnormals, -0.0)
            for (v, b) in t.data_mut().iter_mut().zip(&bits) {
                if b % 3 == 0 { *v = f64::from_bits(*b); }
            }
            let bytes = encode(&t, DType::F64);
            let (back, _) = read_tensor(&mut &bytes[..]).unwrap();
            prop_assert!(back.bit_eq(&t));
            prop_assert_eq!(encode(&back, DType::F64), bytes);
        }
    }
}
