//! Raw tensor format.
//!
//! Layout, all little-endian:
//! ```text
//! "ATNT"            magic, 4 bytes
//! u16               format version (1)
//! u16               dtype tag (1 = f64)
//! u16               rank
//! u64 × rank        extents
//! f64 × n           payload, row-major (n = product of extents)
//! u32               CRC-32 of the payload bytes
//! ```

use std::path::Path;

use crate::tensor::Tensor;

use super::{atomic_write, crc32, ByteReader, PersistError};

pub const MAGIC: [u8; 4] = *b"ATNT";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u16 = 1;

pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<u8>, PersistError> {
    if !t.all_finite() {
        return Err(PersistError::NonFinite);
    }
    let mut out = Vec::with_capacity(4 + 2 + 2 + 2 + 8 * t.rank() + 8 * t.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &extent in t.shape() {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    let payload_start = out.len();
    for v in t.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = crc32(&out[payload_start..]);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor, PersistError> {
    let mut r = ByteReader::new(bytes);
    let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(PersistError::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    let version = r.u16_le()?;
    if version != VERSION {
        return Err(PersistError::UnsupportedVersion(version));
    }
    let dtype = r.u16_le()?;
    if dtype != DTYPE_F64 {
        return Err(PersistError::UnsupportedDtype(dtype));
    }
    let rank = r.u16_le()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64_le()? as usize);
    }
    let count: usize = shape.iter().product();
    let payload = r.take(8 * count)?;
    let stored = r.u32_le()?;
    let computed = crc32(payload);
    if stored != computed {
        return Err(PersistError::CrcMismatch { stored, computed });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new(shape, values).expect("shape/payload consistent"))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<(), PersistError> {
    atomic_write(path.as_ref(), &tensor_to_bytes(t)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, PersistError> {
    tensor_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let t = Tensor::new(vec![3], vec![1.5, -2.0, 0.0]).unwrap();
        let bytes = tensor_to_bytes(&t).unwrap();
        let back = tensor_from_bytes(&bytes).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn corrupted_payload_byte_fails_crc() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = tensor_to_bytes(&t).unwrap();
        let payload_start = 4 + 2 + 2 + 2 + 16;
        bytes[payload_start + 3] ^= 0x40;
        assert!(matches!(
            tensor_from_bytes(&bytes).unwrap_err(),
            PersistError::CrcMismatch { .. }
        ));
    }

    #[test]
    fn empty_extent_tensor_is_valid() {
        let t = Tensor::new(vec![0], vec![]).unwrap();
        let bytes = tensor_to_bytes(&t).unwrap();
        let back = tensor_from_bytes(&bytes).unwrap();
        assert_eq!(back.shape(), &[0]);
        assert!(back.values().is_empty());
    }

    #[test]
    fn distinct_error_kinds() {
        let t = Tensor::scalar(1.0);
        let good = tensor_to_bytes(&t).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            tensor_from_bytes(&bad_magic).unwrap_err(),
            PersistError::BadMagic { .. }
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        assert!(matches!(
            tensor_from_bytes(&bad_version).unwrap_err(),
            PersistError::UnsupportedVersion(99)
        ));

        let mut bad_dtype = good.clone();
        bad_dtype[6] = 7;
        assert!(matches!(
            tensor_from_bytes(&bad_dtype).unwrap_err(),
            PersistError::UnsupportedDtype(7)
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            tensor_from_bytes(truncated).unwrap_err(),
            PersistError::Truncated { .. }
        ));

        let nan = Tensor::scalar(f64::NAN);
        assert!(matches!(
            tensor_to_bytes(&nan).unwrap_err(),
            PersistError::NonFinite
        ));
    }
}
