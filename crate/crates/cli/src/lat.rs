//! LAT1 tensor files: 4-byte magic, C/T/H/W as u32 little-endian, then the
//! payload as f32 little-endian, W fastest.

use std::path::Path;

use vnp_core::error::{Error, Result};
use vnp_core::scalar::Scalar;
use vnp_core::tensor::{Dims4, LatentTensor};

pub const MAGIC: [u8; 4] = *b"LAT1";

pub fn write_lat<T: Scalar>(path: impl AsRef<Path>, x: &LatentTensor<T>) -> Result<()> {
    let path = path.as_ref();
    let dims = x.dims();
    let mut bytes = Vec::with_capacity(20 + 4 * dims.count());
    bytes.extend_from_slice(&MAGIC);
    for d in dims.as_array() {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in x.data() {
        bytes.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    let tmp = path.with_extension("lat.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_lat<T: Scalar>(path: impl AsRef<Path>) -> Result<LatentTensor<T>> {
    let bytes = std::fs::read(path.as_ref())?;
    if bytes.len() < 20 {
        return Err(Error::Truncated {
            expected: 20,
            actual: bytes.len() as u64,
        });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            record: None,
            detail: format!("bad magic {:02x?}, expected {MAGIC:02x?}", &bytes[..4]),
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let dims = Dims4::new(dim(0), dim(1), dim(2), dim(3));
    let expected = 20 + 4 * dims.count() as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|b| T::of_f32(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    LatentTensor::from_vec(dims, data)
}
