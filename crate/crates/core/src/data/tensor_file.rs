//! `FT01` binary tensor files.
//!
//! Layout: the magic bytes `FT01`, a little-endian `u32` rank (at most 4),
//! `rank` little-endian `u32` extents, then the row-major payload as
//! little-endian IEEE-754 single-precision floats.

use std::fs;
use std::path::Path;

use sarcasm_tensor::Tensor;

use crate::error::{CoreError, Result};

pub const MAGIC: [u8; 4] = *b"FT01";
pub const MAX_RANK: usize = 4;

/// Serializes `tensor`, rounding values to single precision.
pub fn encode_tensor(tensor: &Tensor) -> Result<Vec<u8>> {
    if tensor.rank() > MAX_RANK {
        return Err(CoreError::Data(format!(
            "tensor rank {} exceeds the file format limit of {MAX_RANK}",
            tensor.rank()
        )));
    }
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &e in tensor.shape() {
        let e = u32::try_from(e)
            .map_err(|_| CoreError::Data(format!("extent {e} does not fit in 32 bits")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in tensor.data() {
        let single = v as f32;
        if !single.is_finite() {
            return Err(CoreError::Data(format!(
                "value {v} is not finite in single precision"
            )));
        }
        out.extend_from_slice(&single.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], offset: usize) -> Option<u32> {
    let chunk = bytes.get(offset..offset + 4)?;
    Some(u32::from_le_bytes(chunk.try_into().expect("four bytes")))
}

/// Parses the bytes of an `FT01` file.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.get(..4) != Some(&MAGIC[..]) {
        return Err(CoreError::Data("bad magic, expected FT01".into()));
    }
    let rank = u32_at(bytes, 4).ok_or_else(|| CoreError::Data("truncated header".into()))? as usize;
    if rank > MAX_RANK {
        return Err(CoreError::Data(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u32_at(bytes, 8 + 4 * i).map(|e| e as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| CoreError::Data("truncated header".into()))?;
    let numel: usize = shape.iter().product();
    let start = 8 + 4 * rank;
    let payload = &bytes[start..];
    if payload.len() != 4 * numel {
        return Err(CoreError::Data(format!(
            "payload holds {} bytes but shape {shape:?} needs {}",
            payload.len(),
            4 * numel
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn write_tensor_file(path: &Path, tensor: &Tensor) -> Result<()> {
    let bytes = encode_tensor(tensor).map_err(|e| match e {
        CoreError::Data(msg) => CoreError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        CoreError::Data(msg) => CoreError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        let mut expected = b"FT01".to_vec();
        expected.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
    }

    #[test]
    fn rejects_bad_headers_and_lengths() {
        let t = Tensor::zeros(vec![3, 3]);
        let mut bytes = encode_tensor(&t).unwrap();
        let mut bad = bytes.clone();
        bad[..2].copy_from_slice(b"XX");
        assert!(decode_tensor(&bad).is_err());
        bytes.truncate(bytes.len() - 4);
        assert!(decode_tensor(&bytes).is_err());
        bytes.extend_from_slice(&[0; 8]);
        assert!(decode_tensor(&bytes).is_err());
        let mut deep = b"FT01".to_vec();
        deep.extend_from_slice(&5u32.to_le_bytes());
        assert!(decode_tensor(&deep).is_err());
        assert!(decode_tensor(b"FT0").is_err());
    }

    #[test]
    fn refuses_values_outside_single_range() {
        assert!(encode_tensor(&Tensor::vector(vec![1e300])).is_err());
    }
}
