//! Raw little-endian `f32` arrays.

use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_f32_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Decodes a whole buffer; its length must be a multiple of four.
pub fn decode_f32_le(bytes: &[u8], file: &Path) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::parse(
            file,
            bytes.len() - bytes.len() % 4,
            format!("length {} is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_blob(path: &Path) -> Result<Vec<f32>> {
    decode_f32_le(&super::read_file(path)?, path)
}

pub fn write_blob(path: &Path, values: &[f32]) -> Result<()> {
    super::write_atomic(path, &encode_f32_le(values))
}
