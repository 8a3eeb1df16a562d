//! MSRF: a minimal little-endian raster container.
//!
//! ```text
//! 0..4   magic "MSRF"
//! 4      version (1)
//! 5      dtype (0 = u8, 1 = u16, 2 = f32)
//! 6..8   reserved, zero
//! 8..12  width  u32
//! 12..16 height u32
//! 16..20 bands  u32
//! 20..   samples, band-sequential, rows top to bottom
//! ```

use super::{MultiBandImage, RasterError, Result, SampleType};
use std::path::Path;

pub const MSRF_MAGIC: [u8; 4] = *b"MSRF";
pub const MSRF_HEADER_LEN: usize = 20;
const MSRF_VERSION: u8 = 1;

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn encode_msrf(img: &MultiBandImage) -> Vec<u8> {
    let dtype = img.dtype();
    let mut out = Vec::with_capacity(MSRF_HEADER_LEN + img.data().len() * dtype.byte_width());
    out.extend_from_slice(&MSRF_MAGIC);
    out.push(MSRF_VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&[0, 0]);
    for dim in [img.width(), img.height(), img.bands()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    match dtype {
        SampleType::U8 => out.extend(img.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8)),
        SampleType::U16 => {
            for &v in img.data() {
                let q = v.round().clamp(0.0, u16::MAX as f64) as u16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
        SampleType::F32 => {
            for &v in img.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_msrf(bytes: &[u8]) -> Result<MultiBandImage> {
    if bytes.len() < 4 {
        return Err(RasterError::TruncatedPayload {
            offset: 0,
            expected: MSRF_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[0..4] != MSRF_MAGIC {
        return Err(RasterError::BadMagic {
            found: bytes[0..4].try_into().unwrap(),
        });
    }
    if bytes.len() < MSRF_HEADER_LEN {
        return Err(RasterError::TruncatedPayload {
            offset: bytes.len(),
            expected: MSRF_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[4] != MSRF_VERSION {
        return Err(RasterError::UnsupportedVersion { version: bytes[4] });
    }
    let dtype = SampleType::from_code(bytes[5]).ok_or(RasterError::UnsupportedDtype { code: bytes[5] })?;
    let width = read_u32(bytes, 8) as usize;
    let height = read_u32(bytes, 12) as usize;
    let bands = read_u32(bytes, 16) as usize;
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(bands))
        .ok_or(RasterError::EmptyImage { width, height, bands })?;
    let expected = MSRF_HEADER_LEN + count * dtype.byte_width();
    if bytes.len() < expected {
        return Err(RasterError::TruncatedPayload {
            offset: bytes.len(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(RasterError::TrailingBytes { offset: expected });
    }
    let payload = &bytes[MSRF_HEADER_LEN..];
    let data: Vec<f64> = match dtype {
        SampleType::U8 => payload.iter().map(|&v| v as f64).collect(),
        SampleType::U16 => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        SampleType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let img = MultiBandImage::new(width, height, bands, data)?;
    Ok(img.with_value_range(0.0, dtype.nominal_max()).with_dtype(dtype))
}

pub fn load_msrf(path: impl AsRef<Path>) -> Result<MultiBandImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| RasterError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    decode_msrf(&bytes)
}

pub fn save_msrf(img: &MultiBandImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::io::write_atomic(path, &encode_msrf(img)).map_err(|source| RasterError::IoFailure {
        path: path.display().to_string(),
        source,
    })
}
