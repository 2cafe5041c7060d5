//! IDX-format readers (the MNIST container format): big-endian magic
//! 0x00000803 for 3-d uint8 image tensors, 0x00000801 for 1-d uint8 labels.

use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Idx {
            offset: bytes.len() as u64,
            reason: format!("file truncated while reading {what}"),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Parse an IDX image file into `[0,1]`-scaled features.
/// Returns `(features row-major, n, rows, cols)`.
pub fn read_idx_images(path: &Path) -> Result<(Vec<f64>, usize, usize, usize)> {
    let bytes = std::fs::read(path)?;
    parse_idx_images(&bytes)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize, usize)> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Idx {
            offset: 0,
            reason: format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_u32_be(bytes, 4, "image count")? as usize;
    let rows = read_u32_be(bytes, 8, "row count")? as usize;
    let cols = read_u32_be(bytes, 12, "column count")? as usize;
    let expected = n
        .checked_mul(rows)
        .and_then(|x| x.checked_mul(cols))
        .ok_or_else(|| Error::Idx {
            offset: 4,
            reason: format!("dimension product {n}x{rows}x{cols} overflows"),
        })?;
    let data = &bytes[16.min(bytes.len())..];
    if data.len() != expected {
        return Err(Error::Idx {
            offset: 16 + data.len().min(expected) as u64,
            reason: format!(
                "expected {expected} pixel bytes for {n}x{rows}x{cols}, found {}",
                data.len()
            ),
        });
    }
    let features = data.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((features, n, rows, cols))
}

/// Parse an IDX label file into raw label bytes.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    parse_idx_labels(&bytes)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Idx {
            offset: 0,
            reason: format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let n = read_u32_be(bytes, 4, "label count")? as usize;
    let data = &bytes[8.min(bytes.len())..];
    if data.len() != n {
        return Err(Error::Idx {
            offset: 8 + data.len().min(n) as u64,
            reason: format!("expected {n} label bytes, found {}", data.len()),
        });
    }
    Ok(data.to_vec())
}

/// Serialize images/labels back into IDX bytes (used for fixtures).
pub fn encode_idx_images(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_hand_built_fixture() {
        // 10 images of 28x28, pixel value = image index (scaled by /255).
        let n = 10;
        let pixels: Vec<u8> = (0..n)
            .flat_map(|i| std::iter::repeat(i as u8).take(28 * 28))
            .collect();
        let bytes = encode_idx_images(&pixels, n, 28, 28);
        let (features, pn, rows, cols) = parse_idx_images(&bytes).unwrap();
        assert_eq!((pn, rows, cols), (10, 28, 28));
        assert_eq!(features.len(), 10 * 784);
        assert_eq!(features[0], 0.0);
        assert!((features[9 * 784] - 9.0 / 255.0).abs() < 1e-15);
        assert!(features.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn rejects_bad_magic_with_offset() {
        let bytes = vec![0, 0, 8, 4, 0, 0, 0, 0];
        let err = parse_idx_images(&bytes).unwrap_err();
        match err {
            crate::error::Error::Idx { offset, reason } => {
                assert_eq!(offset, 0);
                assert!(reason.contains("magic"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_truncated_pixel_data() {
        let mut bytes = encode_idx_images(&[0u8; 28 * 28], 1, 28, 28);
        bytes.truncate(bytes.len() - 10);
        let err = parse_idx_images(&bytes).unwrap_err();
        assert!(matches!(err, crate::error::Error::Idx { .. }));
    }

    #[test]
    fn labels_round_trip() {
        let labels = vec![0u8, 1, 2, 1, 0];
        let bytes = encode_idx_labels(&labels);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), labels);
    }
}
