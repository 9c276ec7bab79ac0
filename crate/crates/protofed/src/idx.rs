//! IDX-format file parsing (the standard MNIST layout): big-endian magic and
//! dimension header followed by unsigned byte data.

use std::fmt;
use std::fs;
use std::path::Path;

use protofed_core::data::LabeledPool;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxError {
    BadMagic { offset: usize, found: u32, expected: u32 },
    Truncated { offset: usize, needed: usize },
    CountMismatch { images: usize, labels: usize },
    Io(String),
}

impl fmt::Display for IdxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdxError::BadMagic {
                offset,
                found,
                expected,
            } => write!(
                f,
                "bad magic 0x{found:08x} at byte {offset} (expected 0x{expected:08x})"
            ),
            IdxError::Truncated { offset, needed } => {
                write!(f, "file truncated at byte {offset}: {needed} more bytes needed")
            }
            IdxError::CountMismatch { images, labels } => {
                write!(f, "{images} images but {labels} labels")
            }
            IdxError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for IdxError {}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            needed: end - bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parse an IDX image file: returns `(count, rows, cols)` and the raw pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            offset: 0,
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let data = &bytes[16..];
    if data.len() < need {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            needed: need - data.len(),
        });
    }
    Ok((n, rows, cols, &data[..need]))
}

/// Parse an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            offset: 0,
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n = read_u32(bytes, 4)? as usize;
    let data = &bytes[8..];
    if data.len() < n {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            needed: n - data.len(),
        });
    }
    Ok(&data[..n])
}

/// Load the first `max_n` samples from an IDX image/label pair, pixels
/// scaled to [0, 1] and flattened row-major.
pub fn load_idx(images: &Path, labels: &Path, max_n: usize) -> Result<LabeledPool, IdxError> {
    let img_bytes = fs::read(images).map_err(|e| IdxError::Io(format!("{}: {e}", images.display())))?;
    let lbl_bytes = fs::read(labels).map_err(|e| IdxError::Io(format!("{}: {e}", labels.display())))?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let label_data = parse_idx_labels(&lbl_bytes)?;
    if n != label_data.len() {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: label_data.len(),
        });
    }
    let take = max_n.min(n);
    let dim = rows * cols;
    let mut features = Vec::with_capacity(take);
    let mut out_labels = Vec::with_capacity(take);
    for i in 0..take {
        let px = &pixels[i * dim..(i + 1) * dim];
        features.push(px.iter().map(|&b| b as f64 / 255.0).collect());
        out_labels.push(label_data[i] as usize);
    }
    let n_classes = out_labels.iter().max().map(|m| m + 1).unwrap_or(0);
    Ok(LabeledPool {
        features,
        labels: out_labels,
        n_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-built two-image fixture: 28x28 images with recognizable bytes.
    pub fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        for i in 0..2 * 28 * 28 {
            img.push((i % 256) as u8);
        }
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[3, 7]);
        (img, lbl)
    }

    #[test]
    fn parses_header_dimensions() {
        let (img, _) = fixture();
        let (n, rows, cols, _) = parse_idx_images(&img).unwrap();
        assert_eq!((n, rows, cols), (2, 28, 28));
    }

    #[test]
    fn bad_magic_carries_offset() {
        let mut img = fixture().0;
        img[3] = 0x99;
        match parse_idx_images(&img) {
            Err(IdxError::BadMagic { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_pixels_carry_offset() {
        let (img, _) = fixture();
        match parse_idx_images(&img[..100]) {
            Err(IdxError::Truncated { offset: 100, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trips_pixel_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture();
        let ip = dir.path().join("imgs.idx");
        let lp = dir.path().join("lbls.idx");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lbl).unwrap();
        let pool = load_idx(&ip, &lp, 10).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.labels, vec![3, 7]);
        for (i, f) in pool.features[0].iter().enumerate() {
            assert_eq!(*f, (i % 256) as f64 / 255.0);
        }
    }

    #[test]
    fn max_n_zero_gives_empty_pool() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture();
        let ip = dir.path().join("i.idx");
        let lp = dir.path().join("l.idx");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lbl).unwrap();
        assert!(load_idx(&ip, &lp, 0).unwrap().is_empty());
    }

    #[test]
    fn label_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (img, mut lbl) = fixture();
        lbl[7] = 3; // claims 3 labels, provides 2
        let ip = dir.path().join("i.idx");
        let lp = dir.path().join("l.idx");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lbl).unwrap();
        match load_idx(&ip, &lp, 10) {
            Err(IdxError::Truncated { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        // A consistent-but-short label file reports the count mismatch.
        let mut lbl2 = Vec::new();
        lbl2.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lbl2.extend_from_slice(&1u32.to_be_bytes());
        lbl2.push(5);
        std::fs::write(&lp, &lbl2).unwrap();
        match load_idx(&ip, &lp, 10) {
            Err(IdxError::CountMismatch { images: 2, labels: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
