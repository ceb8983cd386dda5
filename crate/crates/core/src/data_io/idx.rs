//! IDX files as used by MNIST: big-endian `u32` magic and extents followed
//! by unsigned bytes.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: header truncated at byte {at}")))
}

fn body<'a>(bytes: &'a [u8], offset: usize, expected: usize, what: &str) -> Result<&'a [u8]> {
    let body = &bytes[offset..];
    if body.len() != expected {
        return Err(Error::Format(format!(
            "{what}: header announces {expected} data bytes, file holds {}",
            body.len()
        )));
    }
    Ok(body)
}

/// Returns `(count, rows, cols, pixel bytes)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("images: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("images: extents overflow".into()))?;
    Ok((n, rows, cols, body(bytes, 16, expected, "images")?))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("labels: magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4, "labels")? as usize;
    body(bytes, 8, n, "labels")
}

/// Loads an image/label file pair; pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: &str) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!("{n} images but {} labels", labels.len())));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let pixels = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new([1, rows, cols], pixels, labels, classes, split)
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
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

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let i = dir.join("img.idx");
        let l = dir.join("lbl.idx");
        std::fs::write(&i, images).unwrap();
        std::fs::write(&l, labels).unwrap();
        (i, l)
    }

    #[test]
    fn two_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let px = [0u8, 255, 51, 102, 10, 20, 30, 40];
        let (i, l) = write_pair(dir.path(), &encode_idx_images(2, 2, 2, &px), &encode_idx_labels(&[3, 7]));
        let d = load_idx(&i, &l, "train").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.image_shape, [1, 2, 2]);
        assert_eq!(d.pixels[..4], [0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.pixels[4], 10.0 / 255.0);
        assert_eq!(d.labels, vec![3, 7]);
        assert_eq!(d.num_classes, 8);
    }

    #[test]
    fn header_bytes_are_big_endian() {
        let b = encode_idx_images(2, 28, 28, &[]);
        assert_eq!(&b[..8], &[0, 0, 8, 3, 0, 0, 0, 2]);
        assert_eq!(&b[8..12], &[0, 0, 0, 28]);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let full = encode_idx_images(2, 2, 2, &[1; 8]);
        for cut in [3, 10, 20] {
            assert!(matches!(parse_idx_images(&full[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = write_pair(dir.path(), &full[..20], &encode_idx_labels(&[0, 1]));
        assert!(matches!(load_idx(&i, &l, "t"), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let labels = encode_idx_labels(&[1, 2]);
        assert!(matches!(parse_idx_images(&labels), Err(Error::Format(_))));
        let images = encode_idx_images(1, 1, 1, &[0]);
        assert!(matches!(parse_idx_labels(&images), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = write_pair(dir.path(), &encode_idx_images(2, 1, 1, &[0, 0]), &encode_idx_labels(&[1]));
        assert!(matches!(load_idx(&i, &l, "t"), Err(Error::Consistency(_))));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut b = encode_idx_labels(&[1]);
        b.push(0);
        assert!(matches!(parse_idx_labels(&b), Err(Error::Format(_))));
    }
}
