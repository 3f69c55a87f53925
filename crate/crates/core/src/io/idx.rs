//! IDX files (the MNIST container): big-endian magic, dimension sizes, then
//! unsigned bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(bytes.len() as u64, format!("{what}: file ends inside the header")))
}

/// Parses an image file into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(0, format!("images: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("images: {n} images of {rows}×{cols} need {need} bytes, found {}", body.len()),
        ));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(0, format!("labels: magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            bytes.len() as u64,
            format!("labels: {n} labels declared, {} present", body.len()),
        ));
    }
    Ok(&body[..n])
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from IDX bytes. Pixels are scaled to `[0, 1]`, then
/// normalized with `norm` if given or the file's own statistics otherwise.
pub fn dataset_from_idx(images: &[u8], labels: &[u8], norm: Option<(Vec<f32>, Vec<f32>)>) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != n {
        return Err(Error::format(
            4,
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    if rows != cols {
        return Err(Error::format(8, format!("images must be square, got {rows}×{cols}")));
    }
    let raw = Tensor::new(
        vec![n, 1, rows, cols],
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )?;
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let names = (0..classes).map(|c| c.to_string()).collect();
    let labels = labels.iter().map(|&l| l as usize).collect();
    match norm {
        Some((mean, std)) => Dataset::with_normalization(raw, labels, names, mean, std),
        None => Dataset::from_raw(raw, labels, names),
    }
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    dataset_from_idx(&images, &labels, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_written_fixture() {
        // four 2×2 images, written byte by byte
        let images: Vec<u8> = vec![
            0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 2, 0, 0, 0, 2, //
            0, 255, 255, 0, //
            255, 0, 0, 255, //
            0, 0, 0, 0, //
            255, 255, 255, 255,
        ];
        let labels: Vec<u8> = vec![0, 0, 8, 1, 0, 0, 0, 4, 3, 1, 0, 2];
        let ds = dataset_from_idx(&images, &labels, None).unwrap();
        assert_eq!(ds.images.shape(), &[4, 1, 2, 2]);
        assert_eq!(ds.labels, vec![3, 1, 0, 2]);
        assert_eq!(ds.num_classes(), 4);
        let raw = ds.raw_image(0);
        assert!((raw[1] - 1.0).abs() < 1e-6 && raw[0].abs() < 1e-6);
        assert_eq!(encode_images(2, 2, &images[16..]), images);
        assert_eq!(encode_labels(&labels[8..]), labels);
    }

    #[test]
    fn count_mismatch_and_bad_input() {
        let images = encode_images(2, 2, &[0; 12]);
        let labels = encode_labels(&[0, 1]);
        let err = dataset_from_idx(&images, &labels, None).unwrap_err();
        assert!(err.to_string().contains("3 images but 2 labels"));
        assert!(dataset_from_idx(&[], &labels, None).is_err());
        assert!(dataset_from_idx(&labels, &images, None).is_err());
        let short = &images[..images.len() - 1];
        assert!(dataset_from_idx(short, &encode_labels(&[0, 1, 2]), None).is_err());
    }
}
