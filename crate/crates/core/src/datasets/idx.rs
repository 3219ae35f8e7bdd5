//! IDX files (the MNIST distribution format).
//!
//! Layout: 4-byte big-endian magic, one big-endian u32 per dimension, then the
//! unsigned-byte payload. Images use magic `0x00000803` (3 dims), labels
//! `0x00000801` (1 dim).

use std::io;
use std::path::Path;

use super::LabeledImages;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn truncated(what: &str) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("truncated IDX {what}"),
    ))
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(what))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = read_u32(bytes, 0, what)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "{what}: magic {magic:#010x}, expected {expected:#010x}"
        )));
    }
    Ok(())
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IMAGES_MAGIC, "image header")?;
    let n = read_u32(bytes, 4, "image header")? as usize;
    let rows = read_u32(bytes, 8, "image header")? as usize;
    let cols = read_u32(bytes, 12, "image header")? as usize;
    let len = n * rows * cols;
    let payload = bytes.get(16..16 + len).ok_or_else(|| truncated("image payload"))?;
    Ok((n, rows, cols, payload))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, LABELS_MAGIC, "label header")?;
    let n = read_u32(bytes, 4, "label header")? as usize;
    bytes.get(8..8 + n).ok_or_else(|| truncated("label payload"))
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
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

/// Reads an image/label file pair; pixels are scaled by `1/255`. The class
/// count is `max(label) + 1`, at least 2.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImages> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = std::fs::read(images_path).map_err(Error::at_path(images_path))?;
    let label_bytes = std::fs::read(labels_path).map_err(Error::at_path(labels_path))?;
    from_idx_bytes(&image_bytes, &label_bytes)
}

pub(crate) fn from_idx_bytes(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledImages> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!("{n} images but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Consistency("IDX file holds no images".into()));
    }
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Tensor::new(vec![n, rows, cols], data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    LabeledImages::new(images, labels, classes)
}
