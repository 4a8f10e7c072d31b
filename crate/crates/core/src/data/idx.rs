//! Big-endian IDX encoding of unsigned-byte image and label files.

use alloc::format;
use alloc::vec::Vec;

use super::Dataset;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Parsed header and payload of an image file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdxImages<'a> {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: &'a [u8],
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: header truncated")))
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages<'_>> {
    let magic = read_u32(bytes, 0, "image file")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image file: magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, "image file")? as usize;
    let rows = read_u32(bytes, 8, "image file")? as usize;
    let cols = read_u32(bytes, 12, "image file")? as usize;
    let need = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or_else(|| Error::Format("image file: dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "image file: payload truncated ({} of {need} bytes)",
            payload.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: &payload[..need],
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "label file")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "label file: magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, "label file")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "label file: payload truncated ({} of {count} bytes)",
            payload.len()
        )));
    }
    Ok(&payload[..count])
}

/// Builds a dataset with pixels scaled to `[0, 1]` and images flattened
/// row-major. The class count is one past the largest label.
pub fn dataset_from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let images = parse_images(image_bytes)?;
    let labels = parse_labels(label_bytes)?;
    if images.count != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    if images.rows * images.cols == 0 {
        return Err(Error::Format("image file: zero-sized images".into()));
    }
    let inputs = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(inputs, labels, images.rows * images.cols, num_classes)
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(
        pixels.len() % (rows * cols),
        0,
        "pixels do not form whole images"
    );
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Inverse of [`dataset_from_idx`] for datasets whose values are multiples
/// of 1/255 and whose labels fit in a byte.
pub fn dataset_to_idx(data: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != data.input_dim() {
        return Err(Error::invalid("rows × cols must equal the input dimension"));
    }
    let mut pixels = Vec::with_capacity(data.inputs().len());
    for &x in data.inputs() {
        let scaled = libm::round(x * 255.0);
        if !(0.0..=255.0).contains(&scaled) {
            return Err(Error::invalid(format!("value {x} is outside [0, 1]")));
        }
        pixels.push(scaled as u8);
    }
    let mut labels = Vec::with_capacity(data.len());
    for &y in data.labels() {
        labels.push(u8::try_from(y).map_err(|_| Error::invalid("label does not fit in a byte"))?);
    }
    Ok((encode_images(rows, cols, &pixels), encode_labels(&labels)))
}
