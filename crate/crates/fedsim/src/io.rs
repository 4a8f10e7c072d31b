//! Files on disk: raw IDX datasets and the parameter binary.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use fedsim_core::data::idx;
use fedsim_core::data::Dataset;
use fedsim_core::math::{Layout, LayoutEntry, ParamVec};
use serde::{Deserialize, Serialize};

use crate::error::{FedsimError, Result};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

const MODEL_FORMAT: &str = "fedsim-params";
const MODEL_VERSION: u32 = 1;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| FedsimError::io(path, e))
}

/// Loads one image/label file pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let image_bytes = read(images)?;
    let label_bytes = read(labels)?;
    idx::dataset_from_idx(&image_bytes, &label_bytes).map_err(|e| {
        FedsimError::Format(format!("{} / {}: {e}", images.display(), labels.display()))
    })
}

/// Train and test splits from a directory with the four standard MNIST
/// file names.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    if train.input_dim() != test.input_dim() {
        return Err(FedsimError::Format(format!(
            "train images have {} pixels, test images {}",
            train.input_dim(),
            test.input_dim()
        )));
    }
    Ok((train, test))
}

/// Writes `data` as an IDX pair. Inputs must already be `k/255` values.
pub fn write_idx(
    data: &Dataset,
    rows: usize,
    cols: usize,
    images: &Path,
    labels: &Path,
) -> Result<()> {
    let (image_bytes, label_bytes) = idx::dataset_to_idx(data, rows, cols)?;
    fs::write(images, image_bytes).map_err(|e| FedsimError::io(images, e))?;
    fs::write(labels, label_bytes).map_err(|e| FedsimError::io(labels, e))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    dtype: String,
    len: usize,
    layout: Vec<LayoutJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayoutJson {
    name: String,
    shape: Vec<usize>,
}

/// One JSON header line describing the layout, then the values as
/// little-endian `f64`.
pub fn write_model<W: Write>(params: &ParamVec, mut out: W) -> std::io::Result<()> {
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        dtype: "f64le".into(),
        len: params.len(),
        layout: params
            .layout()
            .entries()
            .iter()
            .map(|e| LayoutJson {
                name: e.name.clone(),
                shape: e.shape.clone(),
            })
            .collect(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for v in params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    out.flush()
}

pub fn read_model<R: Read>(input: R) -> Result<ParamVec> {
    let mut reader = BufReader::new(input);
    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .map_err(|e| FedsimError::Format(format!("model header: {e}")))?;
    let header: ModelHeader = serde_json::from_slice(&line)
        .map_err(|e| FedsimError::Format(format!("model header: {e}")))?;
    if header.format != MODEL_FORMAT || header.version != MODEL_VERSION || header.dtype != "f64le" {
        return Err(FedsimError::Format(format!(
            "unsupported model file {} v{} ({})",
            header.format, header.version, header.dtype
        )));
    }
    let mut body = Vec::new();
    reader
        .read_to_end(&mut body)
        .map_err(|e| FedsimError::Format(format!("model body: {e}")))?;
    if body.len() != header.len * 8 {
        return Err(FedsimError::Format(format!(
            "model body has {} bytes, header promises {} values",
            body.len(),
            header.len
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let layout = Layout::new(
        header
            .layout
            .into_iter()
            .map(|e| LayoutEntry::new(e.name, e.shape))
            .collect(),
    );
    Ok(ParamVec::new(values, layout)?)
}

pub fn save_model(params: &ParamVec, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| FedsimError::io(path, e))?;
    write_model(params, std::io::BufWriter::new(file)).map_err(|e| FedsimError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ParamVec> {
    let file = fs::File::open(path).map_err(|e| FedsimError::io(path, e))?;
    read_model(file)
}
