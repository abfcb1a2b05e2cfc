//! IDX container reader for the MNIST-family distributions.
//!
//! Files may be raw or gzip-compressed; compression is detected from the
//! first two bytes rather than the file name.

use std::env;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use spt_core::data::{Dataset, DatasetName, Split};
use spt_core::{Tensor, IMAGE_SIDE};

use crate::error::{LabError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const DATA_DIR_ENV: &str = "SPT_DATA_DIR";

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Reads a whole file, inflating it when it starts with the gzip magic.
fn read_payload(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(LabError::io(path))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| LabError::format(path, format!("corrupt gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an IDX payload with the given magic and number of dimensions,
/// returning the dimensions and the data bytes.
fn parse(path: &Path, bytes: &[u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(LabError::format(path, format!("file is {} bytes, shorter than its header", bytes.len())));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(LabError::format(
            path,
            format!("magic number {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let dims: Vec<usize> = (0..ndims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() < expected {
        return Err(LabError::format(
            path,
            format!("truncated payload: {} of {expected} data bytes", body.len()),
        ));
    }
    if body.len() > expected {
        return Err(LabError::format(
            path,
            format!("{} trailing bytes after {expected} data bytes", body.len() - expected),
        ));
    }
    Ok((dims, body.to_vec()))
}

pub fn read_images(path: &Path) -> Result<(usize, Vec<u8>)> {
    let (dims, data) = parse(path, &read_payload(path)?, IMAGES_MAGIC, 3)?;
    if dims[1] != IMAGE_SIDE || dims[2] != IMAGE_SIDE {
        return Err(LabError::format(
            path,
            format!("images are {}x{}, expected {IMAGE_SIDE}x{IMAGE_SIDE}", dims[1], dims[2]),
        ));
    }
    Ok((dims[0], data))
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let (_, data) = parse(path, &read_payload(path)?, LABELS_MAGIC, 1)?;
    if let Some(pos) = data.iter().position(|&l| l > 9) {
        return Err(LabError::format(path, format!("label {} at index {pos} is outside 0..9", data[pos])));
    }
    Ok(data)
}

/// Loads an image/label file pair; pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path, name: DatasetName, split: Split) -> Result<Dataset> {
    let (count, pixels) = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if labels.len() != count {
        return Err(LabError::format(
            labels_path,
            format!("{} labels for {count} images in {}", labels.len(), images_path.display()),
        ));
    }
    let data = pixels.into_iter().map(|b| f64::from(b) / 255.0).collect();
    let images = Tensor::new(&[count, 1, IMAGE_SIDE, IMAGE_SIDE], data)?;
    Ok(Dataset::new(name, split, images, labels)?)
}

fn stem(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "t10k",
    }
}

/// `<dir>/<stem>-<kind>`, preferring the raw file and falling back to `.gz`.
fn locate(dir: &Path, split: Split, kind: &str) -> Option<PathBuf> {
    let base = dir.join(format!("{}-{kind}", stem(split)));
    let gz = base.with_file_name(format!("{}-{kind}.gz", stem(split)));
    [base, gz].into_iter().find(|p| p.is_file())
}

/// Loads one split from a directory laid out like the original distribution.
pub fn load_split(dir: &Path, name: DatasetName, split: Split) -> Result<Dataset> {
    let images = locate(dir, split, "images-idx3-ubyte");
    let labels = locate(dir, split, "labels-idx1-ubyte");
    match (images, labels) {
        (Some(i), Some(l)) => load_idx(&i, &l, name, split),
        _ => Err(LabError::MissingData {
            dir: dir.to_path_buf(),
            expected: ["images-idx3-ubyte", "labels-idx1-ubyte"]
                .iter()
                .map(|k| format!("{}-{k}[.gz]", stem(split)))
                .collect(),
        }),
    }
}

/// Directory holding `name`'s files: an explicit path wins, then
/// `$SPT_DATA_DIR/<name>`, then `data/<name>` under the working directory.
pub fn resolve_data_dir(explicit: Option<&Path>, name: DatasetName) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    let root = env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"));
    root.join(name.as_str())
}

/// Train and test splits, each optionally cut to its first `subset` examples.
pub fn load_dataset(dir: &Path, name: DatasetName, subset: Option<usize>) -> Result<(Dataset, Dataset)> {
    let cut = |ds: Dataset| match subset {
        Some(k) if k < ds.len() => ds.subset(k).map_err(LabError::from),
        _ => Ok(ds),
    };
    let train = cut(load_split(dir, name, Split::Train)?)?;
    let test = cut(load_split(dir, name, Split::Test)?)?;
    Ok((train, test))
}

/// Serializes a split back to raw IDX bytes (images, labels), quantizing
/// pixels with `round(255 x)`.
pub fn encode(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let n = ds.len();
    let mut images = Vec::with_capacity(16 + n * IMAGE_SIDE * IMAGE_SIDE);
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [n, IMAGE_SIDE, IMAGE_SIDE] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(ds.images().data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend_from_slice(ds.labels());
    (images, labels)
}
