//! 8-bit grayscale image export (PGM and PNG) and tile grids.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spt_core::{Tensor, IMAGE_SIDE};

use crate::checkpoint::write_atomic;
use crate::config::ImageFormat;
use crate::error::{LabError, Result};

/// `round(255 x)` for `x` in `[0, 1]`.
pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray8 {
    pub fn from_unit(values: &[f64], width: usize) -> Self {
        Self {
            width,
            height: values.len() / width,
            pixels: values.iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&b| f64::from(b) / 255.0).collect()
    }
}

fn encode_pgm(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<Gray8> {
    let bad = |m: &str| LabError::format(path, m.to_string());
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if at < bytes.len() && bytes[at] == b'#' {
            while at < bytes.len() && bytes[at] != b'\n' {
                at += 1;
            }
            continue;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("non-ASCII PGM header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("only binary 8-bit PGM (P5, maxval 255) is supported"));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM dimension"));
    let (width, height) = (dim(fields[1])?, dim(fields[2])?);
    let pixels = bytes.get(at + 1..).unwrap_or_default();
    if pixels.len() != width * height {
        return Err(bad("PGM payload size does not match its header"));
    }
    Ok(Gray8 { width, height, pixels: pixels.to_vec() })
}

fn encode_png(path: &Path, img: &Gray8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| LabError::format(path, e.to_string());
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&img.pixels).map_err(png_err)?;
    w.finish().map_err(png_err)?;
    Ok(out)
}

fn decode_png(path: &Path) -> Result<Gray8> {
    let file = File::open(path).map_err(LabError::io(path))?;
    let png_err = |e: png::DecodingError| LabError::format(path, e.to_string());
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(LabError::format(path, "expected an 8-bit grayscale PNG"));
    }
    buf.truncate(info.buffer_size());
    Ok(Gray8 {
        width: info.width as usize,
        height: info.height as usize,
        pixels: buf,
    })
}

pub fn write_image(img: &Gray8, path: &Path, format: ImageFormat) -> Result<()> {
    let bytes = match format {
        ImageFormat::Pgm => encode_pgm(img),
        ImageFormat::Png => encode_png(path, img)?,
    };
    write_atomic(path, &bytes)
}

/// Reads a PGM or PNG by extension.
pub fn read_image(path: &Path) -> Result<Gray8> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => decode_pgm(path, &fs::read(path).map_err(LabError::io(path))?),
        Some("png") => decode_png(path),
        _ => Err(LabError::format(path, "unknown image extension")),
    }
}

/// One tile of an exported grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub file: String,
    pub row: usize,
    pub column: usize,
    pub source_index: usize,
    pub model: String,
    pub predicted_label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub grid: String,
    pub rows: Vec<String>,
    pub source_indices: Vec<usize>,
    pub tiles: Vec<Tile>,
}

/// A row of a grid: a label plus one image per column.
pub struct GridRow<'a> {
    pub label: String,
    pub images: &'a Tensor,
    pub predictions: Option<Vec<u8>>,
}

const GAP: usize = 2;

/// Writes every tile, the assembled grid and `manifest.json` into `dir`.
/// Row `r`, column `c` shows image `c` of row `r`, taken from test index
/// `source_indices[c]`.
pub fn export_grid(
    dir: &Path,
    name: &str,
    rows: &[GridRow<'_>],
    source_indices: &[usize],
    format: ImageFormat,
) -> Result<Manifest> {
    let ext = format.extension();
    let cols = source_indices.len();
    let side = IMAGE_SIDE;
    let width = cols * side + cols.saturating_sub(1) * GAP;
    let height = rows.len() * side + rows.len().saturating_sub(1) * GAP;
    let mut grid = Gray8 { width, height, pixels: vec![255; width * height] };
    let mut tiles = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        if row.images.shape()[0] != cols {
            return Err(LabError::Config(format!(
                "grid row {} has {} images for {cols} columns",
                row.label,
                row.images.shape()[0]
            )));
        }
        for (c, &source) in source_indices.iter().enumerate() {
            let tile = Gray8::from_unit(row.images.row(c), side);
            let file = format!("tiles/{name}-{}-{source}.{ext}", row.label);
            write_image(&tile, &dir.join(&file), format)?;
            for y in 0..side {
                let dst = (r * (side + GAP) + y) * width + c * (side + GAP);
                grid.pixels[dst..dst + side].copy_from_slice(&tile.pixels[y * side..(y + 1) * side]);
            }
            tiles.push(Tile {
                file,
                row: r,
                column: c,
                source_index: source,
                model: row.label.clone(),
                predicted_label: row.predictions.as_ref().map(|p| p[c]),
            });
        }
    }
    let grid_file = format!("{name}.{ext}");
    write_image(&grid, &dir.join(&grid_file), format)?;
    let manifest = Manifest {
        grid: grid_file,
        rows: rows.iter().map(|r| r.label.clone()).collect(),
        source_indices: source_indices.to_vec(),
        tiles,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&dir.join(format!("{name}-manifest.json")), text.as_bytes())?;
    Ok(manifest)
}

pub fn tile_path(dir: &Path, tile: &Tile) -> PathBuf {
    dir.join(&tile.file)
}

/// Writes a single image to `path` (flattened `[1, 28, 28]` row).
pub fn write_single(values: &[f64], path: &Path, format: ImageFormat) -> Result<()> {
    write_image(&Gray8::from_unit(values, IMAGE_SIDE), path, format)
}

