#![allow(dead_code)]

use std::fs;
use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;

pub fn idx_images(count: usize, pixel: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 3];
    for d in [count as u32, 28, 28] {
        out.extend_from_slice(&d.to_be_bytes());
    }
    for n in 0..count {
        for p in 0..784 {
            out.push(pixel(n, p));
        }
    }
    out
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

/// Digit-like synthetic images: a label-dependent bar on a black background
/// with a few gray levels.
pub fn synthetic_pixel(label: u8, n: usize, p: usize) -> u8 {
    let (r, c) = (p / 28, p % 28);
    let l = label as usize;
    let on = (r >= 4 + l && r < 8 + l && (6..22).contains(&c)) || (c >= 4 + 2 * l && c < 7 + 2 * l && (4..24).contains(&r));
    if on {
        [255, 200, 128][(n + r) % 3]
    } else {
        0
    }
}

/// Writes train/test splits of synthetic data in the standard layout.
pub fn write_synthetic(dir: &Path, train: usize, test: usize) {
    fs::create_dir_all(dir).unwrap();
    for (stem, count, offset) in [("train", train, 0), ("t10k", test, 7)] {
        let labels: Vec<u8> = (0..count).map(|i| ((i + offset) % 10) as u8).collect();
        let imgs = idx_images(count, |n, p| synthetic_pixel(labels[n], n, p));
        fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), imgs).unwrap();
        fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), idx_labels(&labels)).unwrap();
    }
}
