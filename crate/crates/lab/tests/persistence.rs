use std::fs;
use std::path::Path;

use spt_core::attack::PerturbationConfig;
use spt_core::model::{ArchitectureId, ClassifierModel};
use spt_core::spt::{InitScheme, SptParams};
use spt_core::Tensor;
use spt_lab::{checkpoint, sptfile, LabError};

fn probe_images() -> Tensor {
    let data = (0..2 * 784).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
    Tensor::new(&[2, 1, 28, 28], data).unwrap()
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ClassifierModel::build(ArchitectureId::Ca1, 42);
    model.meta.epochs = 3;
    model.meta.test_accuracy = Some(0.987_654_321);
    model.meta.adversarial = Some(PerturbationConfig::pgd_train(5));
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.id(), ArchitectureId::Ca1);
    assert_eq!(back.id().as_str(), "C_a1");
    let x = probe_images();
    assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
    // Saving twice gives identical bytes.
    let again = dir.path().join("m2.ckpt");
    checkpoint::save(&back, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    assert!(!dir.path().join("m.ckpt.partial").exists());
}

fn expect_format(path: &Path, bytes: &[u8], needle: &str) {
    match checkpoint::decode(path, bytes) {
        Err(LabError::Format { message, .. }) => assert!(message.contains(needle), "{message}"),
        other => panic!("expected format error containing {needle:?}, got {:?}", other.map(|m| m.id())),
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let model = ClassifierModel::build(ArchitectureId::Ca3, 1);
    let bytes = checkpoint::encode(&model);
    let p = Path::new("x.ckpt");

    let mut magic = bytes.clone();
    magic[0] = b'X';
    expect_format(p, &magic, "magic");

    expect_format(p, &bytes[..bytes.len() / 2], "checksum");
    expect_format(p, &bytes[..6], "truncated");

    let mut flipped = bytes.clone();
    flipped[1000] ^= 1;
    expect_format(p, &flipped, "checksum");

    // A well-formed file of another version.
    let mut future = bytes[..bytes.len() - 4].to_vec();
    future[8..12].copy_from_slice(&2u32.to_le_bytes());
    let crc = crc32(&future);
    future.extend_from_slice(&crc.to_le_bytes());
    expect_format(p, &future, "version 2");
}

/// Bitwise CRC-32 (IEEE), independent of the library's implementation.
fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

#[test]
fn checkpoint_checksum_is_standard_crc32() {
    let bytes = checkpoint::encode(&ClassifierModel::build(ArchitectureId::Ca3, 2));
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    assert_eq!(u32::from_le_bytes(tail.try_into().unwrap()), crc32(body));
    assert_eq!(&body[..8], b"SPTCKPT\0");
}

#[test]
fn tensor_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let t = probe_images();
    let path = dir.path().join("t.bin");
    checkpoint::save_tensor(&t, &path).unwrap();
    assert_eq!(checkpoint::load_tensor(&path).unwrap(), t);
}

#[test]
fn spt_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = SptParams::with_defaults(0.6, 77);
    p.weights[3] = 0.1 + 0.2;
    p.weights[4] = -1e-300;
    let path = dir.path().join("a.spt");
    sptfile::save(&p, &path).unwrap();
    let back = sptfile::load(&path).unwrap();
    assert_eq!(back, p);
    for (a, b) in back.weights.iter().zip(&p.weights) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("spt-params 1\nscheme scaled-normal:0.5\ninit-seed 77\nalpha 0.6\n"), "{text}");
}

#[test]
fn spt_file_errors() {
    let p = Path::new("bad.spt");
    let good = sptfile::encode(&SptParams::init(&[1.0, 2.0], 0.0, InitScheme::Zeros, 1).unwrap());
    assert!(sptfile::decode(p, &good).is_ok());
    for (from, to) in [
        ("spt-params 1", "spt-params 9"),
        ("weights 0.0 0.0", "weights 0.0"),
        ("weights 0.0 0.0", "weights 0.0 zero"),
        ("scheme zeros", "scheme uniform"),
        ("alpha 0.0", "alpha -1.0"),
        ("init-seed 1", "seed 1"),
    ] {
        let broken = good.replace(from, to);
        assert_ne!(broken, good, "pattern {from:?} not found in {good}");
        assert!(sptfile::decode(p, &broken).is_err(), "{to}");
    }
    assert!(sptfile::decode(p, &format!("{good}extra line\n")).is_err());
}
