//! Binary checkpoint format.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic     8 bytes  "SPTCKPT\0"
//! version   u32
//! spec id   str      (u16 length + UTF-8)
//! seed      u64
//! epochs    u32
//! accuracy  u8 flag, f64
//! adversary u8 flag, f64 epsilon, f64 step, u64 iterations, u8 random start, u64 seed
//! params    u32 count, then per tensor: str name, u32 ndim, u64 dims, f64 data
//! crc32     u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use spt_core::attack::PerturbationConfig;
use spt_core::model::{ArchitectureId, ClassifierModel, NamedParam, TrainingMeta};
use spt_core::Tensor;

use crate::error::{LabError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPTCKPT\0";
pub const TENSOR_MAGIC: &[u8; 8] = b"SPTTENS\0";
pub const VERSION: u32 = 1;

#[derive(Default)]
pub(crate) struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.0.extend_from_slice(&(s.len() as u16).to_le_bytes());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.u32(crc);
        self.0
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    /// Checks the trailing CRC and the magic, leaving the cursor after the magic.
    fn open(path: &'a Path, bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < magic.len() + 4 {
            return Err(LabError::format(path, "truncated file"));
        }
        if &bytes[..8] != magic {
            return Err(LabError::format(path, "bad magic bytes"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(LabError::format(path, "checksum mismatch (truncated or corrupted file)"));
        }
        Ok(Self { bytes: body, at: 8, path })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LabError::format(self.path, "truncated file"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| LabError::format(self.path, "invalid UTF-8 string"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(LabError::format(self.path, format!("implausible tensor rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| LabError::format(self.path, format!("tensor shape {shape:?} exceeds file size")))?;
        let raw = self.take(len * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(&shape, data).map_err(|e| LabError::format(self.path, e.to_string()))
    }
    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != VERSION {
            return Err(LabError::format(self.path, format!("format version {v}, this build reads {VERSION}")));
        }
        Ok(())
    }
    fn done(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(LabError::format(self.path, "unexpected bytes before checksum"));
        }
        Ok(())
    }
}

pub fn encode(model: &ClassifierModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(VERSION);
    w.str(model.id().as_str());
    let meta = &model.meta;
    w.u64(meta.seed);
    w.u32(meta.epochs);
    w.u8(meta.test_accuracy.is_some() as u8);
    w.f64(meta.test_accuracy.unwrap_or(0.0));
    match meta.adversarial {
        Some(cfg) => {
            w.u8(1);
            w.f64(cfg.epsilon);
            w.f64(cfg.step_size);
            w.u64(cfg.iterations as u64);
            w.u8(cfg.random_start as u8);
            w.u64(cfg.seed);
        }
        None => {
            w.u8(0);
            w.f64(0.0);
            w.f64(0.0);
            w.u64(0);
            w.u8(0);
            w.u64(0);
        }
    }
    w.u32(model.params().len() as u32);
    for p in model.params() {
        w.str(&p.name);
        w.tensor(&p.value);
    }
    w.finish()
}

/// `path` only labels error messages.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<ClassifierModel> {
    let mut r = Reader::open(path, bytes, CHECKPOINT_MAGIC)?;
    r.version()?;
    let id = ArchitectureId::parse(&r.str()?).map_err(|e| LabError::format(path, e.to_string()))?;
    let seed = r.u64()?;
    let epochs = r.u32()?;
    let has_acc = r.u8()? != 0;
    let acc = r.f64()?;
    let has_adv = r.u8()? != 0;
    let adv = PerturbationConfig {
        epsilon: r.f64()?,
        step_size: r.f64()?,
        iterations: r.u64()? as usize,
        random_start: r.u8()? != 0,
        seed: r.u64()?,
    };
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name = r.str()?;
        let value = r.tensor()?;
        params.push(NamedParam { name, value });
    }
    r.done()?;
    let meta = TrainingMeta {
        seed,
        epochs,
        test_accuracy: has_acc.then_some(acc),
        adversarial: has_adv.then_some(adv),
    };
    ClassifierModel::from_parts(id, params, meta).map_err(|e| LabError::format(path, e.to_string()))
}

/// Writes through a temporary file so readers never see a partial checkpoint.
pub fn save(model: &ClassifierModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<ClassifierModel> {
    let bytes = fs::read(path).map_err(LabError::io(path))?;
    decode(path, &bytes)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(TENSOR_MAGIC);
    w.u32(VERSION);
    w.tensor(t);
    w.finish()
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(LabError::io(path))?;
    let mut r = Reader::open(path, &bytes, TENSOR_MAGIC)?;
    r.version()?;
    let t = r.tensor()?;
    r.done()?;
    Ok(t)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(LabError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(LabError::io(path))
}
