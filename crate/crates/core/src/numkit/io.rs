//! PVT1 tensor files and parameter checkpoints.
//!
//! PVT1 layout: magic `PVT1`, `u32` rank, `rank × u64` dims, then the fp64
//! payload in row-major order. All integers and floats are little-endian.
//!
//! A checkpoint is a directory holding one PVT1 file per parameter plus
//! `index.txt`, whose lines are `name<TAB>file`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"PVT1";
pub const CHECKPOINT_INDEX: &str = "index.txt";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Little-endian cursor that reports failures with their byte offset.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
    format: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path, format: &'static str) -> Self {
        Reader {
            bytes,
            pos: 0,
            path,
            format,
        }
    }

    pub(crate) fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            format: self.format,
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let start = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            self.pos = start;
            return Err(self.fail("non-finite value"));
        }
        Ok(v)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        if self.take(4)? != expected {
            self.pos = 0;
            return Err(self.fail(format!(
                "bad magic, expected {:?}",
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader::new(bytes, path, "PVT1");
    r.magic(TENSOR_MAGIC)?;
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        let d = r.u64()?;
        if d == 0 {
            return Err(r.fail("zero extent"));
        }
        shape.push(d as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.fail("element count overflows"))?;
    if n.checked_mul(8).is_none_or(|b| b > bytes.len()) {
        return Err(r.fail(format!("payload of {n} values exceeds file size")));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64()?);
    }
    r.finish()?;
    Ok(Tensor::from_raw(shape, data))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Writes every parameter of `store` into `dir`.
pub fn save_checkpoint(store: &ParamStore, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (id, p) in store.iter() {
        let file = format!("p{:04}.pvt", id.index());
        write_tensor(dir.join(&file), &p.value)?;
        index.push_str(&p.name);
        index.push('\t');
        index.push_str(&file);
        index.push('\n');
    }
    let path = dir.join(CHECKPOINT_INDEX);
    fs::write(&path, index).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint directory as `(name, tensor)` pairs in index order.
pub fn read_checkpoint(dir: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let dir = dir.as_ref();
    let index_path = dir.join(CHECKPOINT_INDEX);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, file) = line.split_once('\t').ok_or_else(|| Error::Load {
            name: format!("{}:{}", index_path.display(), lineno + 1),
            reason: "index line is not `name<TAB>file`".into(),
        })?;
        let file: PathBuf = dir.join(file);
        out.push((name.to_string(), read_tensor(file)?));
    }
    Ok(out)
}

/// Copies checkpoint tensors into matching parameters of `store`.
///
/// Only names accepted by `filter` are considered; each of those must exist in
/// `store` with an identical shape. Returns the number of parameters loaded.
pub fn load_checkpoint_into(
    store: &mut ParamStore,
    dir: impl AsRef<Path>,
    filter: impl Fn(&str) -> bool,
) -> Result<usize> {
    let mut loaded = 0;
    for (name, t) in read_checkpoint(dir)? {
        if !filter(&name) {
            continue;
        }
        let id = store.id(&name).ok_or_else(|| Error::Load {
            name: name.clone(),
            reason: "not present in the model".into(),
        })?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::Load {
                name,
                reason: format!(
                    "shape {:?} does not match model shape {:?}",
                    t.shape(),
                    p.value.shape()
                ),
            });
        }
        p.value = t;
        loaded += 1;
    }
    Ok(loaded)
}
