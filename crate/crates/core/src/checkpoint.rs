//! Binary checkpoints. Base models and PEFT parameters are stored in separate
//! files so one base can serve many adapted variants.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "REDLABCK"
//! version   u32      1
//! kind      u8       0 = base model, 1 = PEFT parameters
//! dtype     u8       4 = f32, 8 = f64
//! meta_len  u64      followed by that many bytes of JSON
//!                    (TransformerConfig for a base, PeftSpec for PEFT)
//! count     u64      number of tensors, sorted by name
//! per tensor:
//!   name_len u32, name (UTF-8), ndim u32, dims u64 × ndim,
//!   data     dtype-width × product(dims)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{TransformerConfig, TransformerModel};
use crate::param::ParamStore;
use crate::peft::{Peft, PeftSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"REDLABCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Base = 0,
    Peft = 1,
}

fn encode<T: Scalar>(kind: Kind, meta: &str, params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let mut sorted: Vec<_> = params.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    out.extend_from_slice(&(sorted.len() as u64).to_le_bytes());
    for p in sorted {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

fn decode<T: Scalar>(bytes: &[u8], expect: Kind) -> Result<(String, ParamStore<T>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    if kind != expect as u8 {
        return Err(Error::Checkpoint(format!(
            "expected a {expect:?} checkpoint, found kind {kind}"
        )));
    }
    let width = r.u8()? as usize;
    if width != T::BYTES {
        return Err(Error::Checkpoint(format!(
            "stored as {width}-byte floats, requested {}",
            T::DTYPE
        )));
    }
    let meta_len = r.len()?;
    let meta = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?
        .to_string();
    let count = r.len()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        let raw = r.take(
            numel
                .checked_mul(width)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        params.insert(name, Tensor::new(shape, data)?, true)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((meta, params))
}

pub fn save_base<T: Scalar>(model: &TransformerModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let meta = serde_json::to_string(&model.config)?;
    fs::write(path, encode(Kind::Base, &meta, &model.params))?;
    Ok(())
}

/// Loads a base model; every parameter comes back trainable until a PEFT
/// method is attached.
pub fn load_base<T: Scalar>(path: impl AsRef<Path>) -> Result<TransformerModel<T>> {
    let (meta, params) = decode(&fs::read(path)?, Kind::Base)?;
    let config: TransformerConfig = serde_json::from_str(&meta)?;
    TransformerModel::from_params(config, params)
}

pub fn save_peft<T: Scalar>(peft: &Peft<T>, path: impl AsRef<Path>) -> Result<()> {
    let meta = serde_json::to_string(&peft.spec)?;
    fs::write(path, encode(Kind::Peft, &meta, &peft.params))?;
    Ok(())
}

/// Loads PEFT parameters for a base of shape `config`.
pub fn load_peft<T: Scalar>(path: impl AsRef<Path>, config: &TransformerConfig) -> Result<Peft<T>> {
    let (meta, params) = decode(&fs::read(path)?, Kind::Peft)?;
    let spec: PeftSpec = serde_json::from_str(&meta)?;
    Peft::from_params(&spec, config, params)
}
