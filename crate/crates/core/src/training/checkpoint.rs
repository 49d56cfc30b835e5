use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::{FusionModel, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GFUSECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layout (little-endian): magic, version u32, config digest [32], parameter
/// count u32, then per parameter: name length u32, name bytes, rank u32,
/// dims u64 each, f64 payload.
pub fn encode_checkpoint(model: &FusionModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.config.digest());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, model: &FusionModel) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the model described by `config` and overwrites every parameter
/// with the stored values. Names, order and shapes must match exactly.
pub fn decode_checkpoint(bytes: &[u8], config: ModelConfig) -> Result<FusionModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut model = FusionModel::new(config)?;
    if r.take(32)? != model.config.digest() {
        return Err(Error::Checkpoint("config digest does not match the model config".into()));
    }
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, model has {}",
            model.params.len()
        )));
    }
    for p in model.params.iter_mut() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("non-utf8 name".into()))?;
        if name != p.name {
            return Err(Error::Checkpoint(format!("expected parameter {}, found {name}", p.name)));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {shape:?}, model expects {:?}",
                p.value.shape()
            )));
        }
        let n = p.value.numel();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        p.value = Tensor::new(shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path, config: ModelConfig) -> Result<FusionModel> {
    decode_checkpoint(&fs::read(path)?, config)
}
