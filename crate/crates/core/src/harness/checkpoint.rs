//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MOECKPT\0"
//! version  u32      1
//! step     u64
//! config   u32 length + UTF-8 model config (key=value lines)
//! count    u32
//! count × { u32 name length, name, u32 rank, rank × u64 dims, f32 data }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MOECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes the model parameters and config echo.
pub fn encode(model: &Model<f32>, step: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    let config = model.config.to_kv_string();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, tensor) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &Model<f32>, step: u64, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model, step)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Parsed checkpoint contents.
pub struct Decoded {
    pub step: u64,
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let step = r.u64("step")?;
    let config = ModelConfig::parse(&r.string("config")?)
        .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    let count = r.u32("record count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let name = r.string(&format!("name of record {i}"))?;
        let rank = r.u32(&format!("rank of `{name}`"))? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "`{name}` has implausible rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&format!("dims of `{name}`"))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` shape {shape:?} overflows")))?;
        let raw = r.take(numel, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor =
            Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok(Decoded {
        step,
        config,
        tensors,
    })
}

/// Copies the decoded tensors into `model`, which must have the same
/// parameter names and shapes.
pub fn restore(model: &mut Model<f32>, decoded: Decoded) -> Result<u64> {
    let ids: Vec<_> = model.params.ids().collect();
    for (&id, (name, tensor)) in ids.iter().zip(&decoded.tensors) {
        let expected = model.params.name(id);
        if expected != name {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` found where `{expected}` was expected"
            )));
        }
        let want = model.params.get(id).shape();
        if tensor.shape() != want {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, model expects {want:?}",
                tensor.shape()
            )));
        }
    }
    if decoded.tensors.len() != ids.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            decoded.tensors.len(),
            ids.len()
        )));
    }
    for (id, (_, tensor)) in ids.into_iter().zip(decoded.tensors) {
        model.params.set(id, tensor)?;
    }
    Ok(decoded.step)
}

/// Loads a checkpoint, rebuilding the model from its config echo.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = decode(&bytes)?;
    let mut model = Model::build(&decoded.config, 0)?;
    let step = restore(&mut model, decoded)?;
    Ok((model, step))
}

/// Loads parameters into an existing model of a given config.
pub fn load_into(model: &mut Model<f32>, path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(model, decode(&bytes)?)
}
