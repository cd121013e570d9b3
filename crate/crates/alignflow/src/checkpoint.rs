//! Versioned binary checkpoints. The byte layout is described in
//! `docs/checkpoint.md`.

use std::io::{Read, Write};
use std::path::Path;

use alignflow_core::harness::{ExperimentConfig, ToyModel};
use alignflow_core::numerics::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ALFLCKPT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n)
        .map_err(|_| Error::Format(format!("{what} too large for the checkpoint format")))
}

/// Serializes the run configuration and every parameter tensor.
pub fn encode(config: &ExperimentConfig, model: &ToyModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let text = config.to_text();
    put_u32(&mut out, len_u32(text.len(), "configuration")?);
    out.extend_from_slice(text.as_bytes());

    let tensors: Vec<(&str, &Tensor)> = model.store.iter().collect();
    put_u32(&mut out, len_u32(tensors.len(), "tensor count")?);
    for (name, t) in &tensors {
        put_u32(&mut out, len_u32(name.len(), "tensor name")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, len_u32(t.rank(), "rank")?);
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
    }
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

/// Rebuilds the model described by the stored configuration and fills in
/// the stored parameters, which must match it name for name and shape for
/// shape.
pub fn decode(bytes: &[u8]) -> Result<(ExperimentConfig, ToyModel)> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("not an alignflow checkpoint".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let text_len = c.u32()? as usize;
    let text = c.string(text_len)?;
    let config = ExperimentConfig::from_text(&text)?;
    let mut model = ToyModel::new(&config)?;

    let count = c.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, the configured model has {}",
            model.store.len()
        )));
    }
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = c.string(name_len)?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
        if model.store.get(id).shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                model.store.get(id).shape()
            )));
        }
        table.push((id, shape.iter().product::<usize>()));
    }
    for (id, n) in table {
        let data = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        model.store.set(id, &data)?;
    }
    if c.at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - c.at
        )));
    }
    Ok((config, model))
}

pub fn save(path: &Path, config: &ExperimentConfig, model: &ToyModel) -> Result<()> {
    let bytes = encode(config, model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ExperimentConfig, ToyModel)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
