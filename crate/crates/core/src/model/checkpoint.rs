//! Checkpoint files: a text header (magic line, version line, config JSON
//! line, metadata JSON line), then one binary record per parameter: name
//! length (u32), name bytes, rank (u32), extents (u64 each), values as
//! little-endian f64.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &str = "MCAOAN-CHECKPOINT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
}

/// Named parameter tensor as stored on disk.
pub type Record = (String, Vec<usize>, Vec<f64>);

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, epoch: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let meta = CheckpointMeta {
        seed: model.config.seed,
        epoch,
    };
    let json = |e: serde_json::Error| Error::Checkpoint(e.to_string());
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "version {VERSION}")?;
    writeln!(w, "{}", serde_json::to_string(&model.config).map_err(json)?)?;
    writeln!(w, "{}", serde_json::to_string(&meta).map_err(json)?)?;
    writeln!(w, "params {}", model.store.len())?;
    for (_, p) in model.store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
        for &e in p.value.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.at..];
        let n = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let line = std::str::from_utf8(&rest[..n]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        self.at += n + 1;
        Ok(line)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads the header and every parameter record without building a model.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, CheckpointMeta, Vec<Record>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if !bytes.starts_with(MAGIC.as_bytes()) || c.line()? != MAGIC {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let version = c.line()?;
    if version != format!("version {VERSION}") {
        return Err(Error::Checkpoint(format!("unsupported `{version}`")));
    }
    let json = |e: serde_json::Error| Error::Checkpoint(e.to_string());
    let config: ModelConfig = serde_json::from_str(c.line()?).map_err(json)?;
    let meta: CheckpointMeta = serde_json::from_str(c.line()?).map_err(json)?;
    let count: usize = c
        .line()?
        .strip_prefix("params ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Checkpoint("bad parameter count line".into()))?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("bad extent".into()))?,
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        records.push((name, shape, values));
    }
    if c.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok((config, meta, records))
}

impl<T: Scalar> Model<T> {
    /// Overwrites every parameter from `records`; names and shapes must
    /// match exactly.
    pub fn assign(&mut self, records: &[Record]) -> Result<()> {
        if records.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters in file, model has {}",
                records.len(),
                self.store.len()
            )));
        }
        for (name, shape, values) in records {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let p = self.store.get_mut(id);
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {shape:?} in file but {:?} in model",
                    p.value.shape()
                )));
            }
            p.value = Tensor::from_f64(shape, values)?;
        }
        Ok(())
    }

    /// Loads a checkpoint written for the same architecture as `self`.
    pub fn load_into(&mut self, path: impl AsRef<Path>) -> Result<CheckpointMeta> {
        let (config, meta, records) = read_checkpoint(path)?;
        let diff = self.config.architecture_diff(&config);
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config differs in {}",
                diff.join(", ")
            )));
        }
        self.assign(&records)?;
        Ok(meta)
    }
}

/// Rebuilds the model recorded in the checkpoint.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, CheckpointMeta)> {
    let (config, meta, records) = read_checkpoint(path)?;
    let mut model = Model::build(&config)?;
    model.assign(&records)?;
    Ok((model, meta))
}
