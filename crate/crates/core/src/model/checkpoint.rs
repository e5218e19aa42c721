//! Checkpoint container.
//!
//! ```text
//! magic        b"AILACKPT"
//! version      u32
//! header_len   u64, then that many bytes of JSON (CheckpointHeader)
//! count        u64
//! per tensor:  name_len u64, name (UTF-8), rank u64, dims u64 × rank,
//!              values f64 × numel
//! ```
//!
//! Integers and floats are little-endian. Tensors appear in registry order,
//! so writing the same parameters twice yields identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::InputSpec;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AILACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild the model, plus free-form provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub input: InputSpec,
    pub seed: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Rebuilds the model described by the header.
    pub fn into_model(self) -> Result<Model> {
        Model::from_params(self.header.model, self.header.input, self.params)
    }

    /// Rebuilds against an externally supplied configuration; any layout
    /// disagreement is reported as a per-tensor shape diff.
    pub fn into_model_with(self, config: ModelConfig, input: InputSpec) -> Result<Model> {
        Model::from_params(config, input, self.params)
    }
}

pub fn write_checkpoint(path: &Path, model: &Model, seed: u64, extra: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        input: model.input_spec(),
        seed,
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(64 + json.len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u64(&mut out, json.len());
    out.extend_from_slice(&json);
    put_u64(&mut out, model.params().len());
    for (name, t) in model.params().iter() {
        put_u64(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, t.rank());
        for &d in t.shape() {
            put_u64(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.usize()?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
    let count = r.usize()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.usize()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.usize()?;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let data = r
            .take(numel)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        params.insert(name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint { header, params })
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(Error::Checkpoint("checkpoint is truncated".into())),
        }
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}
