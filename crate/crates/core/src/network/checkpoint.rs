//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "IIMAPCKP"
//! version      u32      currently 1
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (see `Header`)
//! tensors      for each entry of header.tensors, in order:
//!              product(shape) f32 values, little-endian
//! ```
//!
//! Every parameter contributes three entries: its value, then the Adam first
//! and second moments (suffixes `#m` and `#v`).

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{MaskerConfig, MaskerNet, ModelConfig, NetworkError, PolicyValueNet};
use crate::autodiff::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 8] = b"IIMAPCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Training metadata stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub lambda_mask: f32,
    pub seed: u64,
    #[serde(default)]
    pub teacher: String,
    /// Held-out metrics measured when the checkpoint was written.
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    masker: Option<MaskerConfig>,
    meta: CheckpointMeta,
    net_optimizer_step: u64,
    masker_optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// A network, an optional masker, their optimizer state and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub masker: Option<MaskerConfig>,
    pub meta: CheckpointMeta,
    pub net_params: ParameterSet,
    pub masker_params: Option<ParameterSet>,
}

fn entries(ps: &ParameterSet, out: &mut Vec<TensorEntry>) {
    for p in ps.iter() {
        for suffix in ["", "#m", "#v"] {
            out.push(TensorEntry {
                name: format!("{}{suffix}", p.name),
                shape: p.value.shape().to_vec(),
            });
        }
    }
}

fn write_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Format("tensor too large".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn read_params(
    r: &mut Reader,
    tensors: &mut std::slice::Iter<TensorEntry>,
    template: &ParameterSet,
    step: u64,
) -> Result<ParameterSet, CheckpointError> {
    let mut ps = ParameterSet::new();
    ps.step = step;
    for want in template.iter() {
        let mut parts = Vec::with_capacity(3);
        for suffix in ["", "#m", "#v"] {
            let e = tensors
                .next()
                .ok_or_else(|| CheckpointError::Format(format!("missing tensor {}{suffix}", want.name)))?;
            if e.name != format!("{}{suffix}", want.name) || e.shape != want.value.shape() {
                return Err(CheckpointError::Format(format!(
                    "expected {}{suffix} {:?}, found {} {:?}",
                    want.name,
                    want.value.shape(),
                    e.name,
                    e.shape
                )));
            }
            parts.push(r.f32s(e.shape.iter().product())?);
        }
        let v = parts.pop().unwrap();
        let m = parts.pop().unwrap();
        let value = parts.pop().unwrap();
        let id = ps
            .insert(&want.name, Tensor::new(want.value.shape(), value))
            .map_err(NetworkError::from)?;
        let _ = id;
        let p = ps.iter_mut().last().unwrap();
        p.m = m;
        p.v = v;
    }
    Ok(ps)
}

impl Checkpoint {
    pub fn from_models(net: &PolicyValueNet, masker: Option<&MaskerNet>, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            model: net.config.clone(),
            masker: masker.map(|m| m.config.clone()),
            meta,
            net_params: net.params.clone(),
            masker_params: masker.map(|m| m.params.clone()),
        }
    }

    /// Rebuilds the network (and masker, if stored) with the saved weights
    /// and optimizer state.
    pub fn to_models(&self) -> Result<(PolicyValueNet, Option<MaskerNet>), NetworkError> {
        let mut net = PolicyValueNet::new(self.model.clone(), 0)?;
        net.load_params(self.net_params.clone())?;
        let masker = match (&self.masker, &self.masker_params) {
            (Some(cfg), Some(params)) => {
                let mut m = MaskerNet::new(cfg.clone(), 0)?;
                m.load_params(params.clone())?;
                Some(m)
            }
            _ => None,
        };
        Ok((net, masker))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        entries(&self.net_params, &mut tensors);
        if let Some(mp) = &self.masker_params {
            entries(mp, &mut tensors);
        }
        let header = Header {
            model: self.model.clone(),
            masker: self.masker.clone(),
            meta: self.meta.clone(),
            net_optimizer_step: self.net_params.step,
            masker_optimizer_step: self.masker_params.as_ref().map(|m| m.step),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(16 + json.len() + 12 * self.net_params.num_values());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        let sets = std::iter::once(&self.net_params).chain(self.masker_params.as_ref());
        for ps in sets {
            for p in ps.iter() {
                write_f32s(&mut buf, p.value.data());
                write_f32s(&mut buf, &p.m);
                write_f32s(&mut buf, &p.v);
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| CheckpointError::Format(format!("header: {e}")))?;

        // Templates fix the expected parameter order and shapes.
        let net_template = PolicyValueNet::new(header.model.clone(), 0)?;
        let mut tensors = header.tensors.iter();
        let net_params = read_params(&mut r, &mut tensors, &net_template.params, header.net_optimizer_step)?;
        let masker_params = match &header.masker {
            Some(cfg) => {
                let template = MaskerNet::new(cfg.clone(), 0)?;
                let step = header.masker_optimizer_step.unwrap_or(0);
                Some(read_params(&mut r, &mut tensors, &template.params, step)?)
            }
            None => None,
        };
        if tensors.next().is_some() {
            return Err(CheckpointError::Format("unexpected extra tensors".into()));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model: header.model,
            masker: header.masker,
            meta: header.meta,
            net_params,
            masker_params,
        })
    }

    /// Writes to `path` through a temporary file so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

/// Checkpoint files (`*.ckpt`) in `dir`, sorted by name.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<std::path::PathBuf>, CheckpointError> {
    let mut out: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    out.sort();
    Ok(out)
}
