//! Binary weight snapshots.
//!
//! Layout: magic `VWI1` | u32 version | u32 tensor count | per tensor
//! (u32 name length, UTF-8 name, u32 rank, u32 dims, f32-LE data) | u32
//! JSON length | provenance JSON (architecture, stage, run settings).
//! Everything little-endian.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::audit;
use crate::dataio::Reader;
use crate::error::{Result, VoxError};
use crate::model::{Model, ModelConfig, Stage};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VWI1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Provenance {
    model: ModelConfig,
    stage: Stage,
    run: RunConfig,
}

/// A saved model: every parameter tensor plus the configuration that
/// produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub stage: Stage,
    pub run: RunConfig,
    tensors: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, run: &RunConfig) -> Self {
        let mut ckpt = Checkpoint {
            model: model.cfg.clone(),
            stage: model.stage,
            run: run.clone(),
            tensors: Vec::new(),
            index: HashMap::new(),
        };
        for (name, value) in model.iter_params() {
            ckpt.index.insert(name.to_string(), ckpt.tensors.len());
            ckpt.tensors.push((name.to_string(), value.clone()));
        }
        ckpt
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, value) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let prov = Provenance {
            model: self.model.clone(),
            stage: self.stage,
            run: self.run.clone(),
        };
        let json = serde_json::to_vec(&prov).expect("provenance serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let magic = r.need(4, "magic")?;
        if magic != MAGIC {
            return Err(VoxError::format(
                0,
                format!("bad magic {magic:?}, expected {MAGIC:?}"),
            ));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(VoxError::format(
                4,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        let mut index = HashMap::with_capacity(count);
        for i in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name_at = r.position();
            let name_bytes = r.need(name_len, "tensor name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| {
                    VoxError::format(name_at as u64, format!("tensor {i} name is not UTF-8"))
                })?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > (1usize << 31) {
                return Err(VoxError::format(
                    name_at as u64,
                    format!("tensor '{name}' claims implausible shape {shape:?}"),
                ));
            }
            let raw = r.need(numel * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if index.insert(name.clone(), tensors.len()).is_some() {
                return Err(VoxError::format(
                    name_at as u64,
                    format!("duplicate tensor name '{name}'"),
                ));
            }
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        let json_len = r.u32("provenance length")? as usize;
        let json_at = r.position();
        let json = r.need(json_len, "provenance")?;
        let prov: Provenance = serde_json::from_slice(json).map_err(|e| {
            VoxError::format(json_at as u64, format!("provenance block unreadable: {e}"))
        })?;
        if r.remaining() != 0 {
            return Err(VoxError::format(
                r.position() as u64,
                format!("{} trailing bytes after provenance", r.remaining()),
            ));
        }
        Ok(Checkpoint {
            model: prov.model,
            stage: prov.stage,
            run: prov.run,
            tensors,
            index,
        })
    }

    /// Rebuild the saved model exactly: same architecture, same stage,
    /// every parameter restored. Any name or shape drift is an error.
    pub fn into_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.model.clone(), self.stage)?;
        let names: Vec<String> = model.names().iter().map(|s| s.to_string()).collect();
        for name in names {
            let value = self.get(&name).ok_or_else(|| {
                VoxError::config(format!(
                    "checkpoint is missing parameter '{name}' declared by its own architecture"
                ))
            })?;
            model.set(&name, value.clone())?;
        }
        if self.tensors.len() != model.names().len() {
            let extra: Vec<_> = self
                .names()
                .filter(|n| model.get(n).is_none())
                .collect();
            return Err(VoxError::config(format!(
                "checkpoint carries tensors unknown to its architecture: {extra:?}"
            )));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, run: &RunConfig) -> Result<()> {
    std::fs::write(path, Checkpoint::from_model(model, run).to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    audit::note_read(path);
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// What [`transfer_weights`] did, name by name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Target parameters overwritten from the checkpoint.
    pub copied: Vec<String>,
    /// Checkpoint tensors with no home in the target (dropped heads).
    pub skipped: Vec<String>,
    /// Target parameters absent from the checkpoint (kept as-is).
    pub new: Vec<String>,
}

/// Copy every name-matching parameter from `ckpt` into `target`, leaving
/// the rest of the target untouched. A matching name with a different
/// shape means the architectures drifted apart and is a hard error.
pub fn transfer_weights(ckpt: &Checkpoint, target: &mut Model<f32>) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    let target_names: Vec<String> = target.names().iter().map(|s| s.to_string()).collect();
    for name in &target_names {
        match ckpt.get(name) {
            Some(value) => {
                let have = target.get(name).expect("name from target").shape();
                if have != value.shape() {
                    return Err(VoxError::config(format!(
                        "parameter '{name}' is {:?} in the checkpoint but {have:?} in the \
                         target model; refusing to transfer across architectures",
                        value.shape()
                    )));
                }
                target.set(name, value.clone())?;
                report.copied.push(name.clone());
            }
            None => report.new.push(name.clone()),
        }
    }
    for name in ckpt.names() {
        if target.get(name).is_none() {
            report.skipped.push(name.to_string());
        }
    }
    Ok(report)
}
