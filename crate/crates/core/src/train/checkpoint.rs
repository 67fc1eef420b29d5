//! Binary checkpoints: magic, little-endian header length, JSON header, then
//! every tensor of the parameters, first moments and second moments as
//! little-endian `f64` in canonical order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

use super::adam::{Adam, AdamConfig};
use super::{TrainError, TrainingConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CONFTREE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    /// All streams of an epoch derive from `(master_seed, epoch)`, so this is
    /// the complete generator state at an epoch boundary.
    pub next_epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    training: TrainingConfig,
    epoch: usize,
    rng: RngState,
    optimizer: AdamConfig,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub training: TrainingConfig,
    pub optimizer: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
}

fn corrupt(path: &Path, detail: impl Into<String>) -> TrainError {
    TrainError::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn rng_state(&self) -> RngState {
        RngState {
            master_seed: self.training.seed,
            next_epoch: self.epoch + 1,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let params = self.model.params.flat();
        let mut tensors = Vec::with_capacity(params.len());
        self.model.params.visit(&mut |name, t: &Tensor| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
        });
        let header = Header {
            version: CHECKPOINT_VERSION,
            model: self.model.config.clone(),
            training: self.training.clone(),
            epoch: self.epoch,
            rng: self.rng_state(),
            optimizer: self.optimizer.config,
            optimizer_step: self.optimizer.step,
            tensors,
        };
        let header = serde_json::to_vec(&header).map_err(|e| TrainError::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let groups: [Vec<&Tensor>; 3] = [
            params,
            self.optimizer.m.iter().collect(),
            self.optimizer.v.iter().collect(),
        ];
        for group in groups {
            for t in group {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// `path` is used only in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, TrainError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a conftree checkpoint"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| corrupt(path, "truncated header"))?;
        let raw: serde_json::Value = serde_json::from_slice(body).map_err(|e| corrupt(path, format!("header: {e}")))?;
        let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(TrainError::Version {
                path: path.to_path_buf(),
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| corrupt(path, format!("header: {e}")))?;
        header.model.validate()?;

        let template = ModelParams::init(&header.model, 0);
        let names = template.names();
        if names.len() != header.tensors.len() || names.iter().zip(&header.tensors).any(|(n, e)| *n != e.name) {
            return Err(corrupt(path, "tensor table does not match the model configuration"));
        }

        let mut cursor = 16 + len;
        let read_group = |cursor: &mut usize| -> Result<Vec<Tensor>, TrainError> {
            let mut out = Vec::with_capacity(header.tensors.len());
            for entry in &header.tensors {
                let count: usize = entry.shape.iter().product();
                let end = *cursor + 8 * count;
                let chunk = bytes
                    .get(*cursor..end)
                    .ok_or_else(|| corrupt(path, "truncated tensor data"))?;
                let data = chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                out.push(Tensor::new(entry.shape.clone(), data)?);
                *cursor = end;
            }
            Ok(out)
        };
        let params = read_group(&mut cursor)?;
        let m = read_group(&mut cursor)?;
        let v = read_group(&mut cursor)?;
        if cursor != bytes.len() {
            return Err(corrupt(path, "trailing bytes"));
        }
        let params = template.from_flat(params)?;
        Ok(Checkpoint {
            model: Model {
                config: header.model,
                params,
            },
            training: header.training,
            optimizer: Adam {
                config: header.optimizer,
                step: header.optimizer_step,
                m,
                v,
            },
            epoch: header.epoch,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|source| TrainError::Io {
            path: tmp.clone(),
            source,
        })?;
        fs::rename(&tmp, path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}
