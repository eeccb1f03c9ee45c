//! Checkpoint container: a magic line, a little-endian `u64` header length,
//! a JSON header, then every tensor in the corpus tensor format, in the
//! order the header lists them.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Ix2};
use serde::{Deserialize, Serialize};

use crate::corpus::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::optim::{Adam, OptimConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::synthesis::{Ablations, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8] = b"M2CI-CHECKPOINT 1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorRole {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub ablations: Ablations,
    pub seed: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub dtype: u8,
    pub tensors: Vec<TensorEntry>,
}

/// Parses the header and returns it with the offset of the first tensor.
fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let magic = CHECKPOINT_MAGIC.len();
    if bytes.len() < magic || &bytes[..magic] != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, message: "not a checkpoint (bad magic line)".into() });
    }
    let Some(raw_len) = bytes.get(magic..magic + 8) else {
        return Err(Error::Format { offset: bytes.len(), message: "truncated before header length".into() });
    };
    let len = u64::from_le_bytes(raw_len.try_into().expect("8 bytes")) as usize;
    let start = magic + 8;
    let Some(raw) = start.checked_add(len).and_then(|end| bytes.get(start..end)) else {
        return Err(Error::Format { offset: bytes.len(), message: format!("truncated header of {len} bytes") });
    };
    Ok((serde_json::from_slice(raw)?, start + len))
}

impl CheckpointHeader {
    /// Reads only the header of a checkpoint file, e.g. to find its dtype.
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(parse_header(&fs::read(path).map_err(|e| Error::io(path, e))?)?.0)
    }
}

/// Deserialized checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub values: Vec<Array2<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of parameters, buffers and optimizer moments.
    pub fn capture(
        model: &ModelConfig,
        ablations: &Ablations,
        seed: u64,
        store: &ParamStore<T>,
        adam: &Adam<T>,
    ) -> Self {
        let mut tensors = Vec::new();
        let mut values = Vec::new();
        for (_, p) in store.iter() {
            let role = if p.trainable { TensorRole::Param } else { TensorRole::Buffer };
            tensors.push(TensorEntry { name: p.name.clone(), role });
            values.push(p.value.clone());
        }
        for (role, moments) in [(TensorRole::AdamM, &adam.m), (TensorRole::AdamV, &adam.v)] {
            for (id, p) in store.iter() {
                if p.trainable {
                    tensors.push(TensorEntry { name: p.name.clone(), role });
                    values.push(moments[id.index()].clone());
                }
            }
        }
        let header = CheckpointHeader {
            model: model.clone(),
            optim: adam.config.clone(),
            ablations: ablations.clone(),
            seed,
            step: adam.step,
            dtype: T::DTYPE_CODE,
            tensors,
        };
        Checkpoint { header, values }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 64 + self.values.iter().map(|v| 14 + v.len() * 8).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            encode_tensor(&v.view().into_dyn(), &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, start) = parse_header(bytes)?;
        if header.dtype != T::DTYPE_CODE {
            return Err(Error::Format {
                offset: start,
                message: format!("checkpoint dtype code {} does not match requested code {}", header.dtype, T::DTYPE_CODE),
            });
        }
        let mut at = start;
        let mut values = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let (t, used) = decode_tensor::<T>(&bytes[at..], at)?;
            let m = t.into_dimensionality::<Ix2>().map_err(|_| Error::Format {
                offset: at,
                message: format!("tensor {} is not a matrix", entry.name),
            })?;
            values.push(m);
            at += used;
        }
        if at != bytes.len() {
            return Err(Error::Format { offset: at, message: format!("{} trailing bytes", bytes.len() - at) });
        }
        Ok(Checkpoint { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copies values into a store built from the same model config, and the
    /// moments into `adam`.
    pub fn restore(&self, store: &mut ParamStore<T>, adam: &mut Adam<T>) -> Result<()> {
        for (entry, value) in self.header.tensors.iter().zip(&self.values) {
            let id = store.find(&entry.name).ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("checkpoint tensor {} has no matching parameter", entry.name),
            })?;
            match entry.role {
                TensorRole::Param | TensorRole::Buffer => store.set(id, value.clone())?,
                TensorRole::AdamM => adam.m[id.index()] = value.clone(),
                TensorRole::AdamV => adam.v[id.index()] = value.clone(),
            }
        }
        let restored = self.header.tensors.iter().filter(|e| matches!(e.role, TensorRole::Param | TensorRole::Buffer)).count();
        if restored != store.len() {
            return Err(Error::Format {
                offset: 0,
                message: format!("checkpoint holds {restored} parameters, model has {}", store.len()),
            });
        }
        adam.step = self.header.step;
        adam.config = self.header.optim.clone();
        Ok(())
    }
}
