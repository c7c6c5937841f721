//! Checkpoint layout: `"PCK1" | u32 LE header length | JSON header |
//! f32 LE payload`, tensors stored back to back in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::ModelConfig;
use super::LossConfig;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::ingest::container::{read_bytes, write_bytes};

const MAGIC: &[u8; 4] = b"PCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub tau: f64,
    /// Free-form echo of the configuration that produced the checkpoint.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(
        model: ModelConfig,
        loss: LossConfig,
        seed: u64,
        tau: f64,
        config: serde_json::Value,
        store: ParamStore,
    ) -> Self {
        let tensors = store
            .entries()
            .iter()
            .map(|e| TensorInfo {
                name: e.name.clone(),
                shape: e.shape.clone(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                model,
                loss,
                seed,
                tau,
                config,
                tensors,
            },
            store,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(8 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.store.entries() {
            for &v in &e.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptContainer {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 {
            return Err(corrupt("shorter than the fixed header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                expected: *MAGIC,
                found: bytes[..4].try_into().unwrap(),
            });
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header length exceeds file"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..header_end])?;
        let declared: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        let payload = &bytes[header_end..];
        if payload.len() != declared * 4 {
            return Err(Error::HeaderPayloadSizeMismatch {
                declared: declared * 4,
                actual: payload.len(),
            });
        }
        let mut store = ParamStore::new();
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        for t in &header.tensors {
            let n = t.shape.iter().product();
            store.push(&t.name, &t.shape, values.by_ref().take(n).collect());
        }
        Ok(Self { header, store })
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_bytes(path.as_ref(), &ckpt.encode()?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::decode(&read_bytes(path)?, path)
}
