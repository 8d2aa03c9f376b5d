//! Checkpoint file: `u64` little-endian header length, a JSON header, then a
//! little-endian float32 blob addressed by the header's manifest.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::Layout;
use super::{ModelConfig, Separator};
use crate::dsp::StftPlan;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
    Optimizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub seed: u64,
    pub manifest: Vec<ManifestEntry>,
    /// Free-form training state (step counter, RNG seeds, log position).
    #[serde(default)]
    pub train_state: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// One tensor per manifest entry, in manifest order.
    pub tensors: Vec<Tensor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(
        config: ModelConfig,
        vocab: Vec<String>,
        seed: u64,
        entries: Vec<(String, TensorKind, Tensor)>,
        train_state: Option<serde_json::Value>,
    ) -> Self {
        let mut offset = 0u64;
        let mut manifest = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, kind, t) in entries {
            manifest.push(ManifestEntry {
                name,
                kind,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            });
            offset += 4 * t.len() as u64;
            tensors.push(t);
        }
        Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                config,
                vocab,
                seed,
                manifest,
                train_state,
            },
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.header
            .manifest
            .iter()
            .position(|m| m.name == name)
            .map(|i| &self.tensors[i])
    }

    /// (name, tensor) pairs of one kind, in manifest order.
    pub fn of_kind(&self, kind: TensorKind) -> impl Iterator<Item = (&str, &Tensor)> {
        self.header
            .manifest
            .iter()
            .zip(&self.tensors)
            .filter(move |(m, _)| m.kind == kind)
            .map(|(m, t)| (m.name.as_str(), t))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let blob_len: usize = self.tensors.iter().map(|t| 4 * t.len()).sum();
        let mut out = Vec::with_capacity(8 + header.len() + blob_len);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let hlen = bytes
            .get(..8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
            .ok_or_else(|| corrupt("truncated header length"))?;
        let header_bytes = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(corrupt(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let blob = &bytes[8 + hlen..];
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for m in &header.manifest {
            if m.dtype != "f32" {
                return Err(corrupt(format!("{}: unsupported dtype {}", m.name, m.dtype)));
            }
            let n: usize = m.shape.iter().product();
            let start = m.offset as usize;
            let raw = blob
                .get(start..start + 4 * n)
                .ok_or_else(|| corrupt(format!("{}: data out of range", m.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push(Tensor::from_vec(&m.shape, data));
        }
        Ok(Self { header, tensors })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Separator {
    /// Snapshot of parameters and buffers plus any optimizer tensors.
    pub fn to_checkpoint(
        &self,
        seed: u64,
        optimizer: Vec<(String, Tensor)>,
        train_state: Option<serde_json::Value>,
    ) -> Checkpoint {
        let entries = self
            .params
            .params
            .iter()
            .map(|p| (p.name.clone(), TensorKind::Param, p.value.clone()))
            .chain(
                self.params
                    .buffers
                    .iter()
                    .map(|b| (b.name.clone(), TensorKind::Buffer, b.value.clone())),
            )
            .chain(optimizer.into_iter().map(|(n, t)| (n, TensorKind::Optimizer, t)))
            .collect();
        Checkpoint::new(
            self.config.clone(),
            self.vocab_keys.clone(),
            seed,
            entries,
            train_state,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck.header.config.clone();
        config.validate()?;
        let table = Tensor::zeros(&[ck.header.vocab.len(), config.d_query]);
        let (layout, mut params) = Layout::build(&config, table, &mut ChaCha8Rng::seed_from_u64(0));
        let fill = |slot: &mut super::NamedTensor, kind: TensorKind| -> Result<()> {
            let i = ck
                .header
                .manifest
                .iter()
                .position(|m| m.name == slot.name && m.kind == kind)
                .ok_or_else(|| corrupt(format!("missing tensor {}", slot.name)))?;
            if ck.tensors[i].shape() != slot.value.shape() {
                return Err(corrupt(format!(
                    "{}: shape {:?}, expected {:?}",
                    slot.name,
                    ck.tensors[i].shape(),
                    slot.value.shape()
                )));
            }
            slot.value = ck.tensors[i].clone();
            Ok(())
        };
        for p in params.params.iter_mut() {
            fill(p, TensorKind::Param)?;
        }
        for b in params.buffers.iter_mut() {
            fill(b, TensorKind::Buffer)?;
        }
        let plan = Arc::new(StftPlan::new(config.stft)?);
        let sep = Self {
            config,
            params,
            vocab_keys: ck.header.vocab.clone(),
            layout,
            plan,
        };
        // Rebuilding the vocabulary validates the stored keys.
        crate::query::Vocabulary::from_parts(
            sep.vocab_keys.clone(),
            sep.params.params[sep.layout.table].value.clone(),
        )?;
        Ok(sep)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.to_checkpoint(seed, Vec::new(), None).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}
