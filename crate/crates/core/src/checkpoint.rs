//! Checkpoint files.
//!
//! # Layout (version 1)
//!
//! All integers little-endian.
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `BMCK` |
//! | 4 | `u32` format version |
//! | 8 | `u64` header length `h` |
//! | `h` | UTF-8 JSON [`CheckpointHeader`] |
//! | ... | `f64` blob |
//!
//! Every tensor entry in the header (`params`, `moments`) gives an offset
//! and a length in `f64` values from the start of the blob. Parameters are
//! stored in `f64` whatever precision they were trained in.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffcore::{GroupRates, Moments, OptimizerState, ParamGroup};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiTaskModel};
use crate::scalar::Scalar;
use crate::weighting::DwaState;

const MAGIC: &[u8; 4] = b"BMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: crate::diffcore::AdamWConfig,
    pub rates: GroupRates,
    pub step: u64,
    /// Per parameter, first moments then second moments.
    pub moments: Vec<(BlobEntry, BlobEntry)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub monitor: f64,
    pub params: Vec<ParamEntry>,
    pub optimizer: OptimizerHeader,
    pub dwa: DwaState,
    pub plateau: crate::trainer::Plateau,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: BTreeMap<String, Vec<f64>>,
    pub optimizer: OptimizerState,
}

/// Everything a checkpoint captures, borrowed from a live run.
pub struct Snapshot<'a, S: Scalar> {
    pub config: &'a RunConfig,
    pub seed: u64,
    pub epoch: usize,
    pub monitor: f64,
    pub model: &'a MultiTaskModel<S>,
    pub optimizer: &'a OptimizerState,
    pub dwa: &'a DwaState,
    pub plateau: &'a crate::trainer::Plateau,
}

impl<S: Scalar> Snapshot<'_, S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob: Vec<f64> = Vec::new();
        let mut push = |values: &mut dyn Iterator<Item = f64>| {
            let offset = blob.len();
            blob.extend(values);
            (offset, blob.len() - offset)
        };
        let mut params = Vec::new();
        for p in self.model.store().iter() {
            let data = p.tensor().to_vec();
            let (offset, len) = push(&mut data.iter().map(|v| v.to_f64_lossy()));
            params.push(ParamEntry { name: p.name().to_string(), group: p.group(), shape: p.tensor().shape().to_vec(), offset, len });
        }
        let mut moments = Vec::new();
        for (name, m) in &self.optimizer.moments {
            let (o1, l1) = push(&mut m.first.iter().copied());
            let (o2, l2) = push(&mut m.second.iter().copied());
            moments.push((
                BlobEntry { name: name.clone(), offset: o1, len: l1 },
                BlobEntry { name: name.clone(), offset: o2, len: l2 },
            ));
        }
        let header = CheckpointHeader {
            config: self.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            monitor: self.monitor,
            params,
            optimizer: OptimizerHeader {
                config: self.optimizer.config,
                rates: self.optimizer.rates,
                step: self.optimizer.step,
                moments,
            },
            dwa: self.dwa.clone(),
            plateau: self.plateau.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let h = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + h).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let raw = &bytes[16 + h..];
        if raw.len() % 8 != 0 {
            return Err(bad("blob is not a whole number of f64 values"));
        }
        let blob: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let slice = |offset: usize, len: usize| -> Result<Vec<f64>> {
            blob.get(offset..offset + len).map(<[f64]>::to_vec).ok_or_else(|| bad("entry extends past blob"))
        };
        let mut params = BTreeMap::new();
        for p in &header.params {
            if p.shape.iter().product::<usize>() != p.len {
                return Err(Error::Checkpoint(format!("{}: shape {:?} does not match length {}", p.name, p.shape, p.len)));
            }
            params.insert(p.name.clone(), slice(p.offset, p.len)?);
        }
        let mut moments = BTreeMap::new();
        for (first, second) in &header.optimizer.moments {
            moments.insert(
                first.name.clone(),
                Moments { first: slice(first.offset, first.len)?, second: slice(second.offset, second.len)? },
            );
        }
        let optimizer = OptimizerState {
            config: header.optimizer.config,
            rates: header.optimizer.rates,
            step: header.optimizer.step,
            moments,
        };
        Ok(Self { header, params, optimizer })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the network and loads its weights. With `expected`, the
    /// stored model configuration must match it exactly.
    pub fn model<S: Scalar>(&self, expected: Option<&ModelConfig>) -> Result<MultiTaskModel<S>> {
        let cfg = &self.header.config.model;
        if let Some(e) = expected {
            if e != cfg {
                return Err(Error::Checkpoint(format!(
                    "model configuration differs from checkpoint (checkpoint: {} architecture)",
                    cfg.architecture
                )));
            }
        }
        let model = MultiTaskModel::<S>::new(cfg, 0)?;
        for p in model.store().iter() {
            let values = self
                .params
                .get(p.name())
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{}` missing from checkpoint", p.name())))?;
            if values.len() != p.tensor().numel() {
                return Err(Error::Checkpoint(format!("parameter `{}` has the wrong size", p.name())));
            }
            p.tensor().assign(&values.iter().map(|&v| S::lit(v)).collect::<Vec<_>>())?;
        }
        let known = |name: &str| model.store().get(name).is_some() || name.starts_with("weighting.");
        if let Some(extra) = self.params.keys().find(|n| !known(n)) {
            return Err(Error::Checkpoint(format!("checkpoint parameter `{extra}` does not belong to this model")));
        }
        Ok(model)
    }
}
