//! Checkpoint container: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then raw little-endian `f64` blobs in header order.
//!
//! The header lists every tensor (`param`, then AdamW first and second
//! moments) with its name and shape. Schedules are pure functions of the
//! step and config, so the header records their values for inspection only.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"VITSOMC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BlobKind {
    Param,
    M,
    V,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    kind: BlobKind,
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    decay: bool,
}

#[derive(Serialize, Deserialize)]
struct ScheduleState {
    temperature: f64,
    gamma: f64,
    lr: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    config: TrainConfig,
    step: u64,
    schedule: ScheduleState,
    optimizer: AdamW,
    tensors: Vec<BlobEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<&[f64]> = Vec::new();
        for p in self.params.iter() {
            tensors.push(BlobEntry {
                kind: BlobKind::Param,
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                decay: p.decay,
            });
            blobs.push(p.tensor.data());
        }
        for (kind, moments) in [
            (BlobKind::M, self.optimizer.first_moments()),
            (BlobKind::V, self.optimizer.second_moments()),
        ] {
            for (p, data) in self.params.iter().zip(moments) {
                tensors.push(BlobEntry {
                    kind,
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    decay: false,
                });
                blobs.push(data);
            }
        }
        let o = &self.config.optim;
        let header = Header {
            format: FORMAT_VERSION,
            config: self.config.clone(),
            step: self.step,
            schedule: ScheduleState {
                temperature: self.config.temperature()?.temperature(self.step),
                gamma: self.config.gamma()?.gamma(self.step),
                lr: super::optim::cosine_lr(self.step, o.steps, o.lr, o.lr_min),
            },
            optimizer: self.optimizer.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let total: usize = blobs.iter().map(|b| b.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + total);
        out.extend_from_slice(MAGIC);
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        for blob in blobs {
            for v in blob {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| corrupt("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {}", header.format)));
        }
        let mut rest = &bytes[16 + len..];
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if rest.len() < n * 8 {
                return Err(corrupt(format!("blob `{}` truncated", entry.name)));
            }
            let data: Vec<f64> = rest[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            rest = &rest[n * 8..];
            match entry.kind {
                BlobKind::Param => {
                    let t = Tensor::new(&entry.shape, data).map_err(|e| corrupt(e.to_string()))?;
                    params.add(entry.name.clone(), t, entry.decay);
                }
                BlobKind::M => m.push(data),
                BlobKind::V => v.push(data),
            }
        }
        if !rest.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", rest.len())));
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(corrupt("optimizer moments do not match the parameter list".into()));
        }
        let mut optimizer = header.optimizer;
        optimizer.m = m;
        optimizer.v = v;
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            params,
            optimizer,
        })
    }

    /// Writes atomically: a sibling temporary file is renamed over `path`,
    /// so an interrupted save leaves the previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
