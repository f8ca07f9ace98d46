//! Checkpoint files.
//!
//! Layout: the 8-byte magic `VXCKPT01`, a little-endian `u64` manifest length,
//! a JSON manifest, then the little-endian `f32` data of every tensor listed
//! in the manifest at its recorded byte offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::plateau::PlateauTracker;
use super::trainer::EpochRecord;
use crate::error::{Error, FormatError, Result};
use crate::nn::{Model, ModelConfig, ParamStore};
use crate::tensor::{BatchNormState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VXCKPT01";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Training progress needed to resume exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerState {
    pub epochs_done: usize,
    pub plateau: PlateauTracker,
    pub history: Vec<EpochRecord>,
}

/// A model with optional optimizer and trainer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<AdamState>,
    pub trainer: Option<TrainerState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    norm_momentum: f32,
    norm_eps: f32,
    step: u64,
    adam: Option<AdamState>,
    trainer: Option<TrainerState>,
    tensors: Vec<TensorEntry>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            adam: None,
            trainer: None,
        }
    }

    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let store = &self.model.store;
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        for (k, t) in &store.params {
            out.push((format!("param/{k}"), t.shape().to_vec(), t.data()));
        }
        for (k, s) in &store.norms {
            out.push((format!("norm/{k}/running_mean"), vec![s.channels()], &s.running_mean));
            out.push((format!("norm/{k}/running_var"), vec![s.channels()], &s.running_var));
        }
        if let Some(a) = &self.adam {
            for (k, m) in &a.m {
                out.push((format!("adam_m/{k}"), store.params[k].shape().to_vec(), m));
            }
            for (k, v) in &a.v {
                out.push((format!("adam_v/{k}"), store.params[k].shape().to_vec(), v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.named_tensors();
        let mut offset = 0u64;
        let tensors = named
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += 4 * data.len() as u64;
                e
            })
            .collect();
        let (momentum, eps) = self
            .model
            .store
            .norms
            .values()
            .next()
            .map_or((0.1, 1e-5), |s| (s.momentum, s.eps));
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.model.config().clone(),
            norm_momentum: momentum,
            norm_eps: eps,
            step: self.adam.as_ref().map_or(0, |a| a.t),
            adam: self.adam.clone(),
            trainer: self.trainer.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &named {
            data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(FormatError::Truncated {
                expected: 16,
                actual: bytes.len(),
            }
            .into());
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: "VXCKPT01".into(),
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            }
            .into());
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let start = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or(FormatError::Truncated {
            expected: 16usize.saturating_add(len),
            actual: bytes.len(),
        })?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..start]).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!(
                "format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let blob = &bytes[start..];
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(bad(format!("tensor {} at offset {}, expected {expected_offset}", e.name, e.offset)));
            }
            let lo = e.offset as usize;
            let hi = lo + 4 * n;
            if hi > blob.len() {
                return Err(FormatError::Truncated {
                    expected: start + hi,
                    actual: bytes.len(),
                }
                .into());
            }
            let data = blob[lo..hi]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(format!("tensor {}: {err}", e.name)))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor {}", e.name)));
            }
            expected_offset = hi as u64;
        }
        if expected_offset as usize != blob.len() {
            return Err(bad(format!("{} trailing bytes after tensor data", blob.len() - expected_offset as usize)));
        }

        let mut store = ParamStore::default();
        let mut norm_parts: BTreeMap<String, (Option<Vec<f32>>, Option<Vec<f32>>)> = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(k) = name.strip_prefix("param/") {
                store.params.insert(k.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("norm/") {
                if let Some(k) = rest.strip_suffix("/running_mean") {
                    norm_parts.entry(k.to_string()).or_default().0 = Some(t.into_data());
                } else if let Some(k) = rest.strip_suffix("/running_var") {
                    norm_parts.entry(k.to_string()).or_default().1 = Some(t.into_data());
                } else {
                    return Err(bad(format!("unknown tensor {name}")));
                }
            } else if let Some(k) = name.strip_prefix("adam_m/") {
                m.insert(k.to_string(), t.into_data());
            } else if let Some(k) = name.strip_prefix("adam_v/") {
                v.insert(k.to_string(), t.into_data());
            } else {
                return Err(bad(format!("unknown tensor {name}")));
            }
        }
        for (k, parts) in norm_parts {
            match parts {
                (Some(mean), Some(var)) if mean.len() == var.len() => {
                    store.norms.insert(
                        k,
                        BatchNormState {
                            running_mean: mean,
                            running_var: var,
                            momentum: manifest.norm_momentum,
                            eps: manifest.norm_eps,
                        },
                    );
                }
                _ => return Err(bad(format!("incomplete norm state {k}"))),
            }
        }
        let model = Model::from_store(manifest.model, store)?;
        let adam = match manifest.adam {
            Some(mut a) => {
                let same_keys = |x: &BTreeMap<String, Vec<f32>>| x.keys().eq(model.store.params.keys());
                let same_sizes = |x: &BTreeMap<String, Vec<f32>>| x.iter().all(|(k, d)| model.store.params[k].len() == d.len());
                if !(same_keys(&m) && same_keys(&v) && same_sizes(&m) && same_sizes(&v)) {
                    return Err(bad("optimizer moments do not match the parameters"));
                }
                if a.t != manifest.step {
                    return Err(bad("step count disagrees with optimizer state"));
                }
                a.m = m;
                a.v = v;
                Some(a)
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(bad("optimizer moments without optimizer state")),
        };
        Ok(Self {
            model,
            adam,
            trainer: manifest.trainer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
