//! Checkpoint container: magic bytes `AWE1`, a length-prefixed JSON header
//! (tensor name/shape/offset table, config snapshot, training state, payload
//! checksum), then the raw little-endian 32-bit float payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RunConfig, TrainError};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"AWE1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    epoch: usize,
    val_map: f64,
    /// Optimizer step counter.
    adam_step: u64,
    /// Trainer scheduling state, carried for exact resume.
    lr: f64,
    plateau_best: f64,
    plateau_counter: usize,
    best_val_map: f64,
    best_epoch: usize,
    /// Seed and epoch determine every random stream; no generator state
    /// beyond them is needed.
    rng_seed: u64,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

/// A point-in-time snapshot of a training run: parameters, optimizer
/// moments, config and scheduler state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub val_map: f64,
    pub store: ParamStore<f32>,
    pub adam_step: u64,
    pub adam_moments: Vec<(String, Vec<f32>, Vec<f32>)>,
    pub lr: f64,
    pub plateau_best: f64,
    pub plateau_counter: usize,
    pub best_val_map: f64,
    pub best_epoch: usize,
}

fn push_f32s(payload: &mut Vec<u8>, values: &[f32]) -> (usize, usize) {
    let offset = payload.len();
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    (offset, values.len())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut payload: Vec<u8> = Vec::new();
        let mut tensors = Vec::new();
        for id in self.store.ids() {
            let t = self.store.get(id);
            let (offset, len) = push_f32s(&mut payload, t.data());
            tensors.push(TensorEntry {
                name: self.store.name(id).to_owned(),
                shape: t.shape().to_vec(),
                offset,
                len,
                trainable: t.requires_grad,
            });
        }
        for (name, m, v) in &self.adam_moments {
            let (offset, len) = push_f32s(&mut payload, m);
            tensors.push(TensorEntry {
                name: format!("adam.m.{name}"),
                shape: vec![1, len],
                offset,
                len,
                trainable: false,
            });
            let (offset, len) = push_f32s(&mut payload, v);
            tensors.push(TensorEntry {
                name: format!("adam.v.{name}"),
                shape: vec![1, len],
                offset,
                len,
                trainable: false,
            });
        }
        let digest = Sha256::digest(&payload);
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            val_map: self.val_map,
            adam_step: self.adam_step,
            lr: self.lr,
            plateau_best: self.plateau_best,
            plateau_counter: self.plateau_counter,
            best_val_map: self.best_val_map,
            best_epoch: self.best_epoch,
            rng_seed: self.config.seed,
            tensors,
            payload_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| TrainError::Persistence(format!("header encode: {e}")))?;
        let mut file = std::fs::File::create(path)
            .map_err(|e| TrainError::Persistence(format!("{}: {e}", path.display())))?;
        file.write_all(MAGIC)
            .and_then(|_| file.write_all(&(header_bytes.len() as u32).to_le_bytes()))
            .and_then(|_| file.write_all(&header_bytes))
            .and_then(|_| file.write_all(&payload))
            .map_err(|e| TrainError::Persistence(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| TrainError::Persistence(format!("{}: {e}", path.display())))?;
        if bytes.len() < 8 || &bytes[0..4] != MAGIC {
            return Err(TrainError::Checkpoint("bad magic bytes".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + header_len {
            return Err(TrainError::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
            .map_err(|e| TrainError::Checkpoint(format!("header decode: {e}")))?;
        if header.version != VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let payload = &bytes[8 + header_len..];
        let digest = Sha256::digest(payload);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        if hex != header.payload_sha256 {
            return Err(TrainError::Checkpoint("payload checksum mismatch".into()));
        }
        let read_f32s = |entry: &TensorEntry| -> Result<Vec<f32>, TrainError> {
            let start = entry.offset;
            let end = start + entry.len * 4;
            if end > payload.len() {
                return Err(TrainError::Checkpoint(format!(
                    "tensor '{}' exceeds payload",
                    entry.name
                )));
            }
            Ok(payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut store = ParamStore::new();
        let mut adam_m: Vec<(String, Vec<f32>)> = Vec::new();
        let mut adam_v: Vec<(String, Vec<f32>)> = Vec::new();
        for entry in &header.tensors {
            let data = read_f32s(entry)?;
            if let Some(name) = entry.name.strip_prefix("adam.m.") {
                adam_m.push((name.to_owned(), data));
            } else if let Some(name) = entry.name.strip_prefix("adam.v.") {
                adam_v.push((name.to_owned(), data));
            } else {
                let numel: usize = entry.shape.iter().product();
                if numel != entry.len {
                    return Err(TrainError::Checkpoint(format!(
                        "tensor '{}': shape {:?} vs {} values",
                        entry.name, entry.shape, entry.len
                    )));
                }
                let t = Tensor::from_vec(&entry.shape, data)
                    .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
                store.add(&entry.name, t, entry.trainable);
            }
        }
        if adam_m.len() != adam_v.len() {
            return Err(TrainError::Checkpoint(
                "optimizer moment tables out of sync".into(),
            ));
        }
        let adam_moments = adam_m
            .into_iter()
            .zip(adam_v)
            .map(|((name, m), (vname, v))| {
                if name != vname {
                    Err(TrainError::Checkpoint(format!(
                        "optimizer moment mismatch: '{name}' vs '{vname}'"
                    )))
                } else {
                    Ok((name, m, v))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            val_map: header.val_map,
            store,
            adam_step: header.adam_step,
            adam_moments,
            lr: header.lr,
            plateau_best: header.plateau_best,
            plateau_counter: header.plateau_counter,
            best_val_map: header.best_val_map,
            best_epoch: header.best_epoch,
        })
    }
}
