//! Versioned binary checkpoints.
//!
//! Layout: the magic `PMXC`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the UTF-8 JSON manifest, then every
//! tensor of [`Model::tensors`] as little-endian `f32` values in manifest
//! order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainHistory};
use crate::dataset::{Standardizer, CLINICAL_DIM, NUM_CLASSES};
use crate::encoders::EncoderDims;
use crate::error::{PmxError, Result};
use crate::model::{Ablation, Model};
use crate::prototypes::PrototypeSource;
use crate::rng::stream;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMXC";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Position of the training random streams when the checkpoint was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position of the shuffle stream.
    pub shuffle_word_pos: u128,
    /// ChaCha word position of the dropout stream.
    pub dropout_word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, shuffle: &ChaCha8Rng, dropout: &ChaCha8Rng) -> Self {
        Self {
            seed,
            shuffle_word_pos: shuffle.get_word_pos(),
            dropout_word_pos: dropout.get_word_pos(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    /// Standardizer fitted on the training partition, at storage precision.
    pub standardizer: Standardizer,
    /// Raw clinical feature means per class over the training partition.
    pub class_norms: [[f64; CLINICAL_DIM]; NUM_CLASSES],
    pub history: TrainHistory,
    pub split_seed: u64,
    pub rng_state: RngState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    dims: EncoderDims,
    ablation: Ablation,
    per_class: usize,
    tensors: Vec<TensorEntry>,
    prototype_sources: Vec<Option<PrototypeSource>>,
    prototypes_initialized: bool,
    standardizer: Standardizer,
    class_norms: [[f64; CLINICAL_DIM]; NUM_CLASSES],
    history: TrainHistory,
    split_seed: u64,
    rng_state: RngState,
    payload_bytes: u64,
    payload_sha256: String,
}

fn payload_of(model: &Model) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    for (name, t) in model.tensors() {
        entries.push(TensorEntry {
            name,
            rows: t.rows(),
            cols: t.cols(),
        });
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    (entries, bytes)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// The raw tensor payload as written to disk.
    pub fn payload(&self) -> Vec<u8> {
        payload_of(&self.model).1
    }

    /// Short content hash of the tensor payload.
    pub fn checkpoint_id(&self) -> String {
        sha256_hex(&self.payload())[..16].to_string()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (tensors, payload) = payload_of(&self.model);
        let manifest = Manifest {
            config: self.config.clone(),
            dims: self.model.dims,
            ablation: self.model.ablation,
            per_class: self.model.bank.per_class,
            tensors,
            prototype_sources: self.model.bank.sources.clone(),
            prototypes_initialized: self.model.bank.initialized,
            standardizer: self.standardizer.clone(),
            class_norms: self.class_norms,
            history: self.history.clone(),
            split_seed: self.split_seed,
            rng_state: self.rng_state,
            payload_bytes: payload.len() as u64,
            payload_sha256: sha256_hex(&payload),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, reason: String| PmxError::Corrupt {
            offset: offset as u64,
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(bytes.len(), format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt(0, "missing PMXC magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(PmxError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let manifest_end = usize::try_from(manifest_len)
            .ok()
            .and_then(|l| HEADER_LEN.checked_add(l))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt(bytes.len(), format!("manifest of {manifest_len} bytes runs past end of file")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
            .map_err(|e| corrupt(HEADER_LEN, format!("unreadable manifest: {e}")))?;
        let payload = &bytes[manifest_end..];
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(corrupt(
                bytes.len(),
                format!("payload has {} bytes, manifest declares {}", payload.len(), manifest.payload_bytes),
            ));
        }
        if sha256_hex(payload) != manifest.payload_sha256 {
            return Err(corrupt(manifest_end, "payload checksum mismatch".into()));
        }

        let mut model = Model::new(manifest.dims, manifest.per_class, manifest.ablation, &mut stream(0));
        let mut slots = model.named_tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(corrupt(
                HEADER_LEN,
                format!("manifest lists {} tensors, model has {}", manifest.tensors.len(), slots.len()),
            ));
        }
        let mut offset = 0;
        for ((name, slot), entry) in slots.iter_mut().zip(&manifest.tensors) {
            if *name != entry.name || slot.shape() != (entry.rows, entry.cols) {
                return Err(corrupt(
                    HEADER_LEN,
                    format!(
                        "tensor {} ({}x{}) does not match model tensor {name} {:?}",
                        entry.name,
                        entry.rows,
                        entry.cols,
                        slot.shape()
                    ),
                ));
            }
            for v in slot.values_mut() {
                let raw: [u8; 4] = payload[offset..offset + 4].try_into().expect("4 bytes");
                *v = f32::from_le_bytes(raw) as f64;
                offset += 4;
            }
        }
        if offset != payload.len() {
            return Err(corrupt(manifest_end + offset, "trailing payload bytes".into()));
        }
        drop(slots);
        if manifest.prototype_sources.len() != model.bank.len() {
            return Err(corrupt(HEADER_LEN, "prototype source count does not match the bank".into()));
        }
        model.bank.sources = manifest.prototype_sources;
        model.bank.initialized = manifest.prototypes_initialized;
        Ok(Self {
            config: manifest.config,
            model,
            standardizer: manifest.standardizer,
            class_norms: manifest.class_norms,
            history: manifest.history,
            split_seed: manifest.split_seed,
            rng_state: manifest.rng_state,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| PmxError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| PmxError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
