//! Checkpoint files: a one-line JSON manifest, a newline, then every
//! parameter as little-endian f64 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::model::{ModelConfig, ReDan};
use crate::tensor::Tensor;
use crate::{Error, Result};

const FORMAT: &str = "redan-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ReDan,
    pub vocab: Vocabulary,
    /// Epoch the weights come from (0 = untrained).
    pub epoch: usize,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    epoch: usize,
    val_metric: Option<f64>,
    vocab: Vocabulary,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
    trainable: bool,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            config: self.model.config.clone(),
            epoch: self.epoch,
            val_metric: self.val_metric,
            vocab: self.vocab.clone(),
            params: store
                .iter()
                .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape(), trainable: p.trainable })
                .collect(),
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest always serializes");
        out.push(b'\n');
        out.reserve(store.scalar_count() * 8);
        for (_, p) in store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint has no manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        if manifest.vocab.len() != manifest.config.vocab_size {
            return Err(Error::Format("checkpoint vocabulary size disagrees with its config".into()));
        }
        let mut model = ReDan::new(manifest.config, None, 0)?;
        if model.store.len() != manifest.params.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} parameters, model has {}",
                manifest.params.len(),
                model.store.len()
            )));
        }
        let mut blob = &bytes[split + 1..];
        let ids: Vec<_> = model.store.ids().collect();
        for (id, entry) in ids.into_iter().zip(&manifest.params) {
            let p = model.store.get_mut(id);
            if p.name != entry.name || p.value.shape() != entry.shape {
                return Err(Error::Format(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            let n = entry.shape[0] * entry.shape[1];
            if blob.len() < n * 8 {
                return Err(Error::Format(format!("checkpoint blob truncated in {}", entry.name)));
            }
            let (head, rest) = blob.split_at(n * 8);
            let data = head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            p.value = Tensor::new(entry.shape[0], entry.shape[1], data)?;
            p.trainable = entry.trainable;
            blob = rest;
        }
        if !blob.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint blob", blob.len())));
        }
        Ok(Self { model, vocab: manifest.vocab, epoch: manifest.epoch, val_metric: manifest.val_metric })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
