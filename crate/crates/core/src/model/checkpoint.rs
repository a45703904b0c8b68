//! Checkpoint file: `MODC`, a u32 LE header length, a JSON header holding the
//! model config, vocabulary, emotion labels and a free-form metadata object,
//! then the `MODG` tensor blob.

use std::path::Path;

use serde_json::{json, Value};

use super::{Model, ModelConfig};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::numerics::blob::{blob_bytes, read_blob};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MODC";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocab,
    /// Emotion classes in head output order.
    pub emotion_labels: Vec<String>,
    /// Training configuration echo and anything else worth keeping.
    pub meta: Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = json!({
            "config": self.model.config,
            "vocab": self.vocab.to_json(),
            "emotion_labels": self.emotion_labels,
            "meta": self.meta,
        });
        let header = serde_json::to_vec(&header)?;
        let len = u32::try_from(header.len()).map_err(|_| Error::Format("checkpoint header too large".into()))?;
        let mut out = Vec::with_capacity(8 + header.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob_bytes(&self.model.params));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header = bytes
            .get(8..8 + len)
            .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
        let header: Value = serde_json::from_slice(header)?;
        let config: ModelConfig = serde_json::from_value(
            header
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint header lacks config".into()))?,
        )?;
        let vocab = Vocab::from_json(
            header
                .get("vocab")
                .ok_or_else(|| Error::Format("checkpoint header lacks vocab".into()))?,
        )?;
        let emotion_labels: Vec<String> =
            serde_json::from_value(header.get("emotion_labels").cloned().unwrap_or(Value::Array(vec![])))?;
        let meta = header.get("meta").cloned().unwrap_or(Value::Null);
        let params = read_blob(&bytes[8 + len..])?;
        let ckpt = Self {
            model: Model::from_params(config, params)?,
            vocab,
            emotion_labels,
            meta,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.model.config;
        if self.vocab.len() != cfg.vocab_size {
            return Err(Error::Format(format!(
                "vocabulary has {} entries, model expects {}",
                self.vocab.len(),
                cfg.vocab_size
            )));
        }
        if !self.emotion_labels.is_empty() && self.emotion_labels.len() > cfg.n_emotions {
            return Err(Error::Format(format!(
                "{} emotion labels for a {}-way emotion head",
                self.emotion_labels.len(),
                cfg.n_emotions
            )));
        }
        if !self.model.params.all_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
