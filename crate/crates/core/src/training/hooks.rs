use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{EpochLog, StepLog};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model};

/// Observer for [`super::train`].
pub trait TrainHooks {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _log: &EpochLog, _model: &Model) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

impl<F: FnMut(&StepLog)> TrainHooks for F {
    fn on_step(&mut self, log: &StepLog) -> Result<()> {
        self(log);
        Ok(())
    }
}

/// Writes `metrics.jsonl` (one line per step), `epoch-N.ckpt` after every
/// epoch and `best.ckpt` whenever validation perplexity improves.
pub struct CheckpointHooks {
    dir: PathBuf,
    vocab: Vocab,
    emotion_labels: Vec<String>,
    meta: Value,
    metrics: BufWriter<File>,
}

impl CheckpointHooks {
    pub fn new(dir: &Path, vocab: Vocab, emotion_labels: Vec<String>, meta: Value) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            vocab,
            emotion_labels,
            meta,
            metrics: BufWriter::new(file),
        })
    }

    pub fn checkpoint(&self, model: &Model) -> Checkpoint {
        Checkpoint {
            model: model.clone(),
            vocab: self.vocab.clone(),
            emotion_labels: self.emotion_labels.clone(),
            meta: self.meta.clone(),
        }
    }
}

impl TrainHooks for CheckpointHooks {
    fn on_step(&mut self, log: &StepLog) -> Result<()> {
        let path = self.dir.join("metrics.jsonl");
        serde_json::to_writer(&mut self.metrics, log)?;
        self.metrics
            .write_all(b"\n")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(&path, e))
    }

    fn on_epoch(&mut self, log: &EpochLog, model: &Model) -> Result<()> {
        let ckpt = self.checkpoint(model);
        ckpt.save(&self.dir.join(format!("epoch-{}.ckpt", log.epoch)))?;
        if log.is_best {
            ckpt.save(&self.dir.join("best.ckpt"))?;
        }
        Ok(())
    }
}
