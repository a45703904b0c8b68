//! Multi-task losses, the meme-feature and emotion pretraining stages, and
//! the training loop.

mod hooks;
mod pretrain;

pub use hooks::{CheckpointHooks, NoHooks, TrainHooks};
pub use pretrain::{
    emotion_examples, pretrain_emotion, pretrain_meme_features, select_emotion_labels, PretrainConfig,
    PretrainReport,
};

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{training_examples, Corpus, TagTarget, TokenSequence};
use crate::error::{Error, Result};
use crate::evalkit::perplexity;
use crate::model::Model;
use crate::numerics::{adam_step, AdamConfig, AdamState, ParamSet, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the usage loss.
    pub lambda1: f64,
    /// Weight of the meme regression loss.
    pub lambda2: f64,
    /// Weight of an emotion cross-entropy term at meme tags. Zero by default,
    /// which leaves the objective as text + usage + regression.
    pub lambda_emotion: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    /// Linear warmup from 0 to `lr`.
    pub warmup_steps: usize,
    /// Linear decay to 0 over the planned number of steps, after warmup.
    pub lr_decay: bool,
    /// Rescales gradients to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub pretrain_memes: bool,
    pub pretrain_emotion: bool,
    pub meme_pretrain: PretrainConfig,
    pub emotion_pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_emotion: 0.0,
            batch_size: 8,
            max_len: 500,
            epochs: 1,
            max_steps: None,
            warmup_steps: 0,
            lr_decay: false,
            grad_clip: None,
            seed: 0,
            pretrain_memes: false,
            pretrain_emotion: false,
            meme_pretrain: PretrainConfig {
                steps: 500,
                lr: 1e-3,
                batch_size: 0,
                seed: 0,
            },
            emotion_pretrain: PretrainConfig {
                steps: 300,
                lr: 1e-3,
                batch_size: 16,
                seed: 0,
            },
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda_emotion >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` of a run planned for `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.lr_decay || total <= self.warmup_steps {
            return self.lr;
        }
        let left = total.saturating_sub(step) as f64 / (total - self.warmup_steps) as f64;
        self.lr * left
    }

    pub fn loss_weights<'a>(&self, emotion_labels: &'a [String]) -> LossWeights<'a> {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda_emotion: self.lambda_emotion,
            emotion_labels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights<'a> {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_emotion: f64,
    /// Emotion classes in head order; tags with other labels are skipped.
    pub emotion_labels: &'a [String],
}

impl LossWeights<'static> {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            lambda_emotion: 0.0,
            emotion_labels: &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_TR")]
    pub l_tr: f64,
    #[serde(rename = "L_UP")]
    pub l_up: f64,
    #[serde(rename = "L_MS")]
    pub l_ms: f64,
    /// Emotion cross-entropy; 0 unless its weight is positive.
    #[serde(rename = "L_EMO")]
    pub l_emo: f64,
    pub total: f64,
    /// Supervised next-token positions.
    pub n_tokens: usize,
    /// Supervised tags.
    pub n_tags: usize,
    /// Supervised tags followed by a meme.
    pub n_meme_tags: usize,
    pub n_emotion_tags: usize,
}

/// Records the weighted multi-task loss of `batch` on `tape`.
///
/// `L_TR` is the token mean of next-token NLL over response positions,
/// `L_UP` the mean two-class cross-entropy over supervised tags and `L_MS`
/// the mean squared L2 distance between the regressed vector and the meme
/// feature over supervised tags that carry a meme (zero when there are none).
/// With a positive emotion weight, the mean emotion cross-entropy over
/// supervised meme tags with a known label is added as well.
pub fn compute_losses<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    batch: &[TokenSequence],
    w: &LossWeights<'_>,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let n_tokens: usize = batch.iter().map(TokenSequence::num_lm_targets).sum();
    let n_tags: usize = batch.iter().map(|s| s.supervised_tags().count()).sum();
    let n_meme_tags: usize = batch.iter().map(|s| s.supervised_tags().filter(|t| t.y).count()).sum();
    if n_tokens == 0 {
        return Err(Error::Empty("batch has no supervised response tokens".into()));
    }
    let use_emotion = w.lambda_emotion > 0.0;
    let emotion_index: HashMap<&str, usize> = w
        .emotion_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let emotion_of = |t: &TagTarget| -> Option<usize> {
        t.emotion
            .as_deref()
            .filter(|_| t.supervised && t.y)
            .and_then(|e| emotion_index.get(e).copied())
    };
    let n_emotion_tags: usize = if use_emotion {
        batch.iter().map(|s| s.tags.iter().filter_map(emotion_of).count()).sum()
    } else {
        0
    };

    let mut tr: Option<Var> = None;
    let mut up: Option<Var> = None;
    let mut ms: Option<Var> = None;
    let mut emo: Option<Var> = None;
    let accumulate = |tape: &mut Tape<T>, acc: &mut Option<Var>, v: Var| -> Result<()> {
        *acc = Some(match *acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
        Ok(())
    };
    for seq in batch {
        let fwd = model.forward_tape(tape, params, seq)?;
        let count = seq.num_lm_targets();
        if count > 0 {
            let ce = tape.cross_entropy(fwd.lm_logits, &seq.lm_labels)?;
            let s = tape.scale(ce, T::of(count as f64 / n_tokens as f64));
            accumulate(tape, &mut tr, s)?;
        }
        let Some(heads) = fwd.heads else { continue };
        let rows: Vec<usize> = (0..seq.tags.len()).filter(|&i| seq.tags[i].supervised).collect();
        if !rows.is_empty() {
            let logits = tape.embedding_gather(heads.usage, &rows)?;
            let targets: Vec<usize> = rows.iter().map(|&i| usize::from(seq.tags[i].y)).collect();
            let ce = tape.cross_entropy(logits, &targets)?;
            let s = tape.scale(ce, T::of(rows.len() as f64 / n_tags as f64));
            accumulate(tape, &mut up, s)?;
        }
        let meme_rows: Vec<usize> = rows.iter().copied().filter(|&i| seq.tags[i].y).collect();
        if !meme_rows.is_empty() {
            let pred = tape.embedding_gather(heads.regress, &meme_rows)?;
            let dm = model.config.meme_dim;
            let mut target = Vec::with_capacity(meme_rows.len() * dm);
            for &i in &meme_rows {
                let f = seq.tags[i].feature.as_ref().ok_or_else(|| {
                    Error::invalid(format!("tag at position {} has a meme but no feature", seq.tags[i].pos))
                })?;
                target.extend(f.iter().map(|&v| T::of(v as f64)));
            }
            let target = tape.constant(Tensor::new(vec![meme_rows.len(), dm], target)?);
            let l2 = tape.l2_loss(pred, target)?;
            let s = tape.scale(l2, T::of(1.0 / n_meme_tags as f64));
            accumulate(tape, &mut ms, s)?;
        }
        if n_emotion_tags > 0 {
            let (emo_rows, labels): (Vec<usize>, Vec<usize>) = (0..seq.tags.len())
                .filter_map(|i| emotion_of(&seq.tags[i]).map(|l| (i, l)))
                .unzip();
            if !emo_rows.is_empty() {
                let logits = tape.embedding_gather(heads.emotion, &emo_rows)?;
                let ce = tape.cross_entropy(logits, &labels)?;
                let s = tape.scale(ce, T::of(emo_rows.len() as f64 / n_emotion_tags as f64));
                accumulate(tape, &mut emo, s)?;
            }
        }
    }
    let tr = tr.expect("n_tokens > 0");
    let value = |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
    let (l_tr, l_up, l_ms, l_emo) = (value(tape, Some(tr)), value(tape, up), value(tape, ms), value(tape, emo));
    let mut total = tr;
    for (part, weight) in [(up, w.lambda1), (ms, w.lambda2), (emo, w.lambda_emotion)] {
        if let Some(part) = part {
            let s = tape.scale(part, T::of(weight));
            total = tape.add(total, s)?;
        }
    }
    let breakdown = LossBreakdown {
        l_tr,
        l_up,
        l_ms,
        l_emo,
        total: tape.value(total).item().as_f64(),
        n_tokens,
        n_tags,
        n_meme_tags,
        n_emotion_tags,
    };
    Ok((total, breakdown))
}

/// Loss of `batch` with dropout off.
pub fn evaluate_losses(model: &Model, batch: &[TokenSequence], w: &LossWeights<'_>) -> Result<LossBreakdown> {
    let mut tape = Tape::inference();
    compute_losses(model, &mut tape, &model.params, batch, w).map(|(_, b)| b)
}

/// All response examples of `corpus`, one per utterance after the first.
pub fn corpus_examples(corpus: &Corpus, max_len: usize) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for d in &corpus.dialogues {
        out.extend(training_examples(d, &corpus.catalog, max_len)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(rename = "L_TR")]
    pub l_tr: f64,
    #[serde(rename = "L_UP")]
    pub l_up: f64,
    #[serde(rename = "L_MS")]
    pub l_ms: f64,
    #[serde(rename = "L_EMO", skip_serializing_if = "Option::is_none", default)]
    pub l_emo: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub valid_ppl: Option<f64>,
    pub is_best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: Vec<EpochLog>,
    pub best_valid_ppl: Option<f64>,
    pub meme_pretrain: Option<PretrainReport>,
    pub emotion_pretrain: Option<PretrainReport>,
}

/// Scales all gradients by one factor so their joint L2 norm is at most `max`.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = (max / norm) as f32;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

pub(crate) fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_add(1)
}

/// Runs the enabled pretraining stages, then the main multi-task loop.
///
/// Examples are shuffled per epoch from a ChaCha stream seeded by
/// `cfg.seed`, and every step's dropout stream is derived from the seed and
/// the step number, so a run is reproducible bit for bit. A non-finite loss
/// aborts before the update; checkpoints already written are kept.
pub fn train(
    model: &mut Model,
    train_corpus: &Corpus,
    valid: Option<&Corpus>,
    emotion_labels: &[String],
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if cfg.max_len > model.config.max_positions {
        return Err(Error::invalid(format!(
            "max_len {} exceeds the model's {} positions",
            cfg.max_len, model.config.max_positions
        )));
    }
    let mut summary = TrainSummary {
        steps: 0,
        epochs: Vec::new(),
        best_valid_ppl: None,
        meme_pretrain: None,
        emotion_pretrain: None,
    };
    if cfg.pretrain_memes {
        summary.meme_pretrain = Some(pretrain_meme_features(model, &train_corpus.catalog, &cfg.meme_pretrain)?);
    }
    if cfg.pretrain_emotion {
        summary.emotion_pretrain = Some(pretrain_emotion(
            model,
            train_corpus,
            emotion_labels,
            cfg.max_len,
            &cfg.emotion_pretrain,
        )?);
    }

    let examples = corpus_examples(train_corpus, cfg.max_len)?;
    if examples.is_empty() {
        return Err(Error::Empty("training corpus yields no examples".into()));
    }
    let weights = cfg.loss_weights(emotion_labels);
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let planned = cfg.max_steps.unwrap_or(usize::MAX).min(per_epoch.saturating_mul(cfg.epochs));
    let mut adam = cfg.adam();
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0usize;
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..cfg.epochs {
        if step >= limit {
            break;
        }
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= limit {
                break;
            }
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let mut tape = Tape::new(true, step_seed(cfg.seed, step));
            let (loss, b) = compute_losses(model, &mut tape, &model.params, &batch, &weights)?;
            if !b.total.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}: {b:?}")));
            }
            let mut grads = tape.backward(loss)?.into_param_grads(&model.params);
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            adam.lr = cfg.lr_at(step, planned);
            adam_step(&mut model.params, &grads, &mut state, &adam)?;
            step += 1;
            sum += b.total;
            n += 1;
            hooks.on_step(&StepLog {
                step,
                l_tr: b.l_tr,
                l_up: b.l_up,
                l_ms: b.l_ms,
                l_emo: (cfg.lambda_emotion > 0.0).then_some(b.l_emo),
                total: b.total,
                lr: adam.lr,
            })?;
        }
        if n == 0 {
            break 'epochs;
        }
        let valid_ppl = match valid {
            Some(v) if !v.dialogues.is_empty() => Some(perplexity(model, v, cfg.max_len)?),
            _ => None,
        };
        let is_best = match (valid_ppl, summary.best_valid_ppl) {
            (Some(p), Some(best)) => p < best,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if is_best {
            summary.best_valid_ppl = valid_ppl;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            steps: step,
            mean_total: sum / n as f64,
            valid_ppl,
            is_best,
        };
        hooks.on_epoch(&log, model)?;
        summary.epochs.push(log);
    }
    summary.steps = step;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthConfig};
    use crate::model::ModelConfig;

    fn small(dropout: f64) -> (Corpus, Model) {
        let corpus = synth_corpus(&SynthConfig::new(6, 4, 10, 1)).unwrap();
        let mut cfg = ModelConfig::desk(corpus.vocab.len(), 16, 4);
        cfg.d_model = 16;
        cfg.d_ff = 32;
        cfg.n_heads = 2;
        cfg.max_positions = 64;
        cfg.head_hidden = 8;
        cfg.dropout_p = dropout;
        (corpus, Model::init(cfg, 2).unwrap())
    }

    #[test]
    fn untrained_lm_loss_is_near_log_vocab() {
        let corpus = synth_corpus(&SynthConfig::new(8, 4, 50, 1)).unwrap();
        let model = Model::init(ModelConfig::desk(corpus.vocab.len(), 16, 4), 3).unwrap();
        let ex = corpus_examples(&corpus, 64).unwrap();
        let b = evaluate_losses(&model, &ex, &LossWeights::new(1.0, 1.0)).unwrap();
        assert!((b.l_tr - (corpus.vocab.len() as f64).ln()).abs() < 0.3, "{b:?}");
    }

    #[test]
    fn total_is_affine_in_lambdas() {
        let (corpus, model) = small(0.0);
        let ex = corpus_examples(&corpus, 64).unwrap();
        let base = evaluate_losses(&model, &ex, &LossWeights::new(0.0, 0.0)).unwrap();
        assert_eq!(base.total, base.l_tr);
        for (l1, l2) in [(1.0, 1.0), (0.5, 2.0), (3.0, 0.25)] {
            let b = evaluate_losses(&model, &ex, &LossWeights::new(l1, l2)).unwrap();
            assert!((b.total - (b.l_tr + l1 * b.l_up + l2 * b.l_ms)).abs() < 1e-6);
            assert_eq!((b.l_tr, b.l_up, b.l_ms), (base.l_tr, base.l_up, base.l_ms));
        }
    }

    #[test]
    fn no_memes_means_zero_regression_loss() {
        let (corpus, model) = small(0.0);
        let ex: Vec<TokenSequence> = corpus_examples(&corpus, 64)
            .unwrap()
            .into_iter()
            .filter(|s| s.supervised_tags().all(|t| !t.y))
            .collect();
        assert!(!ex.is_empty());
        let b = evaluate_losses(&model, &ex, &LossWeights::new(1.0, 1.0)).unwrap();
        assert_eq!(b.l_ms, 0.0);
        assert_eq!(b.n_meme_tags, 0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (_, model) = small(0.0);
        assert!(evaluate_losses(&model, &[], &LossWeights::new(1.0, 1.0)).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let (corpus, mut model) = small(0.0);
        let before = model.params.clone();
        let n = corpus_examples(&corpus, 64).unwrap().len();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: n,
            max_len: 64,
            epochs: 3,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        train(&mut model, &corpus, None, &[], &cfg, &mut |s: &StepLog| log.push(s.total)).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|&t| t == log[0]));
        assert_eq!(model.params, before);
    }

    #[test]
    fn same_seed_same_run() {
        let run = || {
            let (corpus, mut model) = small(0.1);
            let cfg = TrainConfig {
                lr: 1e-3,
                batch_size: 4,
                max_len: 64,
                epochs: 8,
                seed: 11,
                ..TrainConfig::default()
            };
            let mut log = Vec::new();
            train(&mut model, &corpus, Some(&corpus), &[], &cfg, &mut |s: &StepLog| log.push(s.clone())).unwrap();
            (log, model.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let mean = |xs: &[StepLog]| xs.iter().map(|s| s.total).sum::<f64>() / xs.len() as f64;
        assert!(mean(&a[a.len() - 4..]) < mean(&a[..4]));
    }
}
