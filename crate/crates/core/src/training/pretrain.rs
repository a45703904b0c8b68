//! The two auxiliary stages run before main training.

use std::collections::{BTreeSet, HashMap};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{corpus_examples, step_seed};
use crate::corpus::{Corpus, MemeCatalog, TokenSequence};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{adam_step, AdamConfig, AdamState, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Examples per step; 0 means the full set every step.
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Accuracy on the stage's own training examples, dropout off.
    pub accuracy: f64,
}

fn adam(lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        ..AdamConfig::default()
    }
}

const MEME_CLS: [&str; 4] = ["meme_cls.fc.w", "meme_cls.fc.b", "meme_cls.out.w", "meme_cls.out.b"];

/// Trains the meme projection, through a throwaway MLP classifier, to
/// predict each catalog meme's group from its feature. The projection is
/// written back into `model`; the classifier is discarded.
pub fn pretrain_meme_features(model: &mut Model, catalog: &MemeCatalog, cfg: &PretrainConfig) -> Result<PretrainReport> {
    let labels: Vec<usize> = catalog.memes().iter().map(|m| m.group.index()).collect();
    if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::invalid("meme feature pretraining needs at least two groups in the catalog"));
    }
    if catalog.feature_dim() != model.config.meme_dim {
        return Err(Error::shape(
            "pretrain_meme_features",
            format!("catalog features are {}-d, model expects {}", catalog.feature_dim(), model.config.meme_dim),
        ));
    }
    let (d, h) = (model.config.d_model, model.config.head_hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0f32, 0.02).expect("valid normal");
    let mut draw = |shape: &[usize]| -> Result<Tensor<f32>> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
    };
    let mut ps = ParamSet::new();
    let w = ps.insert("meme_proj.w", model.params.get("meme_proj.w")?.clone())?;
    let b = ps.insert("meme_proj.b", model.params.get("meme_proj.b")?.clone())?;
    let fw = ps.insert(MEME_CLS[0], draw(&[d, h])?)?;
    let fb = ps.insert(MEME_CLS[1], Tensor::zeros(&[h]))?;
    let ow = ps.insert(MEME_CLS[2], draw(&[h, 4])?)?;
    let ob = ps.insert(MEME_CLS[3], Tensor::zeros(&[4]))?;

    let n = labels.len();
    let dm = catalog.feature_dim();
    let feats: Vec<f32> = catalog.memes().iter().flat_map(|m| m.feature.iter().copied()).collect();
    let p = model.config.dropout_p;
    let forward = |tape: &mut Tape<f32>, ps: &ParamSet<f32>, rows: &[usize]| -> Result<Var> {
        let x: Vec<f32> = rows.iter().flat_map(|&i| feats[i * dm..(i + 1) * dm].iter().copied()).collect();
        let x = tape.constant(Tensor::new(vec![rows.len(), dm], x)?);
        let layer = |tape: &mut Tape<f32>, x: Var, w: usize, b: usize| -> Result<Var> {
            let (w, b) = (tape.param(ps, w), tape.param(ps, b));
            let y = tape.matmul(x, w)?;
            tape.add(y, b)
        };
        let e = layer(tape, x, w, b)?;
        let hdn = layer(tape, e, fw, fb)?;
        let hdn = tape.relu(hdn);
        let hdn = tape.dropout(hdn, p)?;
        layer(tape, hdn, ow, ob)
    };

    let opt = adam(cfg.lr);
    let mut state = AdamState::new(&ps);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba7c);
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let rows: Vec<usize> = if cfg.batch_size == 0 || cfg.batch_size >= n {
            (0..n).collect()
        } else {
            sample(&mut batch_rng, n, cfg.batch_size).into_vec()
        };
        let targets: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new(true, step_seed(cfg.seed, step));
        let logits = forward(&mut tape, &ps, &rows)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        final_loss = tape.value(loss).item() as f64;
        if !final_loss.is_finite() {
            return Err(Error::NonFinite(format!("meme pretraining loss at step {step}")));
        }
        let grads = tape.backward(loss)?.into_param_grads(&ps);
        adam_step(&mut ps, &grads, &mut state, &opt)?;
    }

    let all: Vec<usize> = (0..n).collect();
    let mut tape = Tape::inference();
    let logits = forward(&mut tape, &ps, &all)?;
    let correct = all
        .iter()
        .filter(|&&i| argmax(tape.value(logits).row(i)) == labels[i])
        .count();
    model.params.set("meme_proj.w", ps.get("meme_proj.w")?.clone())?;
    model.params.set("meme_proj.b", ps.get("meme_proj.b")?.clone())?;
    Ok(PretrainReport {
        steps: cfg.steps,
        final_loss,
        accuracy: correct as f64 / n as f64,
    })
}

pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// The `max` most frequent emotion labels on meme utterances, by count
/// then by label.
pub fn select_emotion_labels(corpus: &Corpus, max: usize) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for d in &corpus.dialogues {
        for u in &d.utterances {
            if let (Some(_), Some(e)) = (u.meme_id, u.emotion.as_deref()) {
                *counts.entry(e).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(max).map(|(e, _)| e.to_string()).collect()
}

/// Response examples whose final utterance carries a meme with an emotion in
/// `labels`, paired with the label index.
pub fn emotion_examples(corpus: &Corpus, labels: &[String], max_len: usize) -> Result<Vec<(TokenSequence, usize)>> {
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut out = Vec::new();
    for seq in corpus_examples(corpus, max_len)? {
        let label = seq
            .supervised_tags()
            .find(|t| t.y)
            .and_then(|t| t.emotion.as_deref())
            .and_then(|e| index.get(e).copied());
        if let Some(l) = label {
            out.push((seq, l));
        }
    }
    Ok(out)
}

/// Row of the supervised tag among a sequence's tags.
fn supervised_row(seq: &TokenSequence) -> usize {
    seq.tags.iter().position(|t| t.supervised).expect("examples have a supervised tag")
}

/// Trains the whole network to classify the emotion of the meme in the final
/// utterance, at that utterance's tag. Examples are drawn with probability
/// inversely proportional to their label's frequency, so every kept label is
/// equally likely per draw.
pub fn pretrain_emotion(
    model: &mut Model,
    corpus: &Corpus,
    labels: &[String],
    max_len: usize,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if labels.is_empty() {
        return Err(Error::Empty("no emotion labels to pretrain on".into()));
    }
    if labels.len() > model.config.n_emotions {
        return Err(Error::invalid(format!(
            "{} emotion labels for a {}-way head",
            labels.len(),
            model.config.n_emotions
        )));
    }
    let examples = emotion_examples(corpus, labels, max_len)?;
    if examples.is_empty() {
        return Err(Error::Empty("corpus has no emotion-labelled meme responses".into()));
    }
    let mut freq = vec![0usize; labels.len()];
    for (_, l) in &examples {
        freq[*l] += 1;
    }
    let weights: Vec<f64> = examples.iter().map(|(_, l)| 1.0 / freq[*l] as f64).collect();
    let picker = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
    let batch = if cfg.batch_size == 0 { examples.len() } else { cfg.batch_size };

    let opt = adam(cfg.lr);
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..batch).map(|_| picker.sample(&mut rng)).collect();
        let mut tape = Tape::new(true, step_seed(cfg.seed, step));
        let mut total: Option<Var> = None;
        for &i in &picks {
            let (seq, label) = &examples[i];
            let fwd = model.forward_tape(&mut tape, &model.params, seq)?;
            let heads = fwd.heads.expect("examples have tags");
            let logits = tape.embedding_gather(heads.emotion, &[supervised_row(seq)])?;
            let ce = tape.cross_entropy(logits, &[*label])?;
            let ce = tape.scale(ce, 1.0 / picks.len() as f32);
            total = Some(match total {
                None => ce,
                Some(t) => tape.add(t, ce)?,
            });
        }
        let loss = total.expect("batch is non-empty");
        final_loss = tape.value(loss).item() as f64;
        if !final_loss.is_finite() {
            return Err(Error::NonFinite(format!("emotion pretraining loss at step {step}")));
        }
        let grads = tape.backward(loss)?.into_param_grads(&model.params);
        adam_step(&mut model.params, &grads, &mut state, &opt)?;
    }
    let correct = examples
        .iter()
        .filter(|(seq, label)| {
            emotion_logits(model, seq)
                .map(|l| argmax(&l) == *label)
                .unwrap_or(false)
        })
        .count();
    Ok(PretrainReport {
        steps: cfg.steps,
        final_loss,
        accuracy: correct as f64 / examples.len() as f64,
    })
}

/// Emotion logits at the supervised tag of `seq`, dropout off.
pub(crate) fn emotion_logits(model: &Model, seq: &TokenSequence) -> Result<Vec<f32>> {
    let mut tape = Tape::inference();
    let fwd = model.forward_tape(&mut tape, &model.params, seq)?;
    let heads = fwd.heads.ok_or_else(|| Error::invalid("sequence has no tags"))?;
    Ok(tape.value(heads.emotion).row(supervised_row(seq)).to_vec())
}
