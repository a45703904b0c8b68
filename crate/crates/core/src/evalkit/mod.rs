//! Perplexity, BLEU, distinct-n, recall@k, usage and emotion accuracy.

mod ngram;
mod report;

pub use ngram::{bleu_n, distinct_n};
pub use report::{evaluate, EvalOptions, EvalReport, RecallEntry};

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, MemeId, TokenSequence};
use crate::decoding::{rank_candidates, usage_probability};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Tensor, IGNORE_INDEX};
use crate::training::corpus_examples;

/// Head outputs at one tag.
#[derive(Clone, Debug, PartialEq)]
pub struct TagPrediction {
    pub usage_prob: f64,
    pub regress: Vec<f32>,
    pub emotion_logits: Vec<f32>,
}

/// What the metrics need from a model. [`Model`] implements it; tests plug in
/// reference models (uniform language model, random ranker).
pub trait DialogueModel {
    fn vocab_size(&self) -> usize;

    /// Next-token logits at every position, `[len, vocab]`, plus head outputs
    /// at every tag in sequence order.
    fn predict(&self, seq: &TokenSequence) -> Result<(Tensor<f32>, Vec<TagPrediction>)>;

    /// Candidates ordered best first.
    fn rank_memes(&self, pred: &TagPrediction, candidates: &[(MemeId, &[f32])]) -> Vec<MemeId> {
        rank_candidates(&pred.regress, candidates.iter().copied())
            .into_iter()
            .map(|(id, _)| id)
            .collect()
    }
}

impl DialogueModel for Model {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn predict(&self, seq: &TokenSequence) -> Result<(Tensor<f32>, Vec<TagPrediction>)> {
        let out = self.forward(seq)?;
        let tags = out
            .tag_positions
            .iter()
            .enumerate()
            .map(|(i, _)| TagPrediction {
                usage_prob: usage_probability(out.usage_logits.row(i)),
                regress: out.regress.row(i).to_vec(),
                emotion_logits: out.emotion_logits.row(i).to_vec(),
            })
            .collect();
        Ok((out.lm_logits, tags))
    }
}

/// Every logit equal: each next token has probability `1 / vocab`.
pub struct UniformModel {
    pub vocab: usize,
}

impl DialogueModel for UniformModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn predict(&self, seq: &TokenSequence) -> Result<(Tensor<f32>, Vec<TagPrediction>)> {
        let tags = seq
            .tags
            .iter()
            .map(|_| TagPrediction {
                usage_prob: 0.5,
                regress: Vec::new(),
                emotion_logits: Vec::new(),
            })
            .collect();
        Ok((Tensor::zeros(&[seq.len(), self.vocab]), tags))
    }
}

/// Ranks candidates in a uniformly random order.
pub struct RandomRanker {
    pub vocab: usize,
    rng: RefCell<ChaCha8Rng>,
}

impl RandomRanker {
    pub fn new(vocab: usize, seed: u64) -> Self {
        Self {
            vocab,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl DialogueModel for RandomRanker {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn predict(&self, seq: &TokenSequence) -> Result<(Tensor<f32>, Vec<TagPrediction>)> {
        UniformModel { vocab: self.vocab }.predict(seq)
    }

    fn rank_memes(&self, _pred: &TagPrediction, candidates: &[(MemeId, &[f32])]) -> Vec<MemeId> {
        let mut ids: Vec<MemeId> = candidates.iter().map(|c| c.0).collect();
        ids.shuffle(&mut *self.rng.borrow_mut());
        ids
    }
}

/// One response example with the model's predictions at its tag.
pub(crate) struct ScoredExample {
    pub seq: TokenSequence,
    pub nll: f64,
    pub tokens: usize,
    pub tag: Option<(usize, TagPrediction)>,
}

fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
    row[target] as f64 - max - z.ln()
}

pub(crate) fn score_examples<M: DialogueModel + ?Sized>(
    model: &M,
    corpus: &Corpus,
    max_len: usize,
) -> Result<Vec<ScoredExample>> {
    let mut out = Vec::new();
    for seq in corpus_examples(corpus, max_len)? {
        let (logits, preds) = model.predict(&seq)?;
        if logits.shape() != [seq.len(), model.vocab_size()] {
            return Err(Error::shape(
                "predict",
                format!("logits {:?} for length {} and vocab {}", logits.shape(), seq.len(), model.vocab_size()),
            ));
        }
        let (mut nll, mut tokens) = (0.0, 0);
        for (p, &label) in seq.lm_labels.iter().enumerate() {
            if label != IGNORE_INDEX {
                nll -= log_softmax_at(logits.row(p), label);
                tokens += 1;
            }
        }
        let tag = seq
            .tags
            .iter()
            .position(|t| t.supervised)
            .map(|i| (i, preds[i].clone()));
        out.push(ScoredExample { seq, nll, tokens, tag });
    }
    Ok(out)
}

fn ppl_of(scored: &[ScoredExample]) -> Result<f64> {
    let tokens: usize = scored.iter().map(|s| s.tokens).sum();
    if tokens == 0 {
        return Err(Error::Empty("no response tokens to score".into()));
    }
    let nll: f64 = scored.iter().map(|s| s.nll).sum();
    Ok((nll / tokens as f64).exp())
}

/// `exp` of the token-mean NLL over response positions.
pub fn perplexity<M: DialogueModel + ?Sized>(model: &M, corpus: &Corpus, max_len: usize) -> Result<f64> {
    ppl_of(&score_examples(model, corpus, max_len)?)
}

/// Fraction of supervised tags whose usage decision (`p >= threshold`)
/// matches the label.
pub fn usage_accuracy<M: DialogueModel + ?Sized>(
    model: &M,
    corpus: &Corpus,
    threshold: f64,
    max_len: usize,
) -> Result<f64> {
    usage_of(&score_examples(model, corpus, max_len)?, threshold).map(|(acc, _)| acc)
}

fn usage_of(scored: &[ScoredExample], threshold: f64) -> Result<(f64, usize)> {
    let mut n = 0;
    let mut correct = 0;
    for s in scored {
        if let Some((i, p)) = &s.tag {
            n += 1;
            correct += usize::from((p.usage_prob >= threshold) == s.seq.tags[*i].y);
        }
    }
    if n == 0 {
        return Err(Error::Empty("no labelled tags".into()));
    }
    Ok((correct as f64 / n as f64, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionAccuracy {
    pub top1: f64,
    pub top5: f64,
    pub count: usize,
}

/// Emotion accuracy at supervised meme tags whose label is in `labels`.
pub fn emotion_accuracy<M: DialogueModel + ?Sized>(
    model: &M,
    corpus: &Corpus,
    labels: &[String],
    max_len: usize,
) -> Result<EmotionAccuracy> {
    emotion_of(&score_examples(model, corpus, max_len)?, labels)
}

fn emotion_of(scored: &[ScoredExample], labels: &[String]) -> Result<EmotionAccuracy> {
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let (mut n, mut top1, mut top5) = (0usize, 0usize, 0usize);
    for s in scored {
        let Some((i, p)) = &s.tag else { continue };
        let t = &s.seq.tags[*i];
        let Some(&gold) = t.emotion.as_deref().filter(|_| t.y).and_then(|e| index.get(e)) else {
            continue;
        };
        let logits = &p.emotion_logits[..labels.len().min(p.emotion_logits.len())];
        if gold >= logits.len() {
            return Err(Error::invalid(format!("emotion head has {} outputs", logits.len())));
        }
        // rank of the gold label: classes strictly better, ties by index
        let rank = logits
            .iter()
            .enumerate()
            .filter(|&(j, &l)| l > logits[gold] || (l == logits[gold] && j < gold))
            .count();
        n += 1;
        top1 += usize::from(rank == 0);
        top5 += usize::from(rank < 5);
    }
    if n == 0 {
        return Err(Error::Empty("no emotion-labelled meme tags".into()));
    }
    Ok(EmotionAccuracy {
        top1: top1 as f64 / n as f64,
        top5: top5 as f64 / n as f64,
        count: n,
    })
}

/// Candidate pool size: `Some(n)` for one gold plus `n - 1` distractors,
/// `None` for the whole catalog.
pub type PoolSize = Option<usize>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallScores {
    pub n: PoolSize,
    pub turns: usize,
    /// `(k, score)` in ascending `k`.
    pub at_k: Vec<(usize, f64)>,
}

impl RecallScores {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.at_k.iter().find(|e| e.0 == k).map(|e| e.1)
    }
}

/// Gold memes of the meme-ending turns, with predictions.
fn meme_turns(scored: &[ScoredExample]) -> Vec<(MemeId, &TagPrediction)> {
    scored
        .iter()
        .filter_map(|s| {
            let (i, p) = s.tag.as_ref()?;
            let t = &s.seq.tags[*i];
            t.meme_id.filter(|_| t.y).map(|m| (m, p))
        })
        .collect()
}

/// Distractor order for turn `turn`: a seeded permutation of every non-gold
/// catalog id. Pools of different sizes take prefixes of the same order, so
/// a larger pool always contains a smaller one.
fn distractors(all: &[MemeId], gold: MemeId, seed: u64, turn: usize) -> Vec<MemeId> {
    let mut others: Vec<MemeId> = all.iter().copied().filter(|&m| m != gold).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (turn as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    others.shuffle(&mut rng);
    others
}

fn recall_of<M: DialogueModel + ?Sized>(
    model: &M,
    turns: &[(MemeId, &TagPrediction)],
    corpus: &Corpus,
    n: PoolSize,
    ks: &[usize],
    seed: u64,
) -> Result<RecallScores> {
    if turns.is_empty() {
        return Err(Error::Empty("no turns end in a meme".into()));
    }
    let all: Vec<MemeId> = corpus.catalog.ids().collect();
    let pool = n.unwrap_or(all.len());
    if pool == 0 || pool > all.len() {
        return Err(Error::invalid(format!("pool of {pool} from a catalog of {}", all.len())));
    }
    let mut hits = vec![0usize; ks.len()];
    for (turn, &(gold, pred)) in turns.iter().enumerate() {
        let mut ids = vec![gold];
        ids.extend(distractors(&all, gold, seed, turn).into_iter().take(pool - 1));
        let mut cands = Vec::with_capacity(ids.len());
        for &id in &ids {
            cands.push((id, corpus.catalog.feature(id)?));
        }
        let ranking = model.rank_memes(pred, &cands);
        let rank = ranking.iter().position(|&m| m == gold).expect("gold is a candidate");
        for (h, &k) in hits.iter_mut().zip(ks) {
            *h += usize::from(rank < k);
        }
    }
    let mut at_k: Vec<(usize, f64)> = ks
        .iter()
        .zip(&hits)
        .map(|(&k, &h)| (k, h as f64 / turns.len() as f64))
        .collect();
    at_k.sort_by_key(|e| e.0);
    Ok(RecallScores {
        n,
        turns: turns.len(),
        at_k,
    })
}

/// R_n@k over the turns whose gold response carries a meme.
pub fn recall_at_k<M: DialogueModel + ?Sized>(
    model: &M,
    corpus: &Corpus,
    n: PoolSize,
    ks: &[usize],
    seed: u64,
    max_len: usize,
) -> Result<RecallScores> {
    let scored = score_examples(model, corpus, max_len)?;
    recall_of(model, &meme_turns(&scored), corpus, n, ks, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeenUnseen {
    pub seen: Option<RecallScores>,
    pub unseen: Option<RecallScores>,
}

/// Recall split by whether the gold meme occurs in `train_memes`. An empty
/// partition is reported as `None`.
pub fn seen_unseen_breakdown<M: DialogueModel + ?Sized>(
    model: &M,
    corpus: &Corpus,
    train_memes: &BTreeSet<MemeId>,
    n: PoolSize,
    ks: &[usize],
    seed: u64,
    max_len: usize,
) -> Result<SeenUnseen> {
    let scored = score_examples(model, corpus, max_len)?;
    let turns = meme_turns(&scored);
    if turns.is_empty() {
        return Err(Error::Empty("no turns end in a meme".into()));
    }
    let (seen, unseen): (Vec<_>, Vec<_>) = turns.into_iter().partition(|(m, _)| train_memes.contains(m));
    let part = |t: &[(MemeId, &TagPrediction)]| -> Result<Option<RecallScores>> {
        if t.is_empty() {
            Ok(None)
        } else {
            recall_of(model, t, corpus, n, ks, seed).map(Some)
        }
    };
    Ok(SeenUnseen {
        seen: part(&seen)?,
        unseen: part(&unseen)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthConfig};

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let c = synth_corpus(&SynthConfig::new(10, 4, 30, 2)).unwrap();
        let v = c.vocab.len();
        let ppl = perplexity(&UniformModel { vocab: v }, &c, 64).unwrap();
        assert!((ppl - v as f64).abs() < 1e-3, "{ppl}");
    }

    #[test]
    fn full_pool_recall_is_one() {
        let c = synth_corpus(&SynthConfig::new(12, 8, 30, 2)).unwrap();
        let m = RandomRanker::new(c.vocab.len(), 3);
        let r = recall_at_k(&m, &c, Some(8), &[8], 1, 64).unwrap();
        assert_eq!(r.at(8), Some(1.0));
        assert!(recall_at_k(&m, &c, Some(9), &[1], 1, 64).is_err());
    }

    #[test]
    fn emotion_without_labels_is_an_error() {
        let c = synth_corpus(&SynthConfig::new(4, 2, 30, 2)).unwrap();
        let m = UniformModel { vocab: c.vocab.len() };
        assert!(emotion_accuracy(&m, &c, &[], 64).is_err());
    }
}
