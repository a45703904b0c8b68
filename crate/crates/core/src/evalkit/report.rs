use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bleu_n, distinct_n, emotion_of, meme_turns, ppl_of, recall_of, score_examples, usage_of, PoolSize};
use crate::corpus::{Corpus, TokenId};
use crate::decoding::{generate_text, SamplerConfig};
use crate::error::Result;
use crate::model::Model;

pub const BLEU_VARIANT: &str = "corpus-level BLEU, uniform weights, add-one smoothing on orders >= 2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub max_len: usize,
    pub threshold: f64,
    /// Pool sizes for recall; `None` is the whole catalog.
    pub pools: Vec<PoolSize>,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub emotion_labels: Vec<String>,
    /// Sample responses for BLEU and distinct-n when set.
    pub generation: Option<SamplerConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_len: 500,
            threshold: 0.5,
            pools: vec![Some(10), Some(20), None],
            ks: vec![1, 2, 5],
            seed: 0,
            emotion_labels: Vec::new(),
            generation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub n: PoolSize,
    pub k: usize,
    pub score: f64,
    pub turns: usize,
}

impl RecallEntry {
    pub fn label(&self) -> String {
        match self.n {
            Some(n) => format!("R_{n}@{}", self.k),
            None => format!("R_T@{}", self.k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu_variant: String,
    pub examples: usize,
    pub response_tokens: usize,
    pub perplexity: f64,
    pub bleu2: Option<f64>,
    pub bleu4: Option<f64>,
    pub dist1: Option<f64>,
    pub dist2: Option<f64>,
    pub recall: Vec<RecallEntry>,
    pub usage_accuracy: f64,
    pub usage_count: usize,
    pub emotion_top1: Option<f64>,
    pub emotion_top5: Option<f64>,
    pub emotion_count: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn recall(&self, n: PoolSize, k: usize) -> Option<f64> {
        self.recall.iter().find(|e| e.n == n && e.k == k).map(|e| e.score)
    }
}

/// Scores every response of `corpus` once and derives all metrics from it.
pub fn evaluate(model: &Model, corpus: &Corpus, opts: &EvalOptions) -> Result<EvalReport> {
    let scored = score_examples(model, corpus, opts.max_len)?;
    let (usage_accuracy, usage_count) = usage_of(&scored, opts.threshold)?;
    let emotion = if opts.emotion_labels.is_empty() {
        None
    } else {
        emotion_of(&scored, &opts.emotion_labels).ok()
    };
    let turns = meme_turns(&scored);
    let mut recall = Vec::new();
    if !turns.is_empty() {
        for &n in &opts.pools {
            if n.is_some_and(|n| n > corpus.catalog.len()) {
                continue;
            }
            let r = recall_of(model, &turns, corpus, n, &opts.ks, opts.seed)?;
            recall.extend(r.at_k.iter().map(|&(k, score)| RecallEntry {
                n,
                k,
                score,
                turns: r.turns,
            }));
        }
    }

    let (mut bleu2, mut bleu4, mut dist1, mut dist2) = (None, None, None, None);
    if let Some(sampler) = &opts.generation {
        let mut cands: Vec<Vec<TokenId>> = Vec::new();
        let mut refs: Vec<Vec<TokenId>> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
        for d in &corpus.dialogues {
            for i in 1..d.utterances.len() {
                let gold = &d.utterances[i];
                let (_, text) = generate_text(model, &d.utterances[..i], &corpus.catalog, gold.speaker, sampler, &mut rng)?;
                cands.push(text);
                refs.push(gold.text.clone());
            }
        }
        bleu2 = Some(bleu_n(&cands, &refs, 2)?);
        bleu4 = Some(bleu_n(&cands, &refs, 4)?);
        dist1 = distinct_n(&cands, 1).ok();
        dist2 = distinct_n(&cands, 2).ok();
    }

    Ok(EvalReport {
        bleu_variant: BLEU_VARIANT.to_string(),
        examples: scored.len(),
        response_tokens: scored.iter().map(|s| s.tokens).sum(),
        perplexity: ppl_of(&scored)?,
        bleu2,
        bleu4,
        dist1,
        dist2,
        recall,
        usage_accuracy,
        usage_count,
        emotion_top1: emotion.map(|e| e.top1),
        emotion_top5: emotion.map(|e| e.top5),
        emotion_count: emotion.map_or(0, |e| e.count),
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>, scale: f64| v.map_or("-".to_string(), |x| format!("{:.2}", x * scale));
        writeln!(f, "# {}", self.bleu_variant)?;
        writeln!(f, "{:<12}{:>10}{:>10}{:>10}{:>10}{:>10}", "", "PPL", "B-2", "B-4", "Dist-1", "Dist-2")?;
        writeln!(
            f,
            "{:<12}{:>10.2}{:>10}{:>10}{:>10}{:>10}",
            "model",
            self.perplexity,
            opt(self.bleu2, 100.0),
            opt(self.bleu4, 100.0),
            opt(self.dist1, 100.0),
            opt(self.dist2, 100.0)
        )?;
        if !self.recall.is_empty() {
            writeln!(f)?;
            let labels: Vec<String> = self.recall.iter().map(RecallEntry::label).collect();
            write!(f, "{:<12}", "")?;
            for l in &labels {
                write!(f, "{l:>10}")?;
            }
            writeln!(f)?;
            write!(f, "{:<12}", "model")?;
            for e in &self.recall {
                write!(f, "{:>10.2}", e.score * 100.0)?;
            }
            writeln!(f)?;
        }
        writeln!(f)?;
        writeln!(f, "{:<24}{:>10.2}  (n={})", "usage accuracy", self.usage_accuracy * 100.0, self.usage_count)?;
        writeln!(
            f,
            "{:<24}{:>10}  (n={})",
            "emotion top-1",
            opt(self.emotion_top1, 100.0),
            self.emotion_count
        )?;
        writeln!(f, "{:<24}{:>10}", "emotion top-5", opt(self.emotion_top5, 100.0))
    }
}
