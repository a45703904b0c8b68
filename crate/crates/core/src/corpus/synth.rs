//! Synthetic dialogues with a planted topic per dialogue.
//!
//! Meme `m` has a kind `m % 4` (also its catalog group) and a style `m / 4`.
//! Its feature is a kind centre plus a style offset plus small noise, so
//! features of memes sharing a kind or style are correlated. Every dialogue
//! is about one meme. Utterances that carry the meme mention the kind cue
//! word first and the style cue word last; other utterances use filler words
//! only, except meme-only utterances, which carry no text.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Corpus, Dialogue, MemeCatalog, MemeEntry, MemeGroup, Speaker, TokenId, Utterance, Vocab};
use crate::error::{Error, Result};

pub const SYNTH_EMOTIONS: [&str; 12] = [
    "happy", "sad", "angry", "shy", "surprised", "bored", "proud", "confused", "scared", "smug",
    "tired", "excited",
];

const KINDS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_dialogues: usize,
    pub n_memes: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub meme_prob: f64,
    pub meme_only_prob: f64,
    pub max_fillers: usize,
}

impl SynthConfig {
    pub fn new(n_dialogues: usize, n_memes: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            n_dialogues,
            n_memes,
            vocab_size,
            seed,
            feature_dim: 16,
            min_utterances: 3,
            max_utterances: 5,
            meme_prob: 0.5,
            meme_only_prob: 0.2,
            max_fillers: 2,
        }
    }

    pub fn n_styles(&self) -> usize {
        self.n_memes.div_ceil(KINDS)
    }

    fn word(&self, i: usize) -> TokenId {
        (super::special::COUNT + i % self.vocab_size) as TokenId
    }

    /// Token id of the kind cue word of meme `m`.
    pub fn kind_cue(&self, m: usize) -> TokenId {
        self.word(m % KINDS)
    }

    /// Token id of the style cue word of meme `m`.
    pub fn style_cue(&self, m: usize) -> TokenId {
        self.word(KINDS + m / KINDS)
    }

    fn filler_range(&self) -> std::ops::Range<usize> {
        let first = KINDS + self.n_styles();
        if first < self.vocab_size {
            first..self.vocab_size
        } else {
            0..self.vocab_size
        }
    }

    pub fn emotion(&self, m: usize) -> &'static str {
        SYNTH_EMOTIONS[m % SYNTH_EMOTIONS.len()]
    }
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    if cfg.n_dialogues == 0 || cfg.n_memes == 0 || cfg.vocab_size == 0 || cfg.feature_dim == 0 {
        return Err(Error::invalid("synthetic corpus sizes must be at least 1"));
    }
    if cfg.min_utterances < 2 || cfg.max_utterances < cfg.min_utterances {
        return Err(Error::invalid("need 2 <= min_utterances <= max_utterances"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0f32, 1.0).expect("valid normal");

    let draw = |scale: f32, rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..cfg.feature_dim).map(|_| scale * unit.sample(rng)).collect()
    };
    let kinds: Vec<Vec<f32>> = (0..KINDS).map(|_| draw(1.0, &mut rng)).collect();
    let styles: Vec<Vec<f32>> = (0..cfg.n_styles()).map(|_| draw(0.75, &mut rng)).collect();
    let memes = (0..cfg.n_memes)
        .map(|m| {
            let noise = draw(0.05, &mut rng);
            let feature = (0..cfg.feature_dim)
                .map(|j| kinds[m % KINDS][j] + styles[m / KINDS][j] + noise[j])
                .collect();
            MemeEntry {
                id: m as u32,
                feature,
                ocr_text: None,
                group: MemeGroup::ALL[m % KINDS],
                emotion_tags: vec![cfg.emotion(m).to_string()],
            }
        })
        .collect();
    let catalog = MemeCatalog::new(cfg.feature_dim, memes)?;
    let vocab = Vocab::from_tokens((0..cfg.vocab_size).map(|i| format!("w{i}")));

    let fillers = cfg.filler_range();
    let filler = |rng: &mut ChaCha8Rng| cfg.word(rng.random_range(fillers.clone()));
    let mut dialogues = Vec::with_capacity(cfg.n_dialogues);
    for i in 0..cfg.n_dialogues {
        let topic = i % cfg.n_memes;
        let n = rng.random_range(cfg.min_utterances..=cfg.max_utterances);
        let mut speaker = Speaker::User1;
        let mut utterances = Vec::with_capacity(n);
        for j in 0..n {
            let uses_meme = j == 0 || rng.random_bool(cfg.meme_prob);
            let u = if uses_meme {
                let meme_only = j > 0 && rng.random_bool(cfg.meme_only_prob);
                let mut text = Vec::new();
                if !meme_only {
                    text.push(cfg.kind_cue(topic));
                    for _ in 0..rng.random_range(0..=cfg.max_fillers) {
                        text.push(filler(&mut rng));
                    }
                    text.push(cfg.style_cue(topic));
                }
                Utterance::with_meme(speaker, text, topic as u32, Some(cfg.emotion(topic).to_string()))
            } else {
                let len = rng.random_range(1..=cfg.max_fillers + 1);
                Utterance::text(speaker, (0..len).map(|_| filler(&mut rng)).collect())
            };
            utterances.push(u);
            speaker = speaker.other();
        }
        dialogues.push(Dialogue::new(utterances)?);
    }
    dialogues.shuffle(&mut rng);
    Corpus::new(dialogues, catalog, vocab)
}
