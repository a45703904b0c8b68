//! Dialogue data model, tokenizer, file formats, statistics and splits.

mod flatten;
mod io;
mod split;
mod stats;
mod synth;
mod vocab;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use flatten::{
    flatten_dialogue, flatten_utterances, training_examples, unflatten, MemeSlot, Segment,
    TagTarget, TokenSequence,
};
pub use io::{dialogue_json, load_catalog, load_corpus, parse_corpus_jsonl, save_catalog, save_corpus, to_jsonl};
pub use split::{split_corpus, CorpusSplit, SplitRatios};
pub use stats::{corpus_stats, CorpusStats, Ratio};
pub use synth::{synth_corpus, SynthConfig, SYNTH_EMOTIONS};
pub use vocab::{build_vocab, detokenize, tokenize, Vocab, RESERVED_TOKENS};

pub type TokenId = u32;
pub type MemeId = u32;

/// Reserved token ids. Fixed across every vocabulary.
pub mod special {
    use super::TokenId;
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const TAG: TokenId = 3;
    pub const SPEAKER1: TokenId = 4;
    pub const SPEAKER2: TokenId = 5;
    pub const MEME: TokenId = 6;
    pub const UNK: TokenId = 7;
    pub const COUNT: usize = 8;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemeGroup {
    AtmosphereAdjustment,
    BasicExpression,
    BasicEmotion,
    CommonSemantics,
}

impl MemeGroup {
    pub const ALL: [MemeGroup; 4] = [
        MemeGroup::AtmosphereAdjustment,
        MemeGroup::BasicExpression,
        MemeGroup::BasicEmotion,
        MemeGroup::CommonSemantics,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemeEntry {
    pub id: MemeId,
    pub feature: Vec<f32>,
    #[serde(rename = "ocr")]
    pub ocr_text: Option<String>,
    pub group: MemeGroup,
    #[serde(rename = "emotions", default)]
    pub emotion_tags: Vec<String>,
}

/// Meme inventory keyed by id. Every feature has length `feature_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemeCatalog {
    feature_dim: usize,
    memes: Vec<MemeEntry>,
    index: HashMap<MemeId, usize>,
}

impl MemeCatalog {
    pub fn new(feature_dim: usize, memes: Vec<MemeEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(memes.len());
        for (i, m) in memes.iter().enumerate() {
            if m.feature.len() != feature_dim {
                return Err(Error::invalid(format!(
                    "meme {}: feature length {} != feature_dim {feature_dim}",
                    m.id,
                    m.feature.len()
                )));
            }
            if m.feature.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("meme {} feature", m.id)));
            }
            if index.insert(m.id, i).is_some() {
                return Err(Error::invalid(format!("duplicate meme id {}", m.id)));
            }
        }
        Ok(Self {
            feature_dim,
            memes,
            index,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.memes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memes.is_empty()
    }

    pub fn get(&self, id: MemeId) -> Option<&MemeEntry> {
        self.index.get(&id).map(|&i| &self.memes[i])
    }

    pub fn contains(&self, id: MemeId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn feature(&self, id: MemeId) -> Result<&[f32]> {
        self.get(id)
            .map(|m| m.feature.as_slice())
            .ok_or_else(|| Error::invalid(format!("meme id {id} not in catalog")))
    }

    pub fn memes(&self) -> &[MemeEntry] {
        &self.memes
    }

    pub fn ids(&self) -> impl Iterator<Item = MemeId> + '_ {
        self.memes.iter().map(|m| m.id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Speaker {
    User1,
    User2,
}

impl Speaker {
    pub fn number(self) -> u8 {
        match self {
            Speaker::User1 => 1,
            Speaker::User2 => 2,
        }
    }

    pub fn from_number(n: u64) -> Option<Self> {
        match n {
            1 => Some(Speaker::User1),
            2 => Some(Speaker::User2),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Speaker::User1 => Speaker::User2,
            Speaker::User2 => Speaker::User1,
        }
    }

    pub fn token(self) -> TokenId {
        match self {
            Speaker::User1 => special::SPEAKER1,
            Speaker::User2 => special::SPEAKER2,
        }
    }

    pub fn segment(self) -> Segment {
        match self {
            Speaker::User1 => Segment::User1,
            Speaker::User2 => Segment::User2,
        }
    }
}

impl Serialize for Speaker {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.number())
    }
}

impl<'de> Deserialize<'de> for Speaker {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let n = u64::deserialize(d)?;
        Speaker::from_number(n).ok_or_else(|| serde::de::Error::custom(format!("speaker must be 1 or 2, got {n}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: Vec<TokenId>,
    pub meme_id: Option<MemeId>,
    pub emotion: Option<String>,
}

impl Utterance {
    pub fn text(speaker: Speaker, text: Vec<TokenId>) -> Self {
        Self {
            speaker,
            text,
            meme_id: None,
            emotion: None,
        }
    }

    pub fn with_meme(speaker: Speaker, text: Vec<TokenId>, meme_id: MemeId, emotion: Option<String>) -> Self {
        Self {
            speaker,
            text,
            meme_id: Some(meme_id),
            emotion,
        }
    }

    /// Text and meme may not both be absent; emotion requires a meme.
    pub fn validate(&self) -> std::result::Result<(), &'static str> {
        if self.text.is_empty() && self.meme_id.is_none() {
            return Err("utterance has neither text nor meme");
        }
        if self.emotion.is_some() && self.meme_id.is_none() {
            return Err("emotion given without a meme");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let d = Self { utterances };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.utterances.len() < 2 {
            return Err(Error::invalid(format!(
                "dialogue needs at least 2 utterances, got {}",
                self.utterances.len()
            )));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            u.validate()
                .map_err(|msg| Error::invalid(format!("utterance {i}: {msg}")))?;
            if i > 0 && u.speaker == self.utterances[i - 1].speaker {
                return Err(Error::invalid(format!("utterance {i}: speakers do not alternate")));
            }
        }
        if self.utterances.iter().all(|u| u.meme_id.is_none()) {
            return Err(Error::invalid("dialogue carries no meme"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn meme_ids(&self) -> impl Iterator<Item = MemeId> + '_ {
        self.utterances.iter().filter_map(|u| u.meme_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub catalog: MemeCatalog,
    pub vocab: Vocab,
}

impl Corpus {
    /// Checks every dialogue, meme reference and token id.
    pub fn new(dialogues: Vec<Dialogue>, catalog: MemeCatalog, vocab: Vocab) -> Result<Self> {
        let c = Self {
            dialogues,
            catalog,
            vocab,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.dialogues.iter().enumerate() {
            d.validate()
                .map_err(|e| Error::invalid(format!("dialogue {i}: {e}")))?;
            for u in &d.utterances {
                if let Some(id) = u.meme_id {
                    if !self.catalog.contains(id) {
                        return Err(Error::DanglingMeme {
                            dialogue: i,
                            meme_id: id,
                        });
                    }
                }
                if let Some(&t) = u.text.iter().find(|&&t| t as usize >= self.vocab.len()) {
                    return Err(Error::invalid(format!(
                        "dialogue {i}: token id {t} outside vocabulary of {}",
                        self.vocab.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same catalog and vocabulary, different dialogues.
    pub fn with_dialogues(&self, dialogues: Vec<Dialogue>) -> Corpus {
        Corpus {
            dialogues,
            catalog: self.catalog.clone(),
            vocab: self.vocab.clone(),
        }
    }

    pub fn meme_ids_used(&self) -> std::collections::BTreeSet<MemeId> {
        self.dialogues.iter().flat_map(|d| d.meme_ids()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utterance_invariants() {
        assert!(Utterance::text(Speaker::User1, vec![]).validate().is_err());
        let mut u = Utterance::text(Speaker::User1, vec![9]);
        assert!(u.validate().is_ok());
        u.emotion = Some("happy".into());
        assert!(u.validate().is_err());
        assert!(Utterance::with_meme(Speaker::User2, vec![], 3, Some("shy".into()))
            .validate()
            .is_ok());
    }

    #[test]
    fn dialogue_invariants() {
        let a = Utterance::text(Speaker::User1, vec![9]);
        let b = Utterance::with_meme(Speaker::User2, vec![], 0, None);
        assert!(Dialogue::new(vec![a.clone()]).is_err());
        assert!(Dialogue::new(vec![a.clone(), a.clone()]).is_err());
        assert!(Dialogue::new(vec![a.clone(), Utterance::text(Speaker::User2, vec![9])]).is_err());
        assert!(Dialogue::new(vec![a, b]).is_ok());
    }

    #[test]
    fn catalog_rejects_wrong_dims_and_duplicates() {
        let m = |id, n| MemeEntry {
            id,
            feature: vec![0.0; n],
            ocr_text: None,
            group: MemeGroup::BasicEmotion,
            emotion_tags: vec![],
        };
        assert!(MemeCatalog::new(2, vec![m(0, 2), m(1, 3)]).is_err());
        assert!(MemeCatalog::new(2, vec![m(0, 2), m(0, 2)]).is_err());
        let c = MemeCatalog::new(2, vec![m(4, 2), m(1, 2)]).unwrap();
        assert_eq!(c.feature(4).unwrap(), &[0.0, 0.0]);
        assert!(c.feature(2).is_err());
    }
}
