//! Dialogue → flat token sequence.
//!
//! Each utterance becomes
//!
//! ```text
//! [speakerK] [bos] w_1 .. w_L [eos] [tag] ([meme])
//! ```
//!
//! The `[meme]` slot follows `[tag]`, so the meme's feature is never visible
//! to the hidden state that predicts it.

use super::{special, Dialogue, MemeCatalog, MemeId, Speaker, TokenId, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::numerics::IGNORE_INDEX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Text = 0,
    Meme = 1,
    User1 = 2,
    User2 = 3,
}

impl Segment {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemeSlot {
    pub pos: usize,
    pub meme_id: MemeId,
    pub feature: Vec<f32>,
}

/// Supervision at one `[tag]` position.
#[derive(Clone, Debug, PartialEq)]
pub struct TagTarget {
    pub pos: usize,
    /// Index of the utterance in the source dialogue.
    pub utterance: usize,
    /// Whether a `[meme]` slot follows this tag.
    pub y: bool,
    pub meme_id: Option<MemeId>,
    /// Catalog feature of the attached meme (the regression target).
    pub feature: Option<Vec<f32>>,
    pub emotion: Option<String>,
    pub supervised: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub segments: Vec<Segment>,
    pub positions: Vec<usize>,
    /// Source utterance index of every position.
    pub utterance_of: Vec<usize>,
    /// Next-token label per position, [`IGNORE_INDEX`] where unsupervised.
    pub lm_labels: Vec<usize>,
    pub meme_slots: Vec<MemeSlot>,
    pub tags: Vec<TagTarget>,
}

impl TokenSequence {
    pub fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            segments: Vec::new(),
            positions: Vec::new(),
            utterance_of: Vec::new(),
            lm_labels: Vec::new(),
            meme_slots: Vec::new(),
            tags: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub(crate) fn push(&mut self, token: TokenId, segment: Segment, utterance: usize) {
        self.positions.push(self.tokens.len());
        self.tokens.push(token);
        self.segments.push(segment);
        self.utterance_of.push(utterance);
        self.lm_labels.push(IGNORE_INDEX);
    }

    /// Appends `[speakerK] [bos]` for a new utterance.
    pub fn open_utterance(&mut self, speaker: Speaker, utterance: usize) {
        self.push(speaker.token(), speaker.segment(), utterance);
        self.push(special::BOS, speaker.segment(), utterance);
    }

    /// Appends a text token to the currently open utterance.
    pub fn push_text(&mut self, token: TokenId) {
        let (seg, utt) = self.last_context();
        self.push(token, seg, utt);
    }

    /// Appends `[eos] [tag]` and returns the tag position. The tag carries no
    /// supervision.
    pub fn close_utterance(&mut self) -> usize {
        let (seg, utt) = self.last_context();
        self.push(special::EOS, seg, utt);
        self.push(special::TAG, seg, utt);
        let pos = self.len() - 1;
        self.tags.push(TagTarget {
            pos,
            utterance: utt,
            y: false,
            meme_id: None,
            feature: None,
            emotion: None,
            supervised: false,
        });
        pos
    }

    fn last_context(&self) -> (Segment, usize) {
        let i = self.len().checked_sub(1).expect("utterance must be opened first");
        (self.segments[i], self.utterance_of[i])
    }

    /// Keeps supervision only on utterance `utt`.
    pub fn supervise_only(&mut self, utt: usize) {
        for (label, &u) in self.lm_labels.iter_mut().zip(&self.utterance_of) {
            if u != utt {
                *label = IGNORE_INDEX;
            }
        }
        for tag in &mut self.tags {
            tag.supervised = tag.utterance == utt;
        }
    }

    pub fn num_lm_targets(&self) -> usize {
        self.lm_labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }

    pub fn supervised_tags(&self) -> impl Iterator<Item = &TagTarget> {
        self.tags.iter().filter(|t| t.supervised)
    }
}

fn utterance_len(u: &Utterance) -> usize {
    u.text.len() + 4 + usize::from(u.meme_id.is_some())
}

/// Flattens `utts`, dropping whole utterances from the front until the
/// sequence fits in `max_len` positions.
pub fn flatten_utterances(utts: &[Utterance], catalog: &MemeCatalog, max_len: usize) -> Result<TokenSequence> {
    if max_len < 8 {
        return Err(Error::invalid(format!("max_len {max_len} < 8")));
    }
    let mut start = utts.len();
    let mut total = 0;
    while start > 0 && total + utterance_len(&utts[start - 1]) <= max_len {
        start -= 1;
        total += utterance_len(&utts[start]);
    }
    if start == utts.len() && !utts.is_empty() {
        return Err(Error::invalid(format!(
            "last utterance needs {} positions, more than max_len {max_len}",
            utterance_len(&utts[utts.len() - 1])
        )));
    }

    let mut seq = TokenSequence::empty();
    for (i, u) in utts.iter().enumerate().skip(start) {
        seq.open_utterance(u.speaker, i);
        let bos = seq.len() - 1;
        for &t in &u.text {
            seq.push_text(t);
        }
        let tag = seq.close_utterance();
        // labels: [bos] -> w_1, .., w_L -> [eos]
        for p in bos..tag - 1 {
            seq.lm_labels[p] = seq.tokens[p + 1] as usize;
        }
        let target = seq.tags.last_mut().expect("tag just pushed");
        target.supervised = true;
        if let Some(id) = u.meme_id {
            let feature = catalog.feature(id)?.to_vec();
            target.y = true;
            target.meme_id = Some(id);
            target.feature = Some(feature.clone());
            target.emotion = u.emotion.clone();
            seq.push(special::MEME, Segment::Meme, i);
            seq.meme_slots.push(MemeSlot {
                pos: seq.len() - 1,
                meme_id: id,
                feature,
            });
        }
    }
    Ok(seq)
}

/// Flattens a whole dialogue with supervision on every utterance.
pub fn flatten_dialogue(d: &Dialogue, vocab: &Vocab, catalog: &MemeCatalog, max_len: usize) -> Result<TokenSequence> {
    for u in &d.utterances {
        if let Some(&t) = u.text.iter().find(|&&t| t as usize >= vocab.len()) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {}", vocab.len())));
        }
    }
    flatten_utterances(&d.utterances, catalog, max_len)
}

/// One example per response: utterance `i` (for `i >= 1`) supervised with
/// utterances `..i` as context.
pub fn training_examples(d: &Dialogue, catalog: &MemeCatalog, max_len: usize) -> Result<Vec<TokenSequence>> {
    (1..d.utterances.len())
        .map(|i| {
            let mut seq = flatten_utterances(&d.utterances[..=i], catalog, max_len)?;
            seq.supervise_only(i);
            Ok(seq)
        })
        .collect()
}

/// Recovers speakers, text, memes and emotions from a flattened sequence.
pub fn unflatten(seq: &TokenSequence) -> Result<Vec<Utterance>> {
    let bad = |pos: usize, msg: &str| Error::invalid(format!("position {pos}: {msg}"));
    let mut out: Vec<Utterance> = Vec::new();
    let mut in_text = false;
    let mut slots = seq.meme_slots.iter();
    let mut tags = seq.tags.iter();
    for (pos, &tok) in seq.tokens.iter().enumerate() {
        match tok {
            special::SPEAKER1 | special::SPEAKER2 if !in_text => {
                let speaker = if tok == special::SPEAKER1 { Speaker::User1 } else { Speaker::User2 };
                out.push(Utterance::text(speaker, Vec::new()));
            }
            special::BOS if !in_text => in_text = true,
            special::EOS if in_text => in_text = false,
            special::TAG if !in_text => {
                tags.next().ok_or_else(|| bad(pos, "tag without target"))?;
            }
            special::MEME if !in_text => {
                let slot = slots.next().ok_or_else(|| bad(pos, "meme slot without feature"))?;
                let tag = seq
                    .tags
                    .iter()
                    .rev()
                    .find(|t| t.pos < pos)
                    .ok_or_else(|| bad(pos, "meme slot before any tag"))?;
                let u = out.last_mut().ok_or_else(|| bad(pos, "meme before utterance"))?;
                u.meme_id = Some(slot.meme_id);
                u.emotion = tag.emotion.clone();
            }
            t if in_text => out
                .last_mut()
                .ok_or_else(|| bad(pos, "text before utterance"))?
                .text
                .push(t),
            _ => return Err(bad(pos, "token out of layout")),
        }
    }
    Ok(out)
}
