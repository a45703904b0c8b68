use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

/// Exact ratio of two counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.value())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_dialogues: u64,
    pub n_utterances: u64,
    /// Distinct token types appearing in utterance text.
    pub n_token_types: u64,
    /// Distinct memes used in dialogues.
    pub n_memes: u64,
    pub n_tokens: u64,
    pub n_meme_uses: u64,
    pub avg_utt_per_dialogue: Ratio,
    pub avg_memes_per_dialogue: Ratio,
    pub avg_tokens_per_utt: Ratio,
}

pub fn corpus_stats(c: &Corpus) -> Result<CorpusStats> {
    if c.dialogues.is_empty() {
        return Err(Error::Empty("corpus has no dialogues".into()));
    }
    let mut types = BTreeSet::new();
    let mut memes = BTreeSet::new();
    let (mut n_utt, mut n_tok, mut n_uses) = (0u64, 0u64, 0u64);
    for d in &c.dialogues {
        for u in &d.utterances {
            n_utt += 1;
            n_tok += u.text.len() as u64;
            types.extend(u.text.iter().copied());
            if let Some(m) = u.meme_id {
                n_uses += 1;
                memes.insert(m);
            }
        }
    }
    let n_dlg = c.dialogues.len() as u64;
    Ok(CorpusStats {
        n_dialogues: n_dlg,
        n_utterances: n_utt,
        n_token_types: types.len() as u64,
        n_memes: memes.len() as u64,
        n_tokens: n_tok,
        n_meme_uses: n_uses,
        avg_utt_per_dialogue: Ratio { num: n_utt, den: n_dlg },
        avg_memes_per_dialogue: Ratio { num: n_uses, den: n_dlg },
        avg_tokens_per_utt: Ratio { num: n_tok, den: n_utt },
    })
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: [(&str, String); 7] = [
            ("# dialogues", self.n_dialogues.to_string()),
            ("# utterances", self.n_utterances.to_string()),
            ("# tokens", self.n_token_types.to_string()),
            ("# memes", self.n_memes.to_string()),
            ("avg # utterances per dialogue", self.avg_utt_per_dialogue.to_string()),
            ("avg # memes per dialogue", self.avg_memes_per_dialogue.to_string()),
            ("avg # tokens per utterance", self.avg_tokens_per_utt.to_string()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<32}{v:>10}")?;
        }
        Ok(())
    }
}
