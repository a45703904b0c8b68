use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde_json::{json, Value};

use super::{special, TokenId};
use crate::error::{Error, Result};

pub const RESERVED_TOKENS: [&str; special::COUNT] = [
    "[pad]",
    "[bos]",
    "[eos]",
    "[tag]",
    "[speaker1]",
    "[speaker2]",
    "[meme]",
    "[unk]",
];

/// Token/id bijection. Ids `0..8` are the reserved tokens in
/// [`RESERVED_TOKENS`] order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::reserved_only()
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // kana
        | 0x3400..=0x4DBF    // CJK ext A
        | 0x4E00..=0x9FFF    // CJK unified
        | 0xAC00..=0xD7AF    // hangul
        | 0xF900..=0xFAFF
        | 0x3000..=0x303F    // CJK punctuation
        | 0xFF00..=0xFFEF)   // full-width forms
}

/// Whitespace split, with every CJK character becoming its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut run = String::new();
        for c in word.chars() {
            if is_cjk(c) {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                out.push(c.to_string());
            } else {
                run.push(c);
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

/// Inverse of [`tokenize`] up to whitespace normalization.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let single_cjk = |s: &str| {
        let mut chars = s.chars();
        matches!((chars.next(), chars.next()), (Some(c), None) if is_cjk(c))
    };
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !(single_cjk(t) && single_cjk(tokens[i - 1].as_ref())) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

impl Vocab {
    pub fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    /// Reserved tokens followed by `words` in the given order; duplicates and
    /// reserved names are skipped.
    pub fn from_tokens<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::reserved_only();
        for w in words {
            let w = w.into();
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.tokens.len() as TokenId);
                v.tokens.push(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Word ids for raw text. Unknown words, and words spelled like a
    /// reserved token, map to `[unk]`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text)
            .iter()
            .map(|w| match self.id(w) {
                Some(id) if id as usize >= special::COUNT => id,
                _ => special::UNK,
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = ids.iter().map(|&i| self.token(i).unwrap_or("[unk]")).collect();
        detokenize(&words)
    }

    pub fn to_json(&self) -> Value {
        let reserved: serde_json::Map<String, Value> = RESERVED_TOKENS
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_string(), json!(i)))
            .collect();
        let tokens: serde_json::Map<String, Value> = self.tokens[special::COUNT..]
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), json!(i + special::COUNT)))
            .collect();
        json!({ "reserved": reserved, "tokens": tokens })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("vocab: {msg}"));
        let reserved = v
            .get("reserved")
            .and_then(Value::as_object)
            .ok_or_else(|| bad("missing \"reserved\" block".into()))?;
        for (i, name) in RESERVED_TOKENS.iter().enumerate() {
            if reserved.get(*name).and_then(Value::as_u64) != Some(i as u64) {
                return Err(bad(format!("reserved token {name} must have id {i}")));
            }
        }
        let map = v
            .get("tokens")
            .and_then(Value::as_object)
            .ok_or_else(|| bad("missing \"tokens\" map".into()))?;
        let mut by_id = BTreeMap::new();
        for (tok, id) in map {
            let id = id
                .as_u64()
                .ok_or_else(|| bad(format!("id of {tok:?} is not an integer")))?;
            if by_id.insert(id, tok.clone()).is_some() {
                return Err(bad(format!("id {id} assigned twice")));
            }
        }
        let expected: Vec<u64> = (special::COUNT as u64..(special::COUNT + by_id.len()) as u64).collect();
        if by_id.keys().copied().collect::<Vec<_>>() != expected {
            return Err(bad("token ids must be contiguous after the reserved block".into()));
        }
        let vocab = Vocab::from_tokens(by_id.into_values());
        if vocab.len() != special::COUNT + map.len() {
            return Err(bad("tokens collide with reserved names".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&serde_json::from_str(&text)?)
    }
}

/// Vocabulary over token streams: tokens seen at least `min_freq` times,
/// most frequent first, ties in lexical order.
pub fn build_vocab<I, S>(streams: I, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if min_freq == 0 {
        return Err(Error::invalid("min_freq must be at least 1"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for tok in streams {
        let tok = tok.as_ref();
        if RESERVED_TOKENS.contains(&tok) {
            continue;
        }
        *counts.entry(tok.to_string()).or_default() += 1;
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocab::from_tokens(kept.into_iter().map(|(t, _)| t)))
}
