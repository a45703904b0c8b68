//! JSONL corpus and JSON catalog files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::vocab::{build_vocab, tokenize};
use super::{Corpus, Dialogue, MemeCatalog, MemeEntry, MemeId, Speaker, Utterance, Vocab};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct CatalogFile {
    feature_dim: usize,
    memes: Vec<MemeEntry>,
}

pub fn load_catalog(path: &Path) -> Result<MemeCatalog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CatalogFile = serde_json::from_str(&text)?;
    MemeCatalog::new(file.feature_dim, file.memes)
}

pub fn save_catalog(catalog: &MemeCatalog, path: &Path) -> Result<()> {
    let file = CatalogFile {
        feature_dim: catalog.feature_dim(),
        memes: catalog.memes().to_vec(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(path, e))
}

struct RawUtterance {
    speaker: Speaker,
    text: String,
    meme_id: Option<MemeId>,
    emotion: Option<String>,
}

fn schema(line: usize, field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Schema {
        line,
        field: field.into(),
        msg: msg.into(),
    }
}

fn parse_line(line_no: usize, line: &str) -> Result<Vec<RawUtterance>> {
    let v: Value =
        serde_json::from_str(line).map_err(|e| schema(line_no, "<line>", format!("invalid JSON: {e}")))?;
    let utts = v
        .get("utterances")
        .ok_or_else(|| schema(line_no, "utterances", "missing"))?
        .as_array()
        .ok_or_else(|| schema(line_no, "utterances", "must be an array"))?;
    let mut out = Vec::with_capacity(utts.len());
    for (i, u) in utts.iter().enumerate() {
        let f = |name: &str| format!("utterances[{i}].{name}");
        let obj = u
            .as_object()
            .ok_or_else(|| schema(line_no, format!("utterances[{i}]"), "must be an object"))?;
        let speaker = obj
            .get("speaker")
            .ok_or_else(|| schema(line_no, f("speaker"), "missing"))?
            .as_u64()
            .and_then(Speaker::from_number)
            .ok_or_else(|| schema(line_no, f("speaker"), "must be 1 or 2"))?;
        let text = match obj.get("text") {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(schema(line_no, f("text"), "must be a string")),
        };
        let meme_id = match obj.get("meme_id") {
            None | Some(Value::Null) => None,
            Some(m) => Some(
                m.as_u64()
                    .and_then(|x| MemeId::try_from(x).ok())
                    .ok_or_else(|| schema(line_no, f("meme_id"), "must be a non-negative integer or null"))?,
            ),
        };
        let emotion = match obj.get("emotion") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(schema(line_no, f("emotion"), "must be a string or null")),
        };
        out.push(RawUtterance {
            speaker,
            text,
            meme_id,
            emotion,
        });
    }
    Ok(out)
}

/// Parses corpus JSONL. Without a vocabulary, one is built from the corpus
/// text with `min_freq = 1`.
pub fn parse_corpus_jsonl(text: &str, catalog: MemeCatalog, vocab: Option<Vocab>) -> Result<Corpus> {
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        raw.push((i + 1, parse_line(i + 1, line)?));
    }
    let vocab = match vocab {
        Some(v) => v,
        None => build_vocab(
            raw.iter()
                .flat_map(|(_, us)| us.iter().flat_map(|u| tokenize(&u.text))),
            1,
        )?,
    };
    let mut dialogues = Vec::with_capacity(raw.len());
    for (idx, (line_no, us)) in raw.into_iter().enumerate() {
        let utterances: Vec<Utterance> = us
            .into_iter()
            .map(|u| Utterance {
                speaker: u.speaker,
                text: vocab.encode(&u.text),
                meme_id: u.meme_id,
                emotion: u.emotion,
            })
            .collect();
        for (i, u) in utterances.iter().enumerate() {
            if let Err(msg) = u.validate() {
                let field = if u.emotion.is_some() && u.meme_id.is_none() { "emotion" } else { "text" };
                return Err(schema(line_no, format!("utterances[{i}].{field}"), msg));
            }
            if let Some(id) = u.meme_id {
                if !catalog.contains(id) {
                    return Err(Error::DanglingMeme {
                        dialogue: idx,
                        meme_id: id,
                    });
                }
            }
        }
        let d = Dialogue { utterances };
        d.validate()
            .map_err(|e| schema(line_no, "utterances", e.to_string()))?;
        dialogues.push(d);
    }
    Corpus::new(dialogues, catalog, vocab)
}

pub fn load_corpus(corpus_path: &Path, catalog_path: &Path, vocab: Option<Vocab>) -> Result<Corpus> {
    let catalog = load_catalog(catalog_path)?;
    let text = std::fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    parse_corpus_jsonl(&text, catalog, vocab)
}

#[derive(Serialize)]
struct UtteranceRecord<'a> {
    speaker: u8,
    text: String,
    meme_id: Option<MemeId>,
    emotion: Option<&'a str>,
}

#[derive(Serialize)]
struct DialogueRecord<'a> {
    utterances: Vec<UtteranceRecord<'a>>,
}

pub fn dialogue_json(d: &Dialogue, vocab: &Vocab) -> Result<String> {
    let rec = DialogueRecord {
        utterances: d
            .utterances
            .iter()
            .map(|u| UtteranceRecord {
                speaker: u.speaker.number(),
                text: vocab.decode(&u.text),
                meme_id: u.meme_id,
                emotion: u.emotion.as_deref(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&rec)?)
}

pub fn to_jsonl(corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    for d in &corpus.dialogues {
        out.push_str(&dialogue_json(d, &corpus.vocab)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, to_jsonl(corpus)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::MemeGroup;

    fn catalog() -> MemeCatalog {
        let m = |id| MemeEntry {
            id,
            feature: vec![id as f32, 1.0],
            ocr_text: None,
            group: MemeGroup::BasicExpression,
            emotion_tags: vec!["happy".into()],
        };
        MemeCatalog::new(2, vec![m(0), m(1)]).unwrap()
    }

    const TWO: &str = r#"{"utterances":[{"speaker":1,"text":"hi there","meme_id":null,"emotion":null},{"speaker":2,"text":"","meme_id":1,"emotion":"happy"}]}
{"utterances":[{"speaker":1,"text":"ok","meme_id":0,"emotion":null},{"speaker":2,"text":"bye","meme_id":null,"emotion":null}]}
"#;

    #[test]
    fn loads_and_round_trips() {
        let c = parse_corpus_jsonl(TWO, catalog(), None).unwrap();
        assert_eq!(c.dialogues.len(), 2);
        assert_eq!(c.dialogues[0].utterances[1].meme_id, Some(1));
        assert_eq!(c.dialogues[1].utterances[0].meme_id, Some(0));
        assert_eq!(to_jsonl(&c).unwrap(), TWO);
    }

    #[test]
    fn dangling_meme_names_dialogue() {
        let text = TWO.replace("\"meme_id\":0", "\"meme_id\":999");
        match parse_corpus_jsonl(&text, catalog(), None) {
            Err(Error::DanglingMeme { dialogue, meme_id }) => {
                assert_eq!((dialogue, meme_id), (1, 999));
            }
            other => panic!("expected dangling meme, got {other:?}"),
        }
    }

    #[test]
    fn schema_errors_name_line_and_field() {
        let text = TWO.replacen("\"speaker\":2", "\"speaker\":3", 1);
        match parse_corpus_jsonl(&text, catalog(), None) {
            Err(Error::Schema { line, field, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(field, "utterances[1].speaker");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
        let text = TWO.replace("\"bye\",\"meme_id\":null,\"emotion\":null", "\"bye\",\"meme_id\":null,\"emotion\":\"sad\"");
        match parse_corpus_jsonl(&text, catalog(), None) {
            Err(Error::Schema { line, field, .. }) => {
                assert_eq!((line, field.as_str()), (2, "utterances[1].emotion"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}
