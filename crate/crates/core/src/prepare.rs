//! Record → sentence serialization and tokenization.

use serde::Serialize;

use crate::joinspec::TokenizerKind;
use crate::model::Record;

pub const DEFAULT_SEPARATOR: &str = "[SEP]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Sentence {
    pub record_id: String,
    pub text: String,
    #[serde(skip)]
    pub tokens: Vec<String>,
}

/// Renders a record as `key value <sep> key value ...` in stored field order.
/// A field with a blank value contributes only its key.
pub fn sentence_text(record: &Record, separator: &str) -> String {
    let joiner = format!(" {separator} ");
    record
        .fields
        .iter()
        .map(|(k, v)| {
            let v = v.as_text();
            if v.trim().is_empty() {
                k.clone()
            } else {
                format!("{k} {v}")
            }
        })
        .collect::<Vec<_>>()
        .join(&joiner)
}

pub fn tokenize(text: &str, mode: TokenizerKind) -> Vec<String> {
    let lower = text.to_lowercase();
    match mode {
        TokenizerKind::Whitespace => lower.split_whitespace().map(str::to_string).collect(),
        TokenizerKind::Char2gram => {
            let chars: Vec<char> = lower.chars().filter(|c| !c.is_whitespace()).collect();
            chars.windows(2).map(|w| w.iter().collect()).collect()
        }
    }
}

/// Sentence preparer: serialization plus tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Preparer {
    pub separator: String,
    pub tokenizer: TokenizerKind,
}

impl Default for Preparer {
    fn default() -> Self {
        Preparer {
            separator: DEFAULT_SEPARATOR.to_string(),
            tokenizer: TokenizerKind::Whitespace,
        }
    }
}

impl Preparer {
    pub fn new(tokenizer: TokenizerKind) -> Self {
        Preparer {
            tokenizer,
            ..Preparer::default()
        }
    }

    pub fn prepare(&self, record: &Record) -> Sentence {
        let text = sentence_text(record, &self.separator);
        let tokens = tokenize(&text, self.tokenizer);
        Sentence {
            record_id: record.id.clone(),
            text,
            tokens,
        }
    }

    pub fn prepare_all(&self, records: &[Record]) -> Vec<Sentence> {
        records.iter().map(|r| self.prepare(r)).collect()
    }
}

pub fn prepare_sentence(record: &Record, separator: &str) -> Sentence {
    Preparer {
        separator: separator.to_string(),
        tokenizer: TokenizerKind::Whitespace,
    }
    .prepare(record)
}

/// `s1 [SEP] s2`, dropping the space on whichever side is empty.
pub fn pair_sentences(s1: &str, s2: &str, separator: &str) -> String {
    let mut out = String::with_capacity(s1.len() + s2.len() + separator.len() + 2);
    if !s1.is_empty() {
        out.push_str(s1);
        out.push(' ');
    }
    out.push_str(separator);
    if !s2.is_empty() {
        out.push(' ');
        out.push_str(s2);
    }
    out
}

/// Writes `{"record_id": ..., "text": ...}` lines.
pub fn dump_sentences<W: std::io::Write>(sentences: &[Sentence], mut w: W) -> std::io::Result<()> {
    for s in sentences {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
