//! Named-entity conditioning: the entity dictionary, its NER file format and
//! the fixed-length token context fed to the encoder.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bpe::BpeVocab;
use crate::error::{Error, Result};

/// The 18 spaCy entity categories, alphabetical.
pub const SPACY_LABELS: [&str; 18] = [
    "CARDINAL",
    "DATE",
    "EVENT",
    "FAC",
    "GPE",
    "LANGUAGE",
    "LAW",
    "LOC",
    "MONEY",
    "NORP",
    "ORDINAL",
    "ORG",
    "PERCENT",
    "PERSON",
    "PRODUCT",
    "QUANTITY",
    "TIME",
    "WORK_OF_ART",
];

pub const DEFAULT_TEXT_LEN: usize = 20;

/// Allowed entity-type labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet(Vec<String>);

impl Default for LabelSet {
    fn default() -> Self {
        Self(SPACY_LABELS.iter().map(|s| s.to_string()).collect())
    }
}

impl LabelSet {
    pub fn new(labels: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut v: Vec<String> = labels.into_iter().map(Into::into).collect();
        v.sort();
        v.dedup();
        Self(v)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.binary_search_by(|l| l.as_str().cmp(label)).is_ok()
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }
}

/// Entity type → entity strings. Iteration order is alphabetical by label,
/// which is the order blocks are laid out in a [`TextContext`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NerDictionary {
    entries: BTreeMap<String, Vec<String>>,
}

impl NerDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates labels against `labels` and rejects empty entity strings.
    pub fn from_map(entries: BTreeMap<String, Vec<String>>, labels: &LabelSet) -> Result<Self> {
        let mut dict = Self::new();
        for (label, tokens) in entries {
            dict.set(&label, tokens, labels)
                .map_err(|message| Error::Schema {
                    id: String::new(),
                    message,
                })?;
        }
        Ok(dict)
    }

    /// Replaces the tokens of one type.
    pub fn set(
        &mut self,
        label: &str,
        tokens: Vec<String>,
        labels: &LabelSet,
    ) -> std::result::Result<(), String> {
        if !labels.contains(label) {
            return Err(format!(
                "unknown entity type `{label}`; valid types: {}",
                labels.labels().join(", ")
            ));
        }
        if tokens.iter().any(|t| t.trim().is_empty()) {
            return Err(format!("empty entity string under `{label}`"));
        }
        self.entries.insert(label.to_string(), tokens);
        Ok(())
    }

    pub fn remove(&mut self, label: &str) -> Option<Vec<String>> {
        self.entries.remove(label)
    }

    pub fn get(&self, label: &str) -> Option<&[String]> {
        self.entries.get(label).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// True when no type has any entity.
    pub fn is_empty(&self) -> bool {
        self.entries.values().all(Vec::is_empty)
    }

    /// Parses the command-line grammar `TYPE=a,b;TYPE2=c`.
    pub fn parse_spec(spec: &str, labels: &LabelSet) -> Result<Self> {
        let mut dict = Self::new();
        for block in spec.split(';').map(str::trim).filter(|b| !b.is_empty()) {
            let (label, values) = block.split_once('=').ok_or_else(|| {
                Error::Input(format!("token block `{block}` is not of the form TYPE=a,b"))
            })?;
            let tokens: Vec<String> = values
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(String::from)
                .collect();
            dict.set(label.trim(), tokens, labels).map_err(Error::Input)?;
        }
        Ok(dict)
    }
}

/// Fixed-length conditioning sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextContext {
    pub ids: Vec<usize>,
    /// `true` marks a real token.
    pub mask: Vec<bool>,
    pub source: NerDictionary,
}

impl TextContext {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Unpadded block sequence: per type, `[label] ++ " tok1 tok2" ++ [end]`.
pub fn context_tokens(dict: &NerDictionary, vocab: &BpeVocab, include_types: bool) -> Vec<usize> {
    let end = vocab.specials().end;
    let mut ids = Vec::new();
    for (label, tokens) in dict.iter() {
        if tokens.is_empty() {
            continue;
        }
        if include_types {
            ids.extend(vocab.encode(label));
        }
        let joined: String = tokens.iter().map(|t| format!(" {t}")).collect();
        ids.extend(vocab.encode(&joined));
        ids.push(end);
    }
    ids
}

/// Builds the padded context of exactly `text_len` tokens. Longer sequences
/// keep their prefix.
pub fn build_context(
    dict: &NerDictionary,
    vocab: &BpeVocab,
    text_len: usize,
    include_types: bool,
) -> Result<TextContext> {
    if text_len == 0 {
        return Err(Error::contract("text context length must be at least 1"));
    }
    let mut ids = context_tokens(dict, vocab, include_types);
    ids.truncate(text_len);
    let real = ids.len();
    ids.resize(text_len, vocab.specials().pad);
    let mask = (0..text_len).map(|i| i < real).collect();
    Ok(TextContext {
        ids,
        mask,
        source: dict.clone(),
    })
}

/// One line of an NER file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NerRecord {
    pub id: String,
    pub caption: Option<String>,
    pub entities: NerDictionary,
}

#[derive(Serialize, Deserialize)]
struct NerLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    #[serde(default)]
    entities: BTreeMap<String, Vec<String>>,
}

/// Parses an NER JSON-lines file, preserving record order. Blank lines are
/// ignored.
pub fn parse_ner_file(path: impl AsRef<Path>, labels: &LabelSet) -> Result<Vec<NerRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ner_str(&text, &path.display().to_string(), labels)
}

pub fn parse_ner_str(text: &str, origin: &str, labels: &LabelSet) -> Result<Vec<NerRecord>> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: NerLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let entities = NerDictionary::from_map(parsed.entities, labels).map_err(|e| match e {
            Error::Schema { message, .. } => Error::Schema {
                id: parsed.id.clone(),
                message: format!("line {}: {message}", idx + 1),
            },
            other => other,
        })?;
        records.push(NerRecord {
            id: parsed.id,
            caption: parsed.caption,
            entities,
        });
    }
    Ok(records)
}

pub fn write_ner_file(path: impl AsRef<Path>, records: &[NerRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        let line = NerLine {
            id: r.id.clone(),
            caption: r.caption.clone(),
            entities: r.entities.entries.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
