//! Byte-level byte-pair encoding in the GPT-2 scheme.
//!
//! Text is split into chunks with the GPT-2 pre-tokenizer pattern, every byte
//! of a chunk is mapped to a printable stand-in character, and ranked merge
//! rules are applied lowest-rank-first. Because all 256 byte symbols are in
//! the vocabulary, encoding is total.
//!
//! Vocabularies can be loaded from the released `vocab.json` / `merges.txt`
//! pair or trained from a small corpus with [`BpeVocab::train`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";
pub const PAD_TOKEN: &str = "<|pad|>";

const PRETOKENIZE_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Ids of the three special tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpecialIds {
    pub start: usize,
    pub end: usize,
    pub pad: usize,
}

/// Maps each raw byte to the printable character GPT-2 uses for it.
pub fn byte_encoder() -> [char; 256] {
    let mut printable: Vec<u32> = (u32::from('!')..=u32::from('~'))
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut mapped = printable.clone();
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            mapped.push(256 + extra);
            extra += 1;
        }
    }
    let mut table = ['\0'; 256];
    for (b, c) in printable.into_iter().zip(mapped) {
        table[b as usize] = char::from_u32(c).expect("valid scalar");
    }
    table
}

/// Vocabulary, ranked merges and byte mapping.
#[derive(Clone, Debug)]
pub struct BpeVocab {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    specials: SpecialIds,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pretokenizer: Regex,
}

impl BpeVocab {
    /// Assembles a vocabulary from an id map and merge list, appending any
    /// missing special tokens after the highest id.
    pub fn from_parts(
        token_to_id: HashMap<String, usize>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        let n = token_to_id.len();
        let mut tokens = vec![String::new(); n];
        let mut seen = vec![false; n];
        for (tok, &id) in &token_to_id {
            if id >= n || seen[id] {
                return Err(Error::Vocabulary(format!(
                    "ids must be dense and unique in [0, {n}); `{tok}` has id {id}"
                )));
            }
            seen[id] = true;
            tokens[id] = tok.clone();
        }
        let mut token_to_id = token_to_id;
        for special in [END_TOKEN, START_TOKEN, PAD_TOKEN] {
            if !token_to_id.contains_key(special) {
                token_to_id.insert(special.to_string(), tokens.len());
                tokens.push(special.to_string());
            }
        }

        let byte_encoder = byte_encoder();
        if let Some(c) = byte_encoder
            .iter()
            .find(|c| !token_to_id.contains_key(&c.to_string()))
        {
            return Err(Error::Vocabulary(format!(
                "byte symbol `{c}` missing; byte-level encoding would not be total"
            )));
        }
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();

        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            let merged = format!("{a}{b}");
            if !token_to_id.contains_key(&merged) {
                return Err(Error::Vocabulary(format!(
                    "merge `{a} {b}` produces `{merged}`, which is not in the vocabulary"
                )));
            }
            ranks.entry((a.clone(), b.clone())).or_insert(rank);
        }

        let specials = SpecialIds {
            start: token_to_id[START_TOKEN],
            end: token_to_id[END_TOKEN],
            pad: token_to_id[PAD_TOKEN],
        };
        Ok(Self {
            tokens,
            token_to_id,
            merges,
            ranks,
            specials,
            byte_encoder,
            byte_decoder,
            pretokenizer: Regex::new(PRETOKENIZE_PATTERN).expect("static pattern"),
        })
    }

    /// Loads a JSON `token -> id` map and a GPT-2 style merges file.
    pub fn load(vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<Self> {
        let vocab_path = vocab_path.as_ref();
        let merges_path = merges_path.as_ref();
        let raw = fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let token_to_id: HashMap<String, usize> = serde_json::from_str(&raw)?;
        let text = fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let merges = parse_merges(&text, &merges_path.display().to_string())?;
        Self::from_parts(token_to_id, merges)
    }

    /// Writes the vocabulary and merges in the same formats `load` reads.
    pub fn save(&self, vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<()> {
        let vocab_path = vocab_path.as_ref();
        let merges_path = merges_path.as_ref();
        let ordered: BTreeMap<usize, &str> = self
            .token_to_id
            .iter()
            .map(|(t, &i)| (i, t.as_str()))
            .collect();
        let mut json = serde_json::Map::new();
        for (id, tok) in ordered {
            json.insert(tok.to_string(), serde_json::Value::from(id));
        }
        let body = serde_json::to_string(&json)?;
        fs::write(vocab_path, body).map_err(|e| Error::io(vocab_path, e))?;
        fs::write(merges_path, self.merges_text()).map_err(|e| Error::io(merges_path, e))?;
        Ok(())
    }

    /// Merges file contents, `#version` header included.
    pub fn merges_text(&self) -> String {
        let mut out = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        out
    }

    /// Learns merges from `corpus` until the byte+merge vocabulary reaches
    /// `target_vocab_size` (the three specials are appended on top) or no
    /// adjacent pair is left to merge.
    ///
    /// The most frequent pair wins; ties go to the lexicographically smallest
    /// pair.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot train merges on an empty corpus".into()));
        }
        let minimum = 256 + 3;
        if target_vocab_size < minimum {
            return Err(Error::Input(format!(
                "target vocabulary size {target_vocab_size} is below {minimum} (bytes + specials)"
            )));
        }
        let encoder = byte_encoder();
        let pretokenizer = Regex::new(PRETOKENIZE_PATTERN).expect("static pattern");

        let mut word_counts: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        for text in corpus {
            for chunk in pretokenize(&pretokenizer, text.as_ref()) {
                let symbols = chunk.bytes().map(|b| encoder[b as usize].to_string()).collect();
                *word_counts.entry(symbols).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, u64)> = word_counts.into_iter().collect();

        let mut tokens: Vec<String> = encoder.iter().map(char::to_string).collect();
        let mut merges = Vec::new();
        while tokens.len() < target_vocab_size {
            let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
            for (symbols, count) in &words {
                for w in symbols.windows(2) {
                    *pair_counts.entry((&w[0], &w[1])).or_default() += count;
                }
            }
            let best = pair_counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((a, b), _)) = best else { break };
            let (a, b) = (a.to_string(), b.to_string());
            let merged = format!("{a}{b}");
            for (symbols, _) in &mut words {
                merge_pair(symbols, &a, &b);
            }
            if !tokens.contains(&merged) {
                tokens.push(merged);
            }
            merges.push((a, b));
        }

        let token_to_id = tokens.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
        Self::from_parts(token_to_id, merges)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.specials.start || id == self.specials.end || id == self.specials.pad
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Token strings in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encodes arbitrary text. Never emits special tokens.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for chunk in pretokenize(&self.pretokenizer, text) {
            let mut symbols: Vec<String> = chunk
                .bytes()
                .map(|b| self.byte_encoder[b as usize].to_string())
                .collect();
            self.apply_merges(&mut symbols);
            ids.extend(symbols.iter().map(|s| self.token_to_id[s]));
        }
        ids
    }

    fn apply_merges(&self, symbols: &mut Vec<String>) {
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            merge_pair(symbols, a, b);
        }
    }

    /// Decodes ids back to text, dropping special tokens. Byte sequences that
    /// are not valid UTF-8 are replaced lossily.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.tokens.get(id).ok_or_else(|| {
                Error::Vocabulary(format!("id {id} out of range for {} tokens", self.tokens.len()))
            })?;
            if self.is_special(id) {
                continue;
            }
            bytes.extend(tok.chars().map(|c| self.byte_decoder[&c]));
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

fn pretokenize<'t>(re: &Regex, text: &'t str) -> Vec<&'t str> {
    re.find_iter(text)
        .map(|m| m.expect("pre-tokenizer pattern cannot fail").as_str())
        .collect()
}

/// Replaces every non-overlapping `(a, b)` occurrence, left to right.
fn merge_pair(symbols: &mut Vec<String>, a: &str, b: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

fn parse_merges(text: &str, path: &str) -> Result<Vec<(String, String)>> {
    let mut merges = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if (idx == 0 && line.starts_with("#version")) || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                merges.push((a.to_string(), b.to_string()));
            }
            _ => {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: idx + 1,
                    message: format!("expected `symbolA symbolB`, got `{line}`"),
                })
            }
        }
    }
    Ok(merges)
}
