//! Caption metrics: BLEU-4, CIDEr, ROUGE-L and METEOR.
//!
//! All four share one normalizer: lowercase, split punctuation into separate
//! tokens, split on whitespace. METEOR has exact and Porter-stem matching
//! only (no synonym stage).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORMALIZER_VERSION: &str = "lowercase+punct-split+whitespace/1";

const BLEU_EPSILON: f64 = 1e-9;
const ROUGE_BETA_SQ: f64 = 1.2;
const METEOR_ALPHA: f64 = 0.9;
const METEOR_GAMMA: f64 = 0.5;
const METEOR_BETA: f64 = 3.0;

pub fn normalize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
        } else if c.is_alphanumeric() {
            word.push(c);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub hyp: String,
    pub refs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCorpus {
    items: Vec<EvalItem>,
}

impl EvalCorpus {
    pub fn new(items: Vec<EvalItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Input("evaluation corpus is empty".into()));
        }
        if let Some(bad) = items.iter().find(|i| i.refs.is_empty()) {
            return Err(Error::Data {
                id: bad.id.clone(),
                message: "item has no reference captions".into(),
            });
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[EvalItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// JSON lines of `{"id", "hyp", "refs": [...]}`.
    pub fn parse_jsonl(text: &str, origin: &str) -> Result<Self> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: EvalItem = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: origin.into(),
                line: i + 1,
                message: e.to_string(),
            })?;
            items.push(item);
        }
        Self::new(items)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&text, &path.display().to_string())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item)?);
            out.push('\n');
        }
        Ok(out)
    }
}

struct Tokenized {
    hyp: Vec<String>,
    refs: Vec<Vec<String>>,
}

fn tokenize(corpus: &EvalCorpus) -> Vec<Tokenized> {
    corpus
        .items
        .iter()
        .map(|i| Tokenized {
            hyp: normalize(&i.hyp),
            refs: i.refs.iter().map(|r| normalize(r)).collect(),
        })
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis n-gram total for one item.
fn bleu_stats(item: &Tokenized, n: usize) -> (usize, usize) {
    let hyp = ngram_counts(&item.hyp, n);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in &item.refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let clipped = hyp
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, item.hyp.len().saturating_sub(n - 1))
}

/// Reference length closest to the hypothesis length, shorter on ties.
fn closest_ref_len(item: &Tokenized) -> usize {
    let c = item.hyp.len() as i64;
    item.refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - c).abs(), l))
        .unwrap_or(0)
}

fn bleu_from(items: &[&Tokenized]) -> f64 {
    let c: usize = items.iter().map(|i| i.hyp.len()).sum();
    if c == 0 {
        return 0.0;
    }
    let r: usize = items.iter().map(|i| closest_ref_len(i)).sum();
    let mut log_p = 0.0;
    for n in 1..=4 {
        let (m, t) = items
            .iter()
            .map(|i| bleu_stats(i, n))
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        let p = if m == 0 {
            BLEU_EPSILON / t.max(1) as f64
        } else {
            m as f64 / t as f64
        };
        log_p += p.ln() / 4.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * log_p.exp()
}

/// Corpus BLEU-4 in [0, 100].
pub fn bleu4(corpus: &EvalCorpus) -> f64 {
    let toks = tokenize(corpus);
    bleu_from(&toks.iter().collect::<Vec<_>>())
}

type NgramVec<'a> = HashMap<&'a [String], f64>;

fn tfidf<'a>(tokens: &'a [String], n: usize, idf: &dyn Fn(&[String]) -> f64) -> NgramVec<'a> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, c)| (g, c as f64 * idf(g)))
        .collect()
}

fn cosine(a: &NgramVec, b: &NgramVec) -> f64 {
    let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn cider_items(toks: &[Tokenized]) -> Vec<f64> {
    let n_docs = toks.len();
    let mut scores = vec![0.0; n_docs];
    for n in 1..=4 {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for item in toks {
            let grams: HashSet<&[String]> = item
                .refs
                .iter()
                .flat_map(|r| ngram_counts(r, n).into_keys())
                .collect();
            for g in grams {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| -> f64 {
            if n_docs == 1 {
                1.0
            } else {
                (n_docs as f64).ln() - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln()
            }
        };
        for (item, score) in toks.iter().zip(scores.iter_mut()) {
            let h = tfidf(&item.hyp, n, &idf);
            let sim: f64 = item.refs.iter().map(|r| cosine(&h, &tfidf(r, n, &idf))).sum();
            *score += sim / item.refs.len() as f64 / 4.0;
        }
    }
    scores.iter().map(|s| s * 10.0).collect()
}

/// Per-item CIDEr scores (idf from the references of the whole corpus).
pub fn cider_per_item(corpus: &EvalCorpus) -> Vec<f64> {
    cider_items(&tokenize(corpus))
}

/// Corpus mean CIDEr.
pub fn cider(corpus: &EvalCorpus) -> f64 {
    let s = cider_per_item(corpus);
    s.iter().sum::<f64>() / s.len() as f64
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_pair(hyp: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(hyp, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    (1.0 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p)
}

fn rouge_item(item: &Tokenized) -> f64 {
    item.refs
        .iter()
        .map(|r| rouge_pair(&item.hyp, r))
        .fold(0.0, f64::max)
}

/// Mean ROUGE-L F-measure in [0, 100].
pub fn rouge_l(corpus: &EvalCorpus) -> f64 {
    let toks = tokenize(corpus);
    100.0 * toks.iter().map(rouge_item).sum::<f64>() / toks.len() as f64
}

/// Hypothesis-to-reference word alignment: exact matches first, then stem
/// matches, each greedy left to right. Returns `(hyp_pos, ref_pos)` pairs
/// sorted by hypothesis position.
pub fn meteor_alignment(hyp: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut hyp_match: Vec<Option<usize>> = vec![None; hyp.len()];
    for (i, h) in hyp.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && reference[j] == *h) {
            ref_used[j] = true;
            hyp_match[i] = Some(j);
        }
    }
    let ref_stems: Vec<String> = reference.iter().map(|w| porter_stemmer::stem(w)).collect();
    for (i, h) in hyp.iter().enumerate() {
        if hyp_match[i].is_some() {
            continue;
        }
        let stem = porter_stemmer::stem(h);
        if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && ref_stems[j] == stem) {
            ref_used[j] = true;
            hyp_match[i] = Some(j);
        }
    }
    hyp_match
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (i, j)))
        .collect()
}

/// Number of runs of matches adjacent in both sentences.
pub fn meteor_chunks(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// METEOR from match count, chunk count and the two lengths.
pub fn meteor_formula(matches: usize, chunks: usize, hyp_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / hyp_len as f64;
    let r = m / ref_len as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

fn meteor_pair(hyp: &[String], reference: &[String]) -> f64 {
    let a = meteor_alignment(hyp, reference);
    meteor_formula(a.len(), meteor_chunks(&a), hyp.len(), reference.len())
}

fn meteor_item(item: &Tokenized) -> f64 {
    item.refs
        .iter()
        .map(|r| meteor_pair(&item.hyp, r))
        .fold(0.0, f64::max)
}

/// Mean METEOR in [0, 100], best reference per item.
pub fn meteor(corpus: &EvalCorpus) -> f64 {
    let toks = tokenize(corpus);
    100.0 * toks.iter().map(meteor_item).sum::<f64>() / toks.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub cider: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub normalizer: String,
    pub items: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemScores {
    pub id: String,
    pub bleu4: f64,
    pub cider: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

pub fn evaluate(corpus: &EvalCorpus) -> MetricReport {
    MetricReport {
        bleu4: bleu4(corpus),
        cider: cider(corpus),
        rouge_l: rouge_l(corpus),
        meteor: meteor(corpus),
        normalizer: NORMALIZER_VERSION.to_string(),
        items: corpus.len(),
    }
}

/// Per-item scores; BLEU-4 here is sentence-level with the same smoothing.
pub fn per_item(corpus: &EvalCorpus) -> Vec<ItemScores> {
    let toks = tokenize(corpus);
    let cider = cider_items(&toks);
    corpus
        .items
        .iter()
        .zip(&toks)
        .zip(cider)
        .map(|((item, t), c)| ItemScores {
            id: item.id.clone(),
            bleu4: bleu_from(&[t]),
            cider: c,
            rouge_l: 100.0 * rouge_item(t),
            meteor: 100.0 * meteor_item(t),
        })
        .collect()
}

pub fn per_item_csv(scores: &[ItemScores]) -> String {
    let mut out = String::from("id,bleu4,cider,rouge_l,meteor\n");
    for s in scores {
        let id = if s.id.contains([',', '"', '\n']) {
            format!("\"{}\"", s.id.replace('"', "\"\""))
        } else {
            s.id.clone()
        };
        out.push_str(&format!("{id},{},{},{},{}\n", s.bleu4, s.cider, s.rouge_l, s.meteor));
    }
    out
}
