use std::fmt;
use std::str::FromStr;

use super::{Ablation, CaptionModel, Dropout, ModelInput};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    /// Beam search with the given width, ranked by length-normalized
    /// log-probability.
    Beam(usize),
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(Self::Greedy);
        }
        let width = s
            .strip_prefix("beam:")
            .or_else(|| s.strip_prefix("beam="))
            .and_then(|w| w.parse::<usize>().ok())
            .filter(|&w| w > 0);
        width
            .map(Self::Beam)
            .ok_or_else(|| Error::Input(format!("decode mode `{s}`: expected `greedy` or `beam:K`")))
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Greedy => write!(f, "greedy"),
            Self::Beam(k) => write!(f, "beam:{k}"),
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    logp: f64,
    finished: bool,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        self.logp / self.tokens.len().max(1) as f64
    }
}

impl CaptionModel {
    /// Next-token logits after `prefix` (which starts with the start token).
    /// Start and pad are never proposed.
    pub fn next_token_logits(&self, prefix: &[usize], memory: &Tensor, memory_mask: &[bool]) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(self.params());
        let mem = tape.constant(memory.clone());
        let logits = self.decoder_logits(&mut tape, prefix, mem, memory_mask, &mut Dropout::off())?;
        let mut row = tape.value(logits).row(prefix.len() - 1).to_vec();
        let s = self.config.specials;
        row[s.start] = f64::NEG_INFINITY;
        if s.pad != s.end {
            row[s.pad] = f64::NEG_INFINITY;
        }
        Ok(row)
    }

    /// Caption token ids, start and end excluded. At most `max_len` tokens
    /// are produced (capped by the model's caption length).
    pub fn generate(
        &self,
        input: &ModelInput,
        ablation: &Ablation,
        mode: DecodeMode,
        max_len: Option<usize>,
    ) -> Result<Vec<usize>> {
        let (memory, mask) = self.memory(input, ablation)?;
        self.generate_from_memory(&memory, &mask, mode, max_len)
    }

    pub fn generate_from_memory(
        &self,
        memory: &Tensor,
        memory_mask: &[bool],
        mode: DecodeMode,
        max_len: Option<usize>,
    ) -> Result<Vec<usize>> {
        let limit = max_len
            .unwrap_or(self.config.max_caption_len)
            .min(self.config.max_caption_len);
        match mode {
            DecodeMode::Greedy => self.greedy(memory, memory_mask, limit),
            DecodeMode::Beam(0) => Err(Error::Input("beam width must be positive".into())),
            DecodeMode::Beam(k) => self.beam(memory, memory_mask, limit, k),
        }
    }

    fn greedy(&self, memory: &Tensor, mask: &[bool], limit: usize) -> Result<Vec<usize>> {
        let s = self.config.specials;
        let mut prefix = vec![s.start];
        for _ in 0..limit {
            let logits = self.next_token_logits(&prefix, memory, mask)?;
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            if best == s.end {
                break;
            }
            prefix.push(best);
        }
        Ok(prefix[1..].to_vec())
    }

    fn beam(&self, memory: &Tensor, mask: &[bool], limit: usize, width: usize) -> Result<Vec<usize>> {
        let s = self.config.specials;
        let mut beams = vec![Hypothesis {
            tokens: Vec::new(),
            logp: 0.0,
            finished: false,
        }];
        for _ in 0..limit {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            let mut candidates: Vec<Hypothesis> = Vec::new();
            for beam in &beams {
                if beam.finished {
                    candidates.push(beam.clone());
                    continue;
                }
                let mut prefix = Vec::with_capacity(beam.tokens.len() + 1);
                prefix.push(s.start);
                prefix.extend(&beam.tokens);
                let lp = log_softmax(&self.next_token_logits(&prefix, memory, mask)?);
                let mut ranked: Vec<usize> = (0..lp.len()).filter(|&t| lp[t].is_finite()).collect();
                ranked.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for &t in ranked.iter().take(width) {
                    let mut tokens = beam.tokens.clone();
                    tokens.push(t);
                    candidates.push(Hypothesis {
                        tokens,
                        logp: beam.logp + lp[t],
                        finished: t == s.end,
                    });
                }
            }
            // Stable sort keeps earlier beams and lower tokens first on ties.
            candidates.sort_by(|a, b| b.score().total_cmp(&a.score()));
            candidates.truncate(width);
            beams = candidates;
        }
        let best = beams
            .iter()
            .fold(None::<&Hypothesis>, |acc, h| match acc {
                Some(a) if a.score() >= h.score() => Some(a),
                _ => Some(h),
            })
            .expect("at least one beam");
        let mut tokens = best.tokens.clone();
        if tokens.last() == Some(&s.end) {
            tokens.pop();
        }
        Ok(tokens)
    }
}
