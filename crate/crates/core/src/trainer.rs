//! Teacher-forced training with Adam.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, ParamStore, Reduction, Tape, Tensor, Var};
use crate::bpe::BpeVocab;
use crate::context::{build_context, NerRecord, TextContext};
use crate::error::{Error, Result};
use crate::model::{Ablation, CaptionModel, Dropout, ModelInput};
use crate::visual::VisualRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    /// Cross-entropy with inverse-frequency class weights.
    WeightedCrossEntropy,
    Focal { gamma: f64 },
}

pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Self::CrossEntropy),
            "weighted-ce" => Ok(Self::WeightedCrossEntropy),
            "focal" => Ok(Self::Focal { gamma: DEFAULT_FOCAL_GAMMA }),
            _ => s
                .strip_prefix("focal:")
                .and_then(|g| g.parse::<f64>().ok())
                .filter(|g| *g >= 0.0)
                .map(|gamma| Self::Focal { gamma })
                .ok_or_else(|| {
                    Error::Input(format!("loss `{s}`: expected ce, weighted-ce, focal or focal:GAMMA"))
                }),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::CrossEntropy => write!(f, "ce"),
            Self::WeightedCrossEntropy => write!(f, "weighted-ce"),
            Self::Focal { gamma } => write!(f, "focal:{gamma}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub ablation: Ablation,
    pub data_fraction: f64,
    /// Stop once an epoch's mean loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 100,
            batch_size: 8,
            loss: LossKind::CrossEntropy,
            seed: 0,
            ablation: Ablation::default(),
            data_fraction: 1.0,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Input(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let LossKind::Focal { gamma } = self.loss {
            if !(gamma >= 0.0) {
                return Err(Error::Input(format!("focal gamma must be non-negative, got {gamma}")));
            }
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Input(format!(
                "data fraction must lie in (0, 1], got {}",
                self.data_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Named ablation configurations.
pub const ABLATION_PRESETS: &[&str] = &[
    "full",
    "w/o-visual",
    "w/o-textual",
    "w/o-net",
    "w/o-graph",
    "w/o-edge-features",
    "w/o-object-features",
    "transformer-baseline",
];

pub fn ablation_preset(name: &str) -> Result<Ablation> {
    let full = Ablation::default();
    let a = match name {
        "full" => full,
        "w/o-visual" => Ablation { use_visual: false, ..full },
        "w/o-textual" => Ablation { use_textual: false, ..full },
        "w/o-net" => Ablation { use_entity_types: false, ..full },
        "w/o-graph" | "w/o-relational-graph" => Ablation { use_graph: false, ..full },
        "w/o-edge-features" => Ablation { use_edge_feats: false, ..full },
        "w/o-object-features" => Ablation { use_object_feats: false, ..full },
        "transformer-baseline" => Ablation {
            use_graph: false,
            use_object_feats: false,
            use_entity_types: false,
            ..full
        },
        _ => {
            return Err(Error::Input(format!(
                "unknown ablation `{name}`; expected one of: {}",
                ABLATION_PRESETS.join(", ")
            )))
        }
    };
    Ok(a)
}

/// One training pair. `target` is `[start] ++ caption ++ [end]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub visual: VisualRecord,
    pub text: TextContext,
    pub caption: String,
    pub target: Vec<usize>,
}

impl TrainSample {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            visual: &self.visual,
            text: &self.text,
        }
    }
}

/// `[start] ++ encode(caption)[..max_caption_len] ++ [end]`.
pub fn make_target(vocab: &BpeVocab, caption: &str, max_caption_len: usize) -> Vec<usize> {
    let s = vocab.specials();
    let mut body = vocab.encode(caption);
    body.truncate(max_caption_len);
    let mut t = Vec::with_capacity(body.len() + 2);
    t.push(s.start);
    t.extend(body);
    t.push(s.end);
    t
}

/// Shape parameters for [`build_samples`].
#[derive(Clone, Copy, Debug)]
pub struct SampleSpec {
    pub text_len: usize,
    pub include_types: bool,
    pub max_caption_len: usize,
}

/// Joins NER records with feature records by id. Every NER id needs a
/// feature record; the error lists the missing ids.
pub fn build_samples(
    features: &[VisualRecord],
    ner: &[NerRecord],
    vocab: &BpeVocab,
    spec: SampleSpec,
) -> Result<Vec<TrainSample>> {
    let by_id: HashMap<&str, &VisualRecord> = features.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let missing: BTreeSet<&str> = ner
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(20).copied().collect();
        return Err(Error::Data {
            id: shown[0].to_string(),
            message: format!(
                "{} NER record(s) have no feature record: {}{}",
                missing.len(),
                shown.join(", "),
                if missing.len() > shown.len() { ", ..." } else { "" }
            ),
        });
    }
    ner.iter()
        .map(|r| {
            let caption = r.caption.clone().ok_or_else(|| Error::Data {
                id: r.id.clone(),
                message: "training record has no caption".into(),
            })?;
            let text = build_context(&r.entities, vocab, spec.text_len, spec.include_types)?;
            Ok(TrainSample {
                id: r.id.clone(),
                visual: by_id[r.id.as_str()].clone(),
                text,
                target: make_target(vocab, &caption, spec.max_caption_len),
                caption,
            })
        })
        .collect()
}

/// Deterministic subset of `0..n` of size `ceil(fraction * n)`, ascending.
pub fn subsample(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let keep = ((fraction * n as f64).ceil() as usize).clamp(usize::from(n > 0), n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

/// Inverse-frequency weights over predicted tokens, clipped to [0.1, 10] and
/// normalized to mean 1 over the tokens that occur. Unseen tokens get 1.
pub fn token_weights(samples: &[TrainSample], vocab_size: usize) -> Vec<f64> {
    let mut counts = vec![0usize; vocab_size];
    for s in samples {
        for &t in &s.target[1..] {
            counts[t] += 1;
        }
    }
    let seen: Vec<usize> = (0..vocab_size).filter(|&t| counts[t] > 0).collect();
    let mut w = vec![1.0; vocab_size];
    if seen.is_empty() {
        return w;
    }
    let mean_count = seen.iter().map(|&t| counts[t] as f64).sum::<f64>() / seen.len() as f64;
    for &t in &seen {
        w[t] = (mean_count / counts[t] as f64).clamp(0.1, 10.0);
    }
    let mean_w = seen.iter().map(|&t| w[t]).sum::<f64>() / seen.len() as f64;
    for &t in &seen {
        w[t] /= mean_w;
    }
    w
}

/// Per-token loss of `logits` against `targets`, reduced as requested.
pub fn loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[Option<usize>],
    kind: LossKind,
    weights: Option<&[f64]>,
    reduction: Reduction,
) -> Result<Var> {
    match kind {
        LossKind::CrossEntropy => tape.token_loss(logits, targets, None, 0.0, reduction),
        LossKind::WeightedCrossEntropy => {
            let w = weights.ok_or_else(|| Error::contract("weighted cross-entropy needs token weights"))?;
            tape.token_loss(logits, targets, Some(w), 0.0, reduction)
        }
        LossKind::Focal { gamma } => tape.token_loss(logits, targets, None, gamma, reduction),
    }
}

/// Summed teacher-forced loss of one sample and its number of predicted tokens.
pub fn sample_loss(
    tape: &mut Tape,
    model: &CaptionModel,
    sample: &TrainSample,
    ablation: &Ablation,
    kind: LossKind,
    weights: Option<&[f64]>,
    drop: &mut Dropout,
) -> Result<(Var, usize)> {
    let (x, mask) = model.encoder_input(tape, &sample.input(), ablation)?;
    let memory = model.encode(tape, x, &mask, drop)?;
    let n = sample.target.len() - 1;
    let logits = model.decoder_logits(tape, &sample.target[..n], memory, &mask, drop)?;
    let labels: Vec<Option<usize>> = sample.target[1..].iter().map(|&t| Some(t)).collect();
    let l = loss(tape, logits, &labels, kind, weights, Reduction::Sum)?;
    Ok((l, n))
}

/// Mean per-token loss over `batch` and its parameter gradients.
pub fn batch_gradients(
    model: &CaptionModel,
    batch: &[&TrainSample],
    ablation: &Ablation,
    kind: LossKind,
    weights: Option<&[f64]>,
    drop: &mut Dropout,
) -> Result<(f64, usize, ParamGrads)> {
    let mut tape = Tape::with_params(model.params());
    let mut total = None;
    let mut tokens = 0;
    for sample in batch {
        let (l, n) = sample_loss(&mut tape, model, sample, ablation, kind, weights, drop)?;
        tokens += n;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::contract("empty batch"))?;
    let mean = tape.scale(total, 1.0 / tokens.max(1) as f64);
    let value = tape.value(mean).item();
    let grads = tape.backward(mean)?;
    let mut out = ParamGrads::zeros_like(model.params());
    grads.accumulate_into(&mut out);
    Ok((value, tokens, out))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Non-finite gradients abort without touching
    /// parameters or state.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter() {
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for `{}` at element {bad} (value {}) on step {}",
                    params.name(id),
                    g.data()[bad],
                    self.step + 1
                )));
            }
            if g.shape() != params.get(id).shape() {
                return Err(Error::contract(format!("gradient shape mismatch for `{}`", params.name(id))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-token training loss over the epoch.
    pub loss: f64,
    pub tokens_per_sec: f64,
}

/// Trains `model` in place and returns the per-epoch log. `on_epoch` sees
/// each entry as it is produced.
pub fn train(
    model: &mut CaptionModel,
    samples: &[TrainSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let chosen = subsample(samples.len(), config.data_fraction, config.seed);
    if chosen.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let data: Vec<&TrainSample> = chosen.iter().map(|&i| &samples[i]).collect();
    let weights = matches!(config.loss, LossKind::WeightedCrossEntropy)
        .then(|| token_weights(&data.iter().map(|s| (*s).clone()).collect::<Vec<_>>(), model.config().vocab_size));
    let mut adam = Adam::new(model.params(), config.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut drop = Dropout::new(model.config().dropout, config.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut tokens = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| data[i]).collect();
            let (value, n, grads) = batch_gradients(
                model,
                &batch,
                &config.ablation,
                config.loss,
                weights.as_deref(),
                &mut drop,
            )?;
            if !value.is_finite() {
                return Err(Error::Training(format!("loss became {value} in epoch {epoch}")));
            }
            adam.step(model.params_mut(), &grads)?;
            loss_sum += value * n as f64;
            tokens += n;
        }
        let secs = started.elapsed().as_secs_f64();
        let entry = EpochLog {
            epoch,
            loss: loss_sum / tokens as f64,
            tokens_per_sec: if secs > 0.0 { tokens as f64 / secs } else { 0.0 },
        };
        on_epoch(&entry);
        log.push(entry);
        if config.target_loss.is_some_and(|t| entry.loss < t) {
            break;
        }
    }
    Ok(log)
}

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,tokens_per_sec\n");
    for e in log {
        out.push_str(&format!("{},{},{:.1}\n", e.epoch, e.loss, e.tokens_per_sec));
    }
    out
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, loss_log_csv(log)).map_err(|e| Error::io(path, e))
}
