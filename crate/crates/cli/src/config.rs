//! Run configuration: an optional TOML/JSON file overlaid by command-line
//! flags. The resolved form is written next to every training run and can be
//! passed back with `--config` to repeat it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ooc_core::trainer::ablation_preset;
use ooc_core::{BpeVocab, GraphConfig, LossKind, ModelConfig, TrainConfig};

use crate::UsageError;

pub const DEFAULT_VOCAB_SIZE: usize = 1000;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub features: Option<PathBuf>,
    pub ner: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    /// Target size when the tokenizer is trained from the data.
    pub vocab_size: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub d_ff: Option<usize>,
    pub text_len: Option<usize>,
    pub n_obj: Option<usize>,
    pub max_caption_len: Option<usize>,
    pub dropout: Option<f64>,
    pub pre_norm: Option<bool>,
    pub tie_output: Option<bool>,
    pub graph_k: Option<usize>,
    pub graph_steps: Option<usize>,
    pub graph_hidden: Option<usize>,
    pub init_seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub loss: Option<String>,
    pub seed: Option<u64>,
    pub ablation: Option<String>,
    pub data_fraction: Option<f64>,
    pub target_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

macro_rules! overlay {
    ($base:expr, $top:expr; $($field:ident),+) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )+
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| anyhow::Error::new(UsageError(format!("{}: {e}", path.display()))))
        } else {
            toml::from_str(&text).map_err(|e| anyhow::Error::new(UsageError(format!("{}: {e}", path.display()))))
        };
        parsed
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: &RunConfig) -> Self {
        overlay!(self.data, top.data; features, ner, vocab, merges, vocab_size);
        overlay!(self.model, top.model; d_model, n_heads, n_layers, d_ff, text_len, n_obj,
            max_caption_len, dropout, pre_norm, tie_output, graph_k, graph_steps, graph_hidden, init_seed);
        overlay!(self.train, top.train; lr, epochs, batch_size, loss, seed, ablation, data_fraction, target_loss);
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn required_path(value: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        value
            .clone()
            .ok_or_else(|| UsageError(format!("missing {flag} (flag or config file)")).into())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let t = &self.train;
        let ablation = ablation_preset(t.ablation.as_deref().unwrap_or("full"))?;
        let loss = match &t.loss {
            Some(s) => s.parse::<LossKind>()?,
            None => d.loss,
        };
        let config = TrainConfig {
            lr: t.lr.unwrap_or(d.lr),
            epochs: t.epochs.unwrap_or(d.epochs),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            loss,
            seed: t.seed.unwrap_or(d.seed),
            ablation,
            data_fraction: t.data_fraction.unwrap_or(d.data_fraction),
            target_loss: t.target_loss,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn model_config(&self, vocab: &BpeVocab, d_vis: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::desk(vocab.vocab_size(), vocab.specials(), d_vis);
        let m = &self.model;
        c.d_model = m.d_model.unwrap_or(c.d_model);
        c.n_heads = m.n_heads.unwrap_or(c.n_heads);
        c.n_layers = m.n_layers.unwrap_or(c.n_layers);
        c.d_ff = m.d_ff.unwrap_or(c.d_ff);
        c.text_len = m.text_len.unwrap_or(c.text_len);
        c.n_obj = m.n_obj.unwrap_or(c.n_obj);
        c.max_caption_len = m.max_caption_len.unwrap_or(c.max_caption_len);
        c.dropout = m.dropout.unwrap_or(c.dropout);
        c.pre_norm = m.pre_norm.unwrap_or(c.pre_norm);
        c.tie_output = m.tie_output.unwrap_or(c.tie_output);
        let g = GraphConfig::new(d_vis);
        c.graph = GraphConfig {
            k: m.graph_k.unwrap_or_else(|| g.k.min(c.n_obj.saturating_sub(1)).max(1)),
            steps: m.graph_steps.unwrap_or(g.steps),
            hidden_dim: m.graph_hidden.unwrap_or(g.hidden_dim),
            d_vis,
        };
        c.seed = m.init_seed.unwrap_or(0);
        c.validate()?;
        Ok(c)
    }

    /// Fully populated copy reflecting the values actually used.
    pub fn resolved(&self, model: &ModelConfig, train: &TrainConfig, vocab_size: Option<usize>) -> Self {
        let abs = |p: &Option<PathBuf>| p.as_ref().map(|p| fs::canonicalize(p).unwrap_or_else(|_| p.clone()));
        RunConfig {
            data: DataSection {
                features: abs(&self.data.features),
                ner: abs(&self.data.ner),
                vocab: abs(&self.data.vocab),
                merges: abs(&self.data.merges),
                vocab_size,
            },
            model: ModelSection {
                d_model: Some(model.d_model),
                n_heads: Some(model.n_heads),
                n_layers: Some(model.n_layers),
                d_ff: Some(model.d_ff),
                text_len: Some(model.text_len),
                n_obj: Some(model.n_obj),
                max_caption_len: Some(model.max_caption_len),
                dropout: Some(model.dropout),
                pre_norm: Some(model.pre_norm),
                tie_output: Some(model.tie_output),
                graph_k: Some(model.graph.k),
                graph_steps: Some(model.graph.steps),
                graph_hidden: Some(model.graph.hidden_dim),
                init_seed: Some(model.seed),
            },
            train: TrainSection {
                lr: Some(train.lr),
                epochs: Some(train.epochs),
                batch_size: Some(train.batch_size),
                loss: Some(train.loss.to_string()),
                seed: Some(train.seed),
                ablation: Some(self.train.ablation.clone().unwrap_or_else(|| "full".into())),
                data_fraction: Some(train.data_fraction),
                target_loss: train.target_loss,
            },
        }
    }
}
