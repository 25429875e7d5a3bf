//! Entity-conditioned image captioning for out-of-context news imagery.
//!
//! A caption is generated from precomputed visual features (whole image plus
//! detected objects, linked into a relation graph) and a short context of
//! named entities (places, dates, people). Everything needed to train and
//! evaluate the model lives here: a tape autodiff engine, a byte-level BPE
//! tokenizer, the graph and transformer, the trainer and caption metrics.

pub mod autodiff;
pub mod bpe;
pub mod context;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;
pub mod visual;

pub use bpe::{BpeVocab, SpecialIds};
pub use context::{build_context, LabelSet, NerDictionary, NerRecord, TextContext};
pub use error::{Error, Result};
pub use graph::GraphConfig;
pub use metrics::{EvalCorpus, EvalItem, MetricReport};
pub use model::checkpoint::{Checkpoint, ContextSettings};
pub use model::{Ablation, CaptionModel, DecodeMode, ModelConfig, ModelInput};
pub use trainer::{LossKind, TrainConfig, TrainSample};
pub use visual::VisualRecord;
