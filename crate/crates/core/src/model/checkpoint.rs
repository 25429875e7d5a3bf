//! Single-file model checkpoint.
//!
//! Layout (little-endian): magic `OOCM`, `u32` version, `u32` metadata
//! length, metadata JSON, `u32` parameter count, then per parameter
//! `u32` name length, UTF-8 name, `u32` rank, `u32` dims, `f32` values.
//! The metadata holds the model config, the context settings and the full
//! tokenizer, so a checkpoint is self-contained.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Ablation, CaptionModel, ModelConfig};
use crate::autodiff::Tensor;
use crate::bpe::BpeVocab;
use crate::context::LabelSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"OOCM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// How contexts were built for the checkpointed model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSettings {
    pub labels: LabelSet,
    pub ablation: Ablation,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    context: ContextSettings,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: CaptionModel,
    pub vocab: BpeVocab,
    pub context: ContextSettings,
}

impl CaptionModel {
    /// Rounds every parameter to `f32` precision, the precision stored in
    /// checkpoints, so a saved model and its reload behave identically.
    pub fn round_to_f32(&mut self) {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            for v in self.params.get_mut(id).data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            config: self.model.config().clone(),
            context: self.context.clone(),
            tokens: self.vocab.tokens().to_vec(),
            merges: self.vocab.merges().to_vec(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        let params = self.model.params();
        put_u32(&mut out, params.len())?;
        for (_, name, tensor) in params.iter() {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, tensor.shape().len())?;
            for &d in tensor.shape() {
                put_u32(&mut out, d)?;
            }
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = r.u32()?;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let token_map: HashMap<String, usize> =
            meta.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if token_map.len() != meta.tokens.len() {
            return Err(Error::Checkpoint("duplicate tokens in embedded vocabulary".into()));
        }
        let vocab = BpeVocab::from_parts(token_map, meta.merges)?;
        if vocab.vocab_size() != meta.config.vocab_size || vocab.specials() != meta.config.specials {
            return Err(Error::Checkpoint("embedded vocabulary disagrees with model config".into()));
        }

        let n_params = r.u32()?;
        let mut values = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("oversized tensor".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            values.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut model = CaptionModel::new(meta.config)?;
        model.load_values(values.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
        Ok(Self {
            model,
            vocab,
            context: meta.context,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
