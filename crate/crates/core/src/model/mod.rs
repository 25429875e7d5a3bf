//! Transformer encoder–decoder captioner.
//!
//! The encoder attends jointly over one image token, the object slots
//! (graph-enhanced), the relation-edge slots and the entity context tokens.
//! Visual tokens carry a learned segment embedding instead of a position;
//! context and caption tokens share the token and position tables. The
//! decoder is causal and cross-attends to the encoder memory.

mod attention;
pub mod checkpoint;
mod generate;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{MultiHeadAttention, MASKED_SCORE};
pub use generate::DecodeMode;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::bpe::SpecialIds;
use crate::context::TextContext;
use crate::error::{Error, Result};
use crate::graph::{run_graph, GraphConfig, GraphParams};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::visual::VisualRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub specials: SpecialIds,
    /// Entity context length.
    pub text_len: usize,
    pub n_obj: usize,
    pub d_vis: usize,
    /// Longest caption body, start/end excluded.
    pub max_caption_len: usize,
    pub dropout: f64,
    /// Pre-norm residual blocks; `false` selects post-norm.
    pub pre_norm: bool,
    /// Reuse the token table as the output projection.
    pub tie_output: bool,
    pub graph: GraphConfig,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    /// Small default sized for CPU training.
    pub fn desk(vocab_size: usize, specials: SpecialIds, d_vis: usize) -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers: 3,
            d_ff: 512,
            vocab_size,
            specials,
            text_len: crate::context::DEFAULT_TEXT_LEN,
            n_obj: crate::visual::DEFAULT_N_OBJ,
            d_vis,
            max_caption_len: 100,
            dropout: 0.0,
            pre_norm: true,
            tie_output: false,
            graph: GraphConfig::new(d_vis),
            seed: 0,
        }
    }

    pub fn edge_capacity(&self) -> usize {
        self.n_obj * self.graph.k
    }

    /// Encoder sequence length: image + objects + edges + context.
    pub fn encoder_len(&self) -> usize {
        1 + self.n_obj + self.edge_capacity() + self.text_len
    }

    /// Rows of the position table: start token plus the caption body.
    pub fn max_decoder_len(&self) -> usize {
        self.max_caption_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_caption_len < 2 {
            return bad("max_caption_len must be at least 2".into());
        }
        if self.graph.d_vis != self.d_vis {
            return bad(format!(
                "graph d_vis {} differs from model d_vis {}",
                self.graph.d_vis, self.d_vis
            ));
        }
        let s = self.specials;
        if s.start.max(s.end).max(s.pad) >= self.vocab_size {
            return bad("special token ids exceed vocabulary".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.text_len == 0 || self.n_layers == 0 {
            return bad("text_len and n_layers must be positive".into());
        }
        self.graph.validate(self.n_obj)
    }
}

/// Which encoder segments are fed. Disabled segments are replaced by zeros
/// and masked out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_visual: bool,
    pub use_textual: bool,
    pub use_graph: bool,
    pub use_edge_feats: bool,
    pub use_object_feats: bool,
    /// Include entity-type labels in the context (applied when building it).
    pub use_entity_types: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_visual: true,
            use_textual: true,
            use_graph: true,
            use_edge_feats: true,
            use_object_feats: true,
            use_entity_types: true,
        }
    }
}

/// One sample's encoder inputs.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub visual: &'a VisualRecord,
    pub text: &'a TextContext,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm_attn: LayerNorm,
    ffn: Mlp,
    norm_ffn: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm_self: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    ffn: Mlp,
    norm_ffn: LayerNorm,
}

#[derive(Clone, Debug)]
struct Layout {
    token_embed: ParamId,
    pos_embed: ParamId,
    visual_proj: Linear,
    seg_image: ParamId,
    seg_object: ParamId,
    seg_edge: ParamId,
    seg_text: ParamId,
    graph: GraphParams,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Option<LayerNorm>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Option<LayerNorm>,
    output: Option<Linear>,
    output_bias: Option<ParamId>,
}

/// Dropout applied on residual branches while training.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: (rate > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..tape.value(x).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = tape.constant(Tensor::new(tape.shape(x).to_vec(), mask)?);
        tape.mul(x, m)
    }
}

/// Captioning model: configuration, parameters and their layout.
#[derive(Clone, Debug)]
pub struct CaptionModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl CaptionModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed_std = 0.02;
        let token_embed = store.insert(
            "embed.token",
            Tensor::randn(&[config.vocab_size, d], embed_std, &mut rng),
        );
        let pos_rows = config.max_decoder_len().max(config.text_len);
        let pos_embed = store.insert("embed.position", Tensor::randn(&[pos_rows, d], embed_std, &mut rng));
        let visual_proj = Linear::new(&mut store, "visual.proj", config.d_vis, d, &mut rng);
        let seg = |name: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            store.insert(format!("segment.{name}"), Tensor::randn(&[d], embed_std, rng))
        };
        let seg_image = seg("image", &mut store, &mut rng);
        let seg_object = seg("object", &mut store, &mut rng);
        let seg_edge = seg("edge", &mut store, &mut rng);
        let seg_text = seg("text", &mut store, &mut rng);
        let graph = GraphParams::new(&mut store, "graph", &config.graph, &mut rng);

        let encoder = (0..config.n_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderLayer {
                    attn: MultiHeadAttention::new(&mut store, &format!("{p}.attn"), d, config.n_heads, &mut rng),
                    norm_attn: LayerNorm::new(&mut store, &format!("{p}.norm_attn"), d),
                    ffn: Mlp::new(&mut store, &format!("{p}.ffn"), d, config.d_ff, d, &mut rng),
                    norm_ffn: LayerNorm::new(&mut store, &format!("{p}.norm_ffn"), d),
                }
            })
            .collect();
        let encoder_norm = config
            .pre_norm
            .then(|| LayerNorm::new(&mut store, "encoder.norm", d));
        let decoder = (0..config.n_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(&mut store, &format!("{p}.self_attn"), d, config.n_heads, &mut rng),
                    norm_self: LayerNorm::new(&mut store, &format!("{p}.norm_self"), d),
                    cross_attn: MultiHeadAttention::new(&mut store, &format!("{p}.cross_attn"), d, config.n_heads, &mut rng),
                    norm_cross: LayerNorm::new(&mut store, &format!("{p}.norm_cross"), d),
                    ffn: Mlp::new(&mut store, &format!("{p}.ffn"), d, config.d_ff, d, &mut rng),
                    norm_ffn: LayerNorm::new(&mut store, &format!("{p}.norm_ffn"), d),
                }
            })
            .collect();
        let decoder_norm = config
            .pre_norm
            .then(|| LayerNorm::new(&mut store, "decoder.norm", d));
        let (output, output_bias) = if config.tie_output {
            (None, Some(store.insert("output.bias", Tensor::zeros(&[config.vocab_size]))))
        } else {
            (Some(Linear::new(&mut store, "output", d, config.vocab_size, &mut rng)), None)
        };

        Ok(Self {
            config,
            params: store,
            layout: Layout {
                token_embed,
                pos_embed,
                visual_proj,
                seg_image,
                seg_object,
                seg_edge,
                seg_text,
                graph,
                encoder,
                encoder_norm,
                decoder,
                decoder_norm,
                output,
                output_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Named parameter groups, used for ablation and gradient checks.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let l = &self.layout;
        let mut groups = vec![
            ("embed.token", vec![l.token_embed]),
            ("embed.position", vec![l.pos_embed]),
            ("visual.proj", l.visual_proj.params().to_vec()),
            ("segment.image", vec![l.seg_image]),
            ("segment.object", vec![l.seg_object]),
            ("segment.edge", vec![l.seg_edge]),
            ("segment.text", vec![l.seg_text]),
            ("graph.steps", l.graph.step_params()),
            ("graph.edge", l.graph.edge_params()),
        ];
        let mut enc: Vec<ParamId> = l
            .encoder
            .iter()
            .flat_map(|e| {
                let mut p = e.attn.params();
                p.extend(e.norm_attn.params());
                p.extend(e.ffn.params());
                p.extend(e.norm_ffn.params());
                p
            })
            .collect();
        enc.extend(l.encoder_norm.iter().flat_map(LayerNorm::params));
        groups.push(("encoder", enc));
        let mut dec: Vec<ParamId> = l
            .decoder
            .iter()
            .flat_map(|e| {
                let mut p = e.self_attn.params();
                p.extend(e.norm_self.params());
                p.extend(e.cross_attn.params());
                p.extend(e.norm_cross.params());
                p.extend(e.ffn.params());
                p.extend(e.norm_ffn.params());
                p
            })
            .collect();
        dec.extend(l.decoder_norm.iter().flat_map(LayerNorm::params));
        groups.push(("decoder", dec));
        let out: Vec<ParamId> = match (&l.output, l.output_bias) {
            (Some(lin), _) => lin.params().to_vec(),
            (None, Some(b)) => vec![b],
            (None, None) => Vec::new(),
        };
        groups.push(("output", out));
        groups
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let c = &self.config;
        let v = input.visual;
        if v.d_vis() != c.d_vis || v.n_obj() != c.n_obj || v.object_feats.shape() != [c.n_obj, c.d_vis] {
            return Err(Error::Schema {
                id: v.sample_id.clone(),
                message: format!(
                    "features are {} objects × {} dims, model expects {} × {}",
                    v.n_obj(),
                    v.d_vis(),
                    c.n_obj,
                    c.d_vis
                ),
            });
        }
        if input.text.len() != c.text_len {
            return Err(Error::contract(format!(
                "text context has {} tokens, model expects {}",
                input.text.len(),
                c.text_len
            )));
        }
        if let Some(&bad) = input.text.ids.iter().find(|&&i| i >= c.vocab_size) {
            return Err(Error::Vocabulary(format!("context id {bad} out of range")));
        }
        Ok(())
    }

    /// Assembles the encoder sequence (`encoder_len × d_model`) and its mask.
    pub fn encoder_input(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        ablation: &Ablation,
    ) -> Result<(Var, Vec<bool>)> {
        self.check_input(input)?;
        let c = &self.config;
        let l = &self.layout;
        let d = c.d_model;
        let mut parts = Vec::with_capacity(5);
        let mut mask = Vec::with_capacity(c.encoder_len());
        let zeros = |tape: &mut Tape, rows: usize| tape.constant(Tensor::zeros(&[rows, d]));

        let visual = input.visual;
        if ablation.use_visual {
            let img = tape.constant(Tensor::new(vec![1, c.d_vis], visual.image_feat.clone())?);
            let p = l.visual_proj.forward(tape, img)?;
            let seg = tape.param(l.seg_image);
            parts.push(tape.add_row(p, seg)?);
            mask.push(true);
        } else {
            parts.push(zeros(tape, 1));
            mask.push(false);
        }

        let objects_on = ablation.use_visual && ablation.use_object_feats;
        let edges_on = ablation.use_visual && ablation.use_graph && ablation.use_edge_feats;
        let objs = tape.constant(visual.object_feats.clone());
        let graph = if ablation.use_visual && ablation.use_graph && (objects_on || edges_on) {
            Some(run_graph(tape, objs, &visual.object_mask, &c.graph, &l.graph)?)
        } else {
            None
        };

        if objects_on {
            let nodes = match &graph {
                Some(g) => g.enhanced_nodes,
                None => objs,
            };
            let p = l.visual_proj.forward(tape, nodes)?;
            let seg = tape.param(l.seg_object);
            parts.push(tape.add_row(p, seg)?);
            mask.extend(&visual.object_mask);
        } else {
            parts.push(zeros(tape, c.n_obj));
            mask.extend(std::iter::repeat(false).take(c.n_obj));
        }

        let cap = c.edge_capacity();
        let real_edges = graph.as_ref().map_or(0, |g| g.edge_index.len());
        match &graph {
            Some(g) if edges_on && real_edges > 0 => {
                let p = l.visual_proj.forward(tape, g.edge_features)?;
                let seg = tape.param(l.seg_edge);
                parts.push(tape.add_row(p, seg)?);
                mask.extend(std::iter::repeat(true).take(real_edges));
                if real_edges < cap {
                    parts.push(zeros(tape, cap - real_edges));
                    mask.extend(std::iter::repeat(false).take(cap - real_edges));
                }
            }
            _ => {
                parts.push(zeros(tape, cap));
                mask.extend(std::iter::repeat(false).take(cap));
            }
        }

        if ablation.use_textual {
            let table = tape.param(l.token_embed);
            let emb = tape.gather_rows(table, &input.text.ids)?;
            let pos_table = tape.param(l.pos_embed);
            let pos = tape.slice_rows(pos_table, 0, c.text_len)?;
            let x = tape.add(emb, pos)?;
            let seg = tape.param(l.seg_text);
            parts.push(tape.add_row(x, seg)?);
            mask.extend(&input.text.mask);
        } else {
            parts.push(zeros(tape, c.text_len));
            mask.extend(std::iter::repeat(false).take(c.text_len));
        }

        let x = tape.concat(&parts, 0)?;
        Ok((x, mask))
    }

    /// Runs the encoder stack over an assembled sequence.
    pub fn encode(&self, tape: &mut Tape, x: Var, mask: &[bool], drop: &mut Dropout) -> Result<Var> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::contract("encoder input is fully masked"));
        }
        if tape.shape(x) != [mask.len(), self.config.d_model] {
            return Err(Error::dim(format!(
                "encoder input {:?} vs {} mask flags",
                tape.shape(x),
                mask.len()
            )));
        }
        let mut h = x;
        for layer in &self.layout.encoder {
            h = if self.config.pre_norm {
                let n = layer.norm_attn.forward(tape, h)?;
                let a = layer.attn.forward(tape, n, n, mask, false)?;
                let a = drop.apply(tape, a)?;
                let h1 = tape.add(h, a)?;
                let n = layer.norm_ffn.forward(tape, h1)?;
                let f = layer.ffn.forward(tape, n)?;
                let f = drop.apply(tape, f)?;
                tape.add(h1, f)?
            } else {
                let a = layer.attn.forward(tape, h, h, mask, false)?;
                let a = drop.apply(tape, a)?;
                let s = tape.add(h, a)?;
                let h1 = layer.norm_attn.forward(tape, s)?;
                let f = layer.ffn.forward(tape, h1)?;
                let f = drop.apply(tape, f)?;
                let s = tape.add(h1, f)?;
                layer.norm_ffn.forward(tape, s)?
            };
        }
        match &self.layout.encoder_norm {
            Some(norm) => norm.forward(tape, h),
            None => Ok(h),
        }
    }

    /// Logits (`prefix.len() × vocab`) for every decoder position.
    pub fn decoder_logits(
        &self,
        tape: &mut Tape,
        prefix: &[usize],
        memory: Var,
        memory_mask: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let c = &self.config;
        let l = &self.layout;
        if prefix.is_empty() {
            return Err(Error::contract("decoder needs at least the start token"));
        }
        if prefix.len() > c.max_decoder_len() {
            return Err(Error::contract(format!(
                "decoder prefix of {} tokens exceeds {}",
                prefix.len(),
                c.max_decoder_len()
            )));
        }
        if let Some(&bad) = prefix.iter().find(|&&i| i >= c.vocab_size) {
            return Err(Error::Vocabulary(format!("caption id {bad} out of range")));
        }
        let table = tape.param(l.token_embed);
        let emb = tape.gather_rows(table, prefix)?;
        let pos_table = tape.param(l.pos_embed);
        let pos = tape.slice_rows(pos_table, 0, prefix.len())?;
        let mut h = tape.add(emb, pos)?;
        let self_mask = vec![true; prefix.len()];
        for layer in &l.decoder {
            h = if c.pre_norm {
                let n = layer.norm_self.forward(tape, h)?;
                let a = layer.self_attn.forward(tape, n, n, &self_mask, true)?;
                let a = drop.apply(tape, a)?;
                let h1 = tape.add(h, a)?;
                let n = layer.norm_cross.forward(tape, h1)?;
                let a = layer.cross_attn.forward(tape, n, memory, memory_mask, false)?;
                let a = drop.apply(tape, a)?;
                let h2 = tape.add(h1, a)?;
                let n = layer.norm_ffn.forward(tape, h2)?;
                let f = layer.ffn.forward(tape, n)?;
                let f = drop.apply(tape, f)?;
                tape.add(h2, f)?
            } else {
                let a = layer.self_attn.forward(tape, h, h, &self_mask, true)?;
                let a = drop.apply(tape, a)?;
                let s = tape.add(h, a)?;
                let h1 = layer.norm_self.forward(tape, s)?;
                let a = layer.cross_attn.forward(tape, h1, memory, memory_mask, false)?;
                let a = drop.apply(tape, a)?;
                let s = tape.add(h1, a)?;
                let h2 = layer.norm_cross.forward(tape, s)?;
                let f = layer.ffn.forward(tape, h2)?;
                let f = drop.apply(tape, f)?;
                let s = tape.add(h2, f)?;
                layer.norm_ffn.forward(tape, s)?
            };
        }
        if let Some(norm) = &l.decoder_norm {
            h = norm.forward(tape, h)?;
        }
        match (&l.output, l.output_bias) {
            (Some(lin), _) => lin.forward(tape, h),
            (None, Some(bias)) => {
                let table = tape.param(l.token_embed);
                let t = tape.transpose(table)?;
                let z = tape.matmul(h, t)?;
                let b = tape.param(bias);
                tape.add_row(z, b)
            }
            (None, None) => unreachable!("output head always exists"),
        }
    }

    /// Encoder memory for one sample, materialized outside any tape.
    pub fn memory(&self, input: &ModelInput, ablation: &Ablation) -> Result<(Tensor, Vec<bool>)> {
        let mut tape = Tape::with_params(&self.params);
        let (x, mask) = self.encoder_input(&mut tape, input, ablation)?;
        let m = self.encode(&mut tape, x, &mask, &mut Dropout::off())?;
        Ok((tape.value(m).clone(), mask))
    }

    /// Replaces parameter values by name; every parameter must be present
    /// with a matching shape.
    pub fn load_values<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in values {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if self.params.get(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = value;
            seen[id.index()] = true;
        }
        if let Some(missing) = self.params.ids().find(|id| !seen[id.index()]) {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` missing",
                self.params.name(missing)
            )));
        }
        Ok(())
    }
}
