//! The dual-encoder network with a query decoder on the image side.
//!
//! Image path: patch tokens from a ViT encoder are attended by `n_q` learnable
//! region queries plus one image query. Region outputs feed a shared box MLP
//! and a shared projection into the joint space; the image query output has
//! its own projection. Text path: a causal transformer pooled at the end token.

mod checkpoint;
mod layers;
mod params;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, OptimizerState, CHECKPOINT_VERSION};
pub use params::{Init, ParamId, ParamStore, Session};

use self::layers::{Builder, DecoderBlock, EncoderBlock, LayerNorm, Linear};
use crate::geometry::NormBox;
use crate::image::ImageTensor;
use crate::scalar::Scalar;
use crate::tensor::{Mat, TensorError, Var};
use crate::tokenizer::{TokenIds, TokenizationError, Tokenizer};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("image is {got_h}x{got_w} but the model expects {want}x{want}")]
    ImageShape { got_h: usize, got_w: usize, want: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Normalization(#[from] TensorError),
    #[error(transparent)]
    Tokenization(#[from] TokenizationError),
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(u32),
    #[error("parameter {name}: expected {want:?}, found {got:?}")]
    ParamShape { name: String, want: (usize, usize), got: (usize, usize) },
    #[error("parameter {0} missing")]
    MissingParam(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub embed_dim: usize,
    pub n_region_queries: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_context_len: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    pub logit_scale_init: f64,
    pub logit_scale_max: f64,
    pub tiny_preset: bool,
}

impl Default for ModelConfig {
    /// ViT-B/16 image encoder, 6-layer query decoder with 10 region queries,
    /// 12-layer text transformer, 512-d joint space.
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            encoder_dim: 768,
            encoder_layers: 12,
            encoder_heads: 12,
            embed_dim: 512,
            n_region_queries: 10,
            decoder_layers: 6,
            decoder_heads: 12,
            text_dim: 512,
            text_layers: 12,
            text_heads: 8,
            text_context_len: 77,
            vocab_size: Tokenizer::bundled().vocab_size(),
            mlp_ratio: 4,
            logit_scale_init: (1.0f64 / 0.07).ln(),
            logit_scale_max: 100.0,
            tiny_preset: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: 32px images, 8px patches, 64/32 widths, 2 layers, 4 region queries.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            encoder_dim: 64,
            encoder_layers: 2,
            encoder_heads: 4,
            embed_dim: 32,
            n_region_queries: 4,
            decoder_layers: 2,
            decoder_heads: 4,
            text_dim: 64,
            text_layers: 2,
            text_heads: 4,
            tiny_preset: true,
            ..Self::default()
        }
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        for (name, d, h) in [
            ("encoder", self.encoder_dim, self.encoder_heads),
            ("decoder", self.encoder_dim, self.decoder_heads),
            ("text", self.text_dim, self.text_heads),
        ] {
            if h == 0 || d % h != 0 {
                return err(format!("{name} width {d} not divisible by {h} heads"));
            }
        }
        if self.n_region_queries == 0 {
            return err("n_region_queries must be at least 1".into());
        }
        if self.embed_dim == 0 || self.vocab_size < 2 || self.text_context_len < 2 {
            return err("embed_dim, vocab_size and text_context_len must be positive".into());
        }
        if !(self.logit_scale_max > 0.0) {
            return err("logit_scale_max must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Box head skipped.
    Eval,
}

/// What a text embedding was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    Caption,
    Description,
    ClassPrompt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding<T> {
    pub vector: Vec<T>,
    pub source: TextSource,
}

/// Per-image outputs with all embeddings unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs<T> {
    pub image_embed: Vec<T>,
    pub region_embeds: Vec<Vec<T>>,
    /// `None` in eval mode.
    pub pred_boxes: Option<Vec<NormBox<T>>>,
    pub raw_image_query: Vec<T>,
}

/// Graph handles for one image's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ImageVars {
    /// `1 x embed_dim`, unit rows.
    pub image_embed: Var,
    /// `n_q x embed_dim`, unit rows.
    pub region_embeds: Var,
    /// `n_q x 4` sigmoid outputs in `cx, cy, w, h` order.
    pub boxes: Option<Var>,
    /// `1 x encoder_dim` decoder output of the image query.
    pub raw_image_query: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutputs {
    /// `n_q x encoder_dim`
    pub regions: Var,
    /// `1 x encoder_dim`
    pub image: Var,
}

#[derive(Debug, Clone)]
struct VisionEncoder {
    patch_embed: Linear,
    pos: ParamId,
    ln_pre: LayerNorm,
    blocks: Vec<EncoderBlock>,
    ln_post: LayerNorm,
}

#[derive(Debug, Clone)]
struct QueryDecoder {
    queries: ParamId,
    blocks: Vec<DecoderBlock>,
    ln_out: LayerNorm,
}

#[derive(Debug, Clone)]
struct BoxHead {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct TextEncoder {
    token_embed: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    ln_final: LayerNorm,
    proj: Linear,
}

#[derive(Debug, Clone)]
pub struct GrainModel<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    vision: VisionEncoder,
    decoder: QueryDecoder,
    box_head: BoxHead,
    region_proj: Linear,
    image_proj: Linear,
    text: TextEncoder,
    logit_scale: ParamId,
}

impl<T: Scalar> GrainModel<T> {
    /// Fresh model; every parameter is drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut bld = Builder { store: &mut store, rng: &mut rng };
        let c = &config;
        let d = c.encoder_dim;
        let patch_dim = 3 * c.patch_size * c.patch_size;

        let vision = VisionEncoder {
            patch_embed: Linear::new(&mut bld, "visual.patch_embed", patch_dim, d, false, Init::Normal((patch_dim as f64).powf(-0.5))),
            pos: bld.param("visual.pos", c.num_patches(), d, Init::TruncNormal(0.02)),
            ln_pre: LayerNorm::new(&mut bld, "visual.ln_pre", d),
            blocks: (0..c.encoder_layers)
                .map(|i| EncoderBlock::new(&mut bld, &format!("visual.blocks.{i}"), d, c.encoder_heads, c.mlp_ratio, c.encoder_layers))
                .collect(),
            ln_post: LayerNorm::new(&mut bld, "visual.ln_post", d),
        };
        let decoder = QueryDecoder {
            queries: bld.param("decoder.queries", c.n_region_queries + 1, d, Init::TruncNormal(0.02)),
            blocks: (0..c.decoder_layers)
                .map(|i| DecoderBlock::new(&mut bld, &format!("decoder.blocks.{i}"), d, c.decoder_heads, c.mlp_ratio, c.decoder_layers))
                .collect(),
            ln_out: LayerNorm::new(&mut bld, "decoder.ln_out", d),
        };
        let std_d = (d as f64).powf(-0.5);
        let box_head = BoxHead {
            fc1: Linear::new(&mut bld, "heads.box.fc1", d, d, true, Init::Normal(std_d)),
            fc2: Linear::new(&mut bld, "heads.box.fc2", d, 4, true, Init::Normal(std_d)),
        };
        let region_proj = Linear::new(&mut bld, "heads.region_proj", d, c.embed_dim, false, Init::TruncNormal(0.02));
        let image_proj = Linear::new(&mut bld, "heads.image_proj", d, c.embed_dim, false, Init::TruncNormal(0.02));
        let t = c.text_dim;
        let text = TextEncoder {
            token_embed: bld.param("text.token_embed", c.vocab_size, t, Init::TruncNormal(0.02)),
            pos: bld.param("text.pos", c.text_context_len, t, Init::TruncNormal(0.02)),
            blocks: (0..c.text_layers)
                .map(|i| EncoderBlock::new(&mut bld, &format!("text.blocks.{i}"), t, c.text_heads, c.mlp_ratio, c.text_layers))
                .collect(),
            ln_final: LayerNorm::new(&mut bld, "text.ln_final", t),
            proj: Linear::new(&mut bld, "text.proj", t, c.embed_dim, false, Init::TruncNormal(0.02)),
        };
        let logit_scale = bld.param("logit_scale", 1, 1, Init::Const(c.logit_scale_init));
        Ok(Self { config, params: store, vision, decoder, box_head, region_proj, image_proj, text, logit_scale })
    }

    /// Rebuilds the architecture for `config` and installs `values` by name.
    pub fn from_named(config: ModelConfig, values: HashMap<String, Mat<T>>) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        let mut values = values;
        let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let v = values.remove(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            let id = model.params.id_of(&name).expect("own name");
            let slot = model.params.get_mut(id);
            if slot.shape() != v.shape() {
                return Err(ModelError::ParamShape { name, want: slot.shape(), got: v.shape() });
            }
            *slot = v;
        }
        if let Some(extra) = values.keys().next() {
            return Err(ModelError::Config(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn logit_scale_id(&self) -> ParamId {
        self.logit_scale
    }

    /// Effective contrastive temperature multiplier, `min(exp(s), max)`.
    pub fn logit_scale_value(&self) -> f64 {
        self.params.get(self.logit_scale).item().f64().exp().min(self.config.logit_scale_max)
    }

    /// `(image_size / patch_size)^2` tokens of width `encoder_dim`.
    pub fn encode_image_tokens(&self, s: &mut Session<'_, T>, img: &ImageTensor<T>) -> Result<Var, ModelError> {
        let c = &self.config;
        if img.height != c.image_size || img.width != c.image_size {
            return Err(ModelError::ImageShape { got_h: img.height, got_w: img.width, want: c.image_size });
        }
        let p = c.patch_size;
        let side = c.image_size / p;
        let mut patches = Mat::zeros(side * side, 3 * p * p);
        for gy in 0..side {
            for gx in 0..side {
                let row = patches.row_mut(gy * side + gx);
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..3 {
                            row[k] = img.at(gy * p + y, gx * p + x, ch);
                            k += 1;
                        }
                    }
                }
            }
        }
        let v = &self.vision;
        let x = s.graph.constant(patches);
        let x = v.patch_embed.forward(s, x);
        let pos = s.p(v.pos);
        let mut x = s.graph.add(x, pos);
        x = v.ln_pre.forward(s, x);
        for b in &v.blocks {
            x = b.forward(s, x, false);
        }
        Ok(v.ln_post.forward(s, x))
    }

    /// Runs the `n_q + 1` learnable queries against the encoder tokens.
    ///
    /// The decoder adds no positional information to `tokens`, so its output
    /// depends on the token set, not the token order.
    pub fn decode_queries(&self, s: &mut Session<'_, T>, tokens: Var) -> DecoderOutputs {
        let n_q = self.config.n_region_queries;
        let mut q = s.p(self.decoder.queries);
        for b in &self.decoder.blocks {
            q = b.forward(s, q, tokens);
        }
        let q = self.decoder.ln_out.forward(s, q);
        DecoderOutputs { regions: s.graph.slice_rows(q, 0, n_q), image: s.graph.slice_rows(q, n_q, 1) }
    }

    /// Shared two-layer MLP with sigmoid outputs, one box per region row.
    pub fn predict_boxes(&self, s: &mut Session<'_, T>, regions: Var) -> Var {
        let h = self.box_head.fc1.forward(s, regions);
        let h = s.graph.relu(h);
        let logits = self.box_head.fc2.forward(s, h);
        s.graph.sigmoid(logits)
    }

    pub fn project_regions(&self, s: &mut Session<'_, T>, regions: Var) -> Result<Var, ModelError> {
        let z = self.region_proj.forward(s, regions);
        Ok(s.graph.l2_normalize(z)?)
    }

    pub fn project_image(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var, ModelError> {
        let z = self.image_proj.forward(s, image);
        Ok(s.graph.l2_normalize(z)?)
    }

    /// Checks the sequence shape expected by [`encode_text`](Self::encode_text).
    pub fn validate_tokens(&self, ids: &[u32]) -> Result<(), ModelError> {
        let c = &self.config;
        if ids.len() > c.text_context_len {
            return Err(TokenizationError::Overflow { needed: ids.len(), limit: c.text_context_len }.into());
        }
        let end = (c.vocab_size - 1) as u32;
        if ids.last() != Some(&end) || ids.iter().filter(|&&t| t == end).count() != 1 {
            return Err(TokenizationError::MissingEnd.into());
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(ModelError::UnknownToken(bad));
        }
        Ok(())
    }

    /// Causal text transformer pooled at the end token, projected and normalized (`1 x embed_dim`).
    pub fn encode_text(&self, s: &mut Session<'_, T>, ids: &[u32]) -> Result<Var, ModelError> {
        self.validate_tokens(ids)?;
        let t = &self.text;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = s.p(t.token_embed);
        let x = s.graph.gather_rows(table, &idx);
        let pos = s.p(t.pos);
        let pos = s.graph.slice_rows(pos, 0, ids.len());
        let mut x = s.graph.add(x, pos);
        for b in &t.blocks {
            x = b.forward(s, x, true);
        }
        let x = t.ln_final.forward(s, x);
        let pooled = s.graph.slice_rows(x, ids.len() - 1, 1);
        let z = t.proj.forward(s, pooled);
        Ok(s.graph.l2_normalize(z)?)
    }

    /// `min(exp(logit_scale), logit_scale_max)` as a 1x1 graph value.
    pub fn logit_scale(&self, s: &mut Session<'_, T>) -> Var {
        let p = s.p(self.logit_scale);
        let e = s.graph.exp(p);
        s.graph.clamp(e, T::zero(), T::of(self.config.logit_scale_max))
    }

    pub fn forward_image(&self, s: &mut Session<'_, T>, img: &ImageTensor<T>, mode: Mode) -> Result<ImageVars, ModelError> {
        let tokens = self.encode_image_tokens(s, img)?;
        let dec = self.decode_queries(s, tokens);
        let boxes = match mode {
            Mode::Train => Some(self.predict_boxes(s, dec.regions)),
            Mode::Eval => None,
        };
        Ok(ImageVars {
            image_embed: self.project_image(s, dec.image)?,
            region_embeds: self.project_regions(s, dec.regions)?,
            boxes,
            raw_image_query: dec.image,
        })
    }

    /// Value-level image forward (no gradients).
    pub fn embed_image(&self, img: &ImageTensor<T>, mode: Mode) -> Result<ModelOutputs<T>, ModelError> {
        let mut s = Session::eval(&self.params);
        let v = self.forward_image(&mut s, img, mode)?;
        let g = &s.graph;
        Ok(ModelOutputs {
            image_embed: g.value(v.image_embed).data().to_vec(),
            region_embeds: (0..self.config.n_region_queries)
                .map(|r| g.value(v.region_embeds).row(r).to_vec())
                .collect(),
            pred_boxes: v.boxes.map(|b| {
                let m = g.value(b);
                (0..m.rows())
                    .map(|r| NormBox::new_unchecked(m.get(r, 0), m.get(r, 1), m.get(r, 2), m.get(r, 3)))
                    .collect()
            }),
            raw_image_query: g.value(v.raw_image_query).data().to_vec(),
        })
    }

    /// Value-level text forward (no gradients).
    pub fn embed_text(&self, ids: &TokenIds, source: TextSource) -> Result<TextEmbedding<T>, ModelError> {
        let mut s = Session::eval(&self.params);
        let v = self.encode_text(&mut s, &ids.ids)?;
        Ok(TextEmbedding { vector: s.graph.value(v).data().to_vec(), source })
    }

    /// Full forward over a batch: per-image outputs plus caption and description embeddings.
    pub fn forward(
        &self,
        images: &[ImageTensor<T>],
        captions: &[TokenIds],
        descriptions: &[Vec<TokenIds>],
        mode: Mode,
    ) -> Result<BatchOutputs<T>, ModelError> {
        let outputs = images.iter().map(|img| self.embed_image(img, mode)).collect::<Result<Vec<_>, _>>()?;
        let captions = captions
            .iter()
            .map(|c| self.embed_text(c, TextSource::Caption))
            .collect::<Result<Vec<_>, _>>()?;
        let descriptions = descriptions
            .iter()
            .map(|ds| ds.iter().map(|d| self.embed_text(d, TextSource::Description)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BatchOutputs { outputs, captions, descriptions })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutputs<T> {
    pub outputs: Vec<ModelOutputs<T>>,
    pub captions: Vec<TextEmbedding<T>>,
    pub descriptions: Vec<Vec<TextEmbedding<T>>>,
}
