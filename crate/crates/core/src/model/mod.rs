//! Conditioning pipeline and toy encoder/decoder.
//!
//! Per image and taxonomy:
//!
//! 1. frozen encoders give one `D`-vector per object and part name and a
//!    token grid of image features;
//! 2. every object and part embedding modulates the image features through
//!    its own FiLM head;
//! 3. each modulated grid passes through the shared self-attention decoder;
//!    the last block's attention per object and per part forms the
//!    [`AttentionStack`];
//! 4. object-specific part embeddings are projected from the concatenated
//!    object and part embeddings on both the text and the image side, then
//!    modulated once more;
//! 5. 1×1 readouts and fixed bilinear upsampling produce the mask logits.

mod encoder;
pub mod layers;
mod params;
mod upsample;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use encoder::{PatchEncoder, ToyTextEncoder};
pub use layers::{compose_objpart, DecoderBlock, Embedding, FilmHead, MaskHead, ProjHead};
pub use params::{Named, NamedMut, Params, Trainable};
pub use upsample::Upsampler;

use crate::attncontrol::{AttentionGrads, AttentionStack};
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;
use layers::BlockCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub token_h: usize,
    pub token_w: usize,
    pub embed_dim: usize,
}

impl ImageSpec {
    pub fn new(height: usize, width: usize, token_h: usize, token_w: usize, embed_dim: usize) -> Result<Self> {
        let spec = Self { height, width, token_h, token_w, embed_dim };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.token_h == 0 || self.token_w == 0 {
            return Err(Error::ShapeMismatch("token grid and embedding dimension must be positive".into()));
        }
        if self.height % self.token_h != 0 || self.width % self.token_w != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} image is not an integer multiple of the {}x{} token grid",
                self.height, self.width, self.token_h, self.token_w
            )));
        }
        Ok(())
    }

    pub fn patch_h(&self) -> usize {
        self.height / self.token_h
    }

    pub fn patch_w(&self) -> usize {
        self.width / self.token_w
    }

    pub fn num_tokens(&self) -> usize {
        self.token_h * self.token_w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImageSpec,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    /// Seeds the frozen encoders.
    pub encoder_seed: u64,
    /// Seeds the trainable initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageSpec { height: 64, width: 64, token_h: 16, token_w: 16, embed_dim: 16 },
            hidden_dim: 32,
            num_blocks: 2,
            encoder_seed: 7,
            init_seed: 0,
        }
    }
}

/// Logit channel order: object-specific parts, their uncategory channel,
/// objects, their uncategory channel, generalized parts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelLayout {
    pub pairs: usize,
    pub objects: usize,
    pub parts: usize,
}

impl ChannelLayout {
    pub fn for_taxonomy(t: &Taxonomy) -> Self {
        Self { pairs: t.num_pairs(), objects: t.num_objects(), parts: t.num_parts() }
    }

    pub fn total(&self) -> usize {
        self.pairs + 1 + self.objects + 1 + self.parts
    }

    pub fn pair(&self, k: usize) -> usize {
        k
    }

    pub fn pair_uncategory(&self) -> usize {
        self.pairs
    }

    pub fn object(&self, o: usize) -> usize {
        self.pairs + 1 + o
    }

    pub fn object_uncategory(&self) -> usize {
        self.pairs + 1 + self.objects
    }

    pub fn part(&self, p: usize) -> usize {
        self.pairs + 2 + self.objects + p
    }
}

/// Every intermediate embedding of the pipeline for one image and one
/// category set. Token grids are `(N, D)`.
#[derive(Clone, Debug)]
pub struct EmbeddingBundle {
    pub text_obj: Array2<f64>,
    pub text_part: Array2<f64>,
    pub text_objpart: Array2<f64>,
    pub img_feat: Array2<f64>,
    pub img_obj: Vec<Array2<f64>>,
    pub img_part: Vec<Array2<f64>>,
    /// Decoder outputs for the object and part grids.
    pub dec_obj: Vec<Array2<f64>>,
    pub dec_part: Vec<Array2<f64>>,
    pub img_objpart: Vec<Array2<f64>>,
    pub final_objpart: Vec<Array2<f64>>,
    /// Decoder outputs for the two uncategory channels.
    pub dec_uncat_pair: Array2<f64>,
    pub dec_uncat_obj: Array2<f64>,
    pub attention: AttentionStack,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub layout: ChannelLayout,
    /// `(channels, H, W)`.
    pub mask_logits: Array3<f64>,
    pub attention: AttentionStack,
}

/// Forward activations needed by [`PartSegModel::backward`].
#[derive(Clone, Debug)]
pub struct Trace {
    pub bundle: EmbeddingBundle,
    pairs: Vec<(usize, usize)>,
    obj_caches: Vec<Vec<BlockCache>>,
    part_caches: Vec<Vec<BlockCache>>,
    uncat_pair_caches: Vec<BlockCache>,
    uncat_obj_caches: Vec<BlockCache>,
}

impl Trace {
    /// Smallest distance of any decoder ReLU pre-activation to zero.
    pub fn relu_margin(&self) -> f64 {
        self.obj_caches
            .iter()
            .chain(&self.part_caches)
            .flatten()
            .chain(&self.uncat_pair_caches)
            .chain(&self.uncat_obj_caches)
            .fold(f64::INFINITY, |m, c| m.min(c.relu_margin()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoders {
    pub text: ToyTextEncoder,
    pub image: PatchEncoder,
}

impl FrozenEncoders {
    /// SHA-256 over every frozen array and the text-encoder salt.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.text.dim.to_le_bytes());
        h.update(self.text.salt.to_le_bytes());
        for v in self.image.weight.iter().chain(self.image.bias.iter()) {
            h.update(v.to_le_bytes());
        }
        hex_digest(h)
    }
}

pub fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct PartSegModel {
    pub config: ModelConfig,
    pub frozen: FrozenEncoders,
    pub params: Trainable,
    upsampler: Upsampler,
}

impl PartSegModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.image.validate()?;
        let spec = config.image;
        let frozen = FrozenEncoders {
            text: ToyTextEncoder::new(spec.embed_dim, config.encoder_seed),
            image: PatchEncoder::init(spec, config.encoder_seed),
        };
        let params = Trainable::init(spec.embed_dim, config.hidden_dim, config.num_blocks, config.init_seed);
        Ok(Self::from_parts(config, frozen, params))
    }

    pub fn from_parts(config: ModelConfig, frozen: FrozenEncoders, params: Trainable) -> Self {
        let s = config.image;
        let upsampler = Upsampler::new(s.token_h, s.token_w, s.height, s.width);
        Self { config, frozen, params, upsampler }
    }

    pub fn spec(&self) -> ImageSpec {
        self.config.image
    }

    pub fn encode_text<S: AsRef<str>>(&self, names: &[S]) -> Result<Array2<f64>> {
        self.frozen.text.encode(names)
    }

    pub fn encode_image(&self, image: &Array3<f64>) -> Result<Array2<f64>> {
        self.frozen.image.encode(image)
    }

    fn run_decoder(&self, x: Array2<f64>) -> (Array2<f64>, Vec<BlockCache>) {
        let mut caches = Vec::with_capacity(self.params.blocks.len());
        let mut h = x;
        for block in &self.params.blocks {
            let (y, cache) = block.forward(h.view());
            caches.push(cache);
            h = y;
        }
        (h, caches)
    }

    fn decoder_backward(
        &self,
        caches: &[BlockCache],
        grad_out: Array2<f64>,
        grad_attention: Option<ArrayView2<f64>>,
        grads: &mut Trainable,
    ) -> Array2<f64> {
        let last = caches.len() - 1;
        let mut g = grad_out;
        for (i, (block, cache)) in self.params.blocks.iter().zip(caches).enumerate().rev() {
            let extra = if i == last { grad_attention } else { None };
            let (gb, dx) = block.backward(cache, g.view(), extra);
            grads.blocks[i].add_scaled(&gb, 1.0);
            g = dx;
        }
        g
    }

    fn last_attention(caches: &[BlockCache]) -> Array2<f64> {
        caches.last().expect("decoder has at least one block").attention.clone()
    }

    /// Runs the embedding pipeline on precomputed image features.
    pub fn embed_features(&self, img_feat: &Array2<f64>, taxonomy: &Taxonomy) -> Result<Trace> {
        let spec = self.spec();
        if img_feat.dim() != (spec.num_tokens(), spec.embed_dim) {
            return Err(Error::ShapeMismatch(format!(
                "image features {:?} do not match token grid {}x{}x{}",
                img_feat.dim(),
                spec.token_h,
                spec.token_w,
                spec.embed_dim
            )));
        }
        if self.params.blocks.is_empty() {
            return Err(Error::IncompleteBundle("decoder has no blocks".into()));
        }
        let p = &self.params;
        let text_obj = self.encode_text(taxonomy.objects())?;
        let text_part = self.encode_text(taxonomy.parts())?;

        let mut img_obj = Vec::new();
        let mut dec_obj = Vec::new();
        let mut obj_caches = Vec::new();
        for t in text_obj.rows() {
            let x = p.film_obj.forward(img_feat.view(), t)?;
            let (d, c) = self.run_decoder(x.clone());
            img_obj.push(x);
            dec_obj.push(d);
            obj_caches.push(c);
        }
        let mut img_part = Vec::new();
        let mut dec_part = Vec::new();
        let mut part_caches = Vec::new();
        for t in text_part.rows() {
            let x = p.film_part.forward(img_feat.view(), t)?;
            let (d, c) = self.run_decoder(x.clone());
            img_part.push(x);
            dec_part.push(d);
            part_caches.push(c);
        }
        let (dec_uncat_obj, uncat_obj_caches) =
            self.run_decoder(p.film_obj.forward(img_feat.view(), p.uncat_obj.view())?);
        let (dec_uncat_pair, uncat_pair_caches) =
            self.run_decoder(p.film_objpart.forward(img_feat.view(), p.uncat_pair.view())?);

        let pairs = taxonomy.pairs().to_vec();
        let mut text_objpart = Array2::zeros((pairs.len(), spec.embed_dim));
        let mut img_objpart = Vec::with_capacity(pairs.len());
        let mut final_objpart = Vec::with_capacity(pairs.len());
        for (k, &(o, pi)) in pairs.iter().enumerate() {
            let t = p.proj_text.forward(
                text_obj.row(o).insert_axis(Axis(0)),
                text_part.row(pi).insert_axis(Axis(0)),
            )?;
            text_objpart.row_mut(k).assign(&t.row(0));
            let img = p.proj_img.forward(dec_obj[o].view(), dec_part[pi].view())?;
            final_objpart.push(p.film_objpart.forward(img.view(), t.row(0))?);
            img_objpart.push(img);
        }

        let attention = AttentionStack {
            token_h: spec.token_h,
            token_w: spec.token_w,
            objects: obj_caches.iter().map(|c| Self::last_attention(c)).collect(),
            parts: part_caches.iter().map(|c| Self::last_attention(c)).collect(),
        };
        let bundle = EmbeddingBundle {
            text_obj,
            text_part,
            text_objpart,
            img_feat: img_feat.clone(),
            img_obj,
            img_part,
            dec_obj,
            dec_part,
            img_objpart,
            final_objpart,
            dec_uncat_pair,
            dec_uncat_obj,
            attention,
        };
        Ok(Trace { bundle, pairs, obj_caches, part_caches, uncat_pair_caches, uncat_obj_caches })
    }

    pub fn embed(&self, image: &Array3<f64>, taxonomy: &Taxonomy) -> Result<EmbeddingBundle> {
        let feat = self.encode_image(image)?;
        Ok(self.embed_features(&feat, taxonomy)?.bundle)
    }

    /// Mask logits at pixel resolution, plus the attention stack.
    pub fn decode(&self, bundle: &EmbeddingBundle) -> Result<DecoderOutput> {
        let spec = self.spec();
        let layout = ChannelLayout {
            pairs: bundle.final_objpart.len(),
            objects: bundle.dec_obj.len(),
            parts: bundle.dec_part.len(),
        };
        if bundle.img_objpart.len() != layout.pairs
            || bundle.text_objpart.nrows() != layout.pairs
            || bundle.text_obj.nrows() != layout.objects
            || bundle.text_part.nrows() != layout.parts
            || bundle.attention.objects.len() != layout.objects
            || bundle.attention.parts.len() != layout.parts
        {
            return Err(Error::IncompleteBundle("per-category entries disagree in count".into()));
        }
        if layout.pairs == 0 || layout.objects == 0 || layout.parts == 0 {
            return Err(Error::IncompleteBundle("no categories".into()));
        }
        let p = &self.params;
        let mut token_logits = Array2::zeros((layout.total(), spec.num_tokens()));
        for (k, f) in bundle.final_objpart.iter().enumerate() {
            token_logits.row_mut(layout.pair(k)).assign(&p.head_pair.forward(f.view()));
        }
        token_logits
            .row_mut(layout.pair_uncategory())
            .assign(&p.head_pair.forward(bundle.dec_uncat_pair.view()));
        for (o, f) in bundle.dec_obj.iter().enumerate() {
            token_logits.row_mut(layout.object(o)).assign(&p.head_obj.forward(f.view()));
        }
        token_logits
            .row_mut(layout.object_uncategory())
            .assign(&p.head_obj.forward(bundle.dec_uncat_obj.view()));
        for (pi, f) in bundle.dec_part.iter().enumerate() {
            token_logits.row_mut(layout.part(pi)).assign(&p.head_part.forward(f.view()));
        }

        let mut mask_logits = Array3::zeros((layout.total(), spec.height, spec.width));
        for (c, row) in token_logits.rows().into_iter().enumerate() {
            let grid = row.into_shape_with_order((spec.token_h, spec.token_w)).expect("token row reshapes to grid");
            mask_logits.slice_mut(s![c, .., ..]).assign(&self.upsampler.forward(grid));
        }
        Ok(DecoderOutput { layout, mask_logits, attention: bundle.attention.clone() })
    }

    pub fn forward_features(&self, img_feat: &Array2<f64>, taxonomy: &Taxonomy) -> Result<(DecoderOutput, Trace)> {
        let trace = self.embed_features(img_feat, taxonomy)?;
        let out = self.decode(&trace.bundle)?;
        Ok((out, trace))
    }

    pub fn forward(&self, image: &Array3<f64>, taxonomy: &Taxonomy) -> Result<DecoderOutput> {
        let feat = self.encode_image(image)?;
        Ok(self.forward_features(&feat, taxonomy)?.0)
    }

    /// Gradients of a scalar loss with respect to every trainable parameter,
    /// given its gradient on the mask logits and, optionally, on the
    /// attention stack.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_logits: &Array3<f64>,
        grad_attention: Option<&AttentionGrads>,
    ) -> Trainable {
        let spec = self.spec();
        let b = &trace.bundle;
        let p = &self.params;
        let layout = ChannelLayout { pairs: trace.pairs.len(), objects: b.dec_obj.len(), parts: b.dec_part.len() };
        let mut grads = p.zeros_like();

        let token_grad = |c: usize| -> Array1<f64> {
            let g = self.upsampler.backward(grad_logits.slice(s![c, .., ..]));
            g.into_shape_with_order(spec.num_tokens()).expect("grid flattens to tokens")
        };

        let mut d_dec_obj: Vec<Array2<f64>> = b.dec_obj.iter().map(|d| Array2::zeros(d.raw_dim())).collect();
        let mut d_dec_part: Vec<Array2<f64>> = b.dec_part.iter().map(|d| Array2::zeros(d.raw_dim())).collect();

        for (k, &(o, pi)) in trace.pairs.iter().enumerate() {
            let g = token_grad(layout.pair(k));
            let (gh, d_final) = p.head_pair.backward(b.final_objpart[k].view(), g.view());
            grads.head_pair.add_scaled(&gh, 1.0);
            let film = p.film_objpart.backward(b.img_objpart[k].view(), b.text_objpart.row(k), d_final.view());
            grads.film_objpart.add_scaled(&film.head, 1.0);
            let proj = p.proj_img.backward(b.dec_obj[o].view(), b.dec_part[pi].view(), film.feat.view());
            grads.proj_img.add_scaled(&proj.head, 1.0);
            d_dec_obj[o] += &proj.obj;
            d_dec_part[pi] += &proj.part;
            let text = p.proj_text.backward(
                b.text_obj.row(o).insert_axis(Axis(0)),
                b.text_part.row(pi).insert_axis(Axis(0)),
                film.text.view().insert_axis(Axis(0)),
            );
            grads.proj_text.add_scaled(&text.head, 1.0);
        }

        // pair uncategory channel
        let g = token_grad(layout.pair_uncategory());
        let (gh, d_dec) = p.head_pair.backward(b.dec_uncat_pair.view(), g.view());
        grads.head_pair.add_scaled(&gh, 1.0);
        let dx = self.decoder_backward(&trace.uncat_pair_caches, d_dec, None, &mut grads);
        let film = p.film_objpart.backward(b.img_feat.view(), p.uncat_pair.view(), dx.view());
        grads.film_objpart.add_scaled(&film.head, 1.0);
        grads.uncat_pair += &film.text;

        // object channels
        for o in 0..layout.objects {
            let g = token_grad(layout.object(o));
            let (gh, d_dec) = p.head_obj.backward(b.dec_obj[o].view(), g.view());
            grads.head_obj.add_scaled(&gh, 1.0);
            let total = &d_dec_obj[o] + &d_dec;
            let d_attn = grad_attention.map(|a| a.objects[o].view());
            let dx = self.decoder_backward(&trace.obj_caches[o], total, d_attn, &mut grads);
            let film = p.film_obj.backward(b.img_feat.view(), b.text_obj.row(o), dx.view());
            grads.film_obj.add_scaled(&film.head, 1.0);
        }
        let g = token_grad(layout.object_uncategory());
        let (gh, d_dec) = p.head_obj.backward(b.dec_uncat_obj.view(), g.view());
        grads.head_obj.add_scaled(&gh, 1.0);
        let dx = self.decoder_backward(&trace.uncat_obj_caches, d_dec, None, &mut grads);
        let film = p.film_obj.backward(b.img_feat.view(), p.uncat_obj.view(), dx.view());
        grads.film_obj.add_scaled(&film.head, 1.0);
        grads.uncat_obj += &film.text;

        // part channels
        for pi in 0..layout.parts {
            let g = token_grad(layout.part(pi));
            let (gh, d_dec) = p.head_part.backward(b.dec_part[pi].view(), g.view());
            grads.head_part.add_scaled(&gh, 1.0);
            let total = &d_dec_part[pi] + &d_dec;
            let d_attn = grad_attention.map(|a| a.parts[pi].view());
            let dx = self.decoder_backward(&trace.part_caches[pi], total, d_attn, &mut grads);
            let film = p.film_part.backward(b.img_feat.view(), b.text_part.row(pi), dx.view());
            grads.film_part.add_scaled(&film.head, 1.0);
        }
        grads
    }
}
