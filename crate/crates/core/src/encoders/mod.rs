//! Frozen surrogate dual encoder.
//!
//! The vision tower is a pre-norm ViT whose sequence is laid out as
//! `[CLS, deep prompts, diversity prompts, patches]`. Deep prompts follow the
//! replacement rule: at the input of every layer the deep slots are
//! overwritten with that layer's own learnable tokens. The text tower embeds
//! hash-bucketed word tokens and reads out the last token.

mod model;
mod weights;

use serde::{Deserialize, Serialize};

pub use model::{encode_text, encode_text_batch, encode_visual, BoundWeights, VisualBatch};
pub use weights::{read_weight_file, tensor_layout, write_weight_file, EncoderWeights};

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_hash_buckets: usize,
    pub max_text_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 8,
            image_size: 32,
            vocab_hash_buckets: 4096,
            max_text_len: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            errs.push(format!(
                "encoder.embed_dim ({}) must be a positive multiple of encoder.heads ({})",
                self.embed_dim, self.heads
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            errs.push(format!(
                "encoder.image_size ({}) must be a positive multiple of encoder.patch_size ({})",
                self.image_size, self.patch_size
            ));
        }
        if self.layers == 0 {
            errs.push("encoder.layers must be >= 1".into());
        }
        if self.mlp_ratio == 0 {
            errs.push("encoder.mlp_ratio must be >= 1".into());
        }
        if self.vocab_hash_buckets == 0 || self.max_text_len == 0 {
            errs.push("encoder.vocab_hash_buckets and encoder.max_text_len must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Row-major `height × width × channels` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!("{}x{}x{} needs {} values, got {}", height, width, channels, height * width * channels, data.len()),
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Layout of one vision token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub deep: usize,
    pub diversity: usize,
    pub patches: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        1 + self.deep + self.diversity + self.patches
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn deep_range(&self) -> std::ops::Range<usize> {
        1..1 + self.deep
    }

    pub fn diversity_range(&self) -> std::ops::Range<usize> {
        1 + self.deep..1 + self.deep + self.diversity
    }

    pub fn patch_range(&self) -> std::ops::Range<usize> {
        1 + self.deep + self.diversity..self.len()
    }
}

/// Unfolds the image into non-overlapping patches, one flattened
/// `(py, px, channel)` row per patch in raster order.
pub fn extract_patches(image: &Image, config: &EncoderConfig) -> Result<Tensor> {
    if image.height != config.image_size || image.width != config.image_size || image.channels != CHANNELS {
        return Err(Error::shape(
            "tokenize_image",
            format!(
                "image is {}x{}x{}, encoder expects {}x{}x{}",
                image.height, image.width, image.channels, config.image_size, config.image_size, CHANNELS
            ),
        ));
    }
    let ps = config.patch_size;
    let grid = config.grid();
    let mut data = Vec::with_capacity(config.patches() * config.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..ps {
                for px in 0..ps {
                    for c in 0..CHANNELS {
                        data.push(image.at(gy * ps + py, gx * ps + px, c) as f64);
                    }
                }
            }
        }
    }
    Tensor::matrix(config.patches(), config.patch_dim(), data)
}

/// Patch embeddings: linear patch projection plus position embedding.
pub fn tokenize_image(image: &Image, weights: &EncoderWeights) -> Result<Tensor> {
    let config = weights.config();
    let patches = extract_patches(image, config)?;
    let mut tokens = patches.matmul(weights.get("visual.patch_proj.weight")?)?;
    let bias = weights.get("visual.patch_proj.bias")?;
    let pos = weights.get("visual.pos_embed")?;
    for r in 0..tokens.rows() {
        let prow = pos.row_slice(r);
        for (c, v) in tokens.row_slice_mut(r).iter_mut().enumerate() {
            *v += bias.data()[c] + prow[c];
        }
    }
    Ok(tokens)
}

/// Lowercases, splits on whitespace and peels sentence punctuation off into
/// its own tokens.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if matches!(ch, '.' | ',' | ';' | ':' | '!' | '?') {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn hash_bucket(token: &str, buckets: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % buckets as u64) as usize
}

pub fn text_token_ids(text: &str, config: &EncoderConfig) -> Result<Vec<usize>> {
    let words = tokenize_words(text);
    if words.is_empty() {
        return Err(Error::invalid("cannot encode empty text"));
    }
    if words.len() > config.max_text_len {
        return Err(Error::invalid(format!(
            "text has {} tokens, max_text_len is {}: {:?}",
            words.len(),
            config.max_text_len,
            text
        )));
    }
    Ok(words
        .iter()
        .map(|w| hash_bucket(w, config.vocab_hash_buckets))
        .collect())
}
