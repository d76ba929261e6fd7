//! Configurable Vision Transformer encoder.
//!
//! The encoder embeds non-overlapping image patches, prepends a learnable
//! class token, adds learnable positional embeddings, and applies a stack of
//! transformer blocks. Each block output is recorded so downstream alignment
//! can tap intermediate layers.
//!
//! Normalization placement: blocks compute `LN(MHSA(z) + z)` then
//! `LN(FFN(z') + z')`, i.e. layer norm after the residual add. This follows
//! the block equations rather than the common pre-norm variant; the two
//! disagree in some descriptions of this architecture and the post-add form
//! is the one implemented and tested here.

use ndarray::{Array4, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{trunc_normal, Arr, BoundParams, ParamStore, Tx};

/// Layer-norm epsilon used by every normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// Structural hyperparameters of one encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hidden dimension D.
    pub hidden_dim: usize,
    /// Number of transformer blocks L.
    pub num_layers: usize,
    /// Patch edge length in pixels.
    pub patch_size: usize,
    /// Attention heads per block.
    pub num_heads: usize,
    /// Input image edge length in pixels (images are square).
    pub image_size: usize,
    /// Hidden dimension of the feed-forward sublayer.
    pub ffn_dim: usize,
    /// Number of leading blocks excluded from gradient updates (the patch,
    /// class-token, and positional embeddings freeze along with block 0).
    pub frozen_prefix: usize,
}

impl EncoderConfig {
    /// Teacher-sized encoder: D=512, L=12, P=16, half the blocks frozen.
    pub fn teacher() -> Self {
        Self::with_conventions(512, 12, 16, 224)
    }

    /// Student-sized encoder: D=256, L=6, P=16, half the blocks frozen.
    pub fn student() -> Self {
        Self::with_conventions(256, 6, 16, 224)
    }

    /// Fills head count (D/64, at least 1) and FFN width (4D) from the
    /// hidden dimension, and freezes the first floor(L/2) blocks.
    pub fn with_conventions(hidden_dim: usize, num_layers: usize, patch_size: usize, image_size: usize) -> Self {
        Self {
            hidden_dim,
            num_layers,
            patch_size,
            num_heads: (hidden_dim / 64).max(1),
            image_size,
            ffn_dim: 4 * hidden_dim,
            frozen_prefix: num_layers / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0
            || self.num_layers == 0
            || self.patch_size == 0
            || self.num_heads == 0
            || self.image_size == 0
            || self.ffn_dim == 0
        {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.frozen_prefix > self.num_layers {
            return Err(Error::config(format!(
                "frozen prefix {} exceeds layer count {}",
                self.frozen_prefix, self.num_layers
            )));
        }
        Ok(())
    }

    /// Number of patches N = (image_size / patch_size)^2.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Token sequence length N + 1 (class token at position 0).
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    /// Flattened patch dimension P*P*3.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Per-layer token sequences plus the final class token.
pub struct EncoderOutput {
    /// One `[batch, N+1, D]` node per block, in depth order.
    pub per_layer: Vec<Tx>,
    /// `[batch, D]` class token of the last block.
    pub final_class_token: Tx,
}

/// Rearrange `[B, 3, H, W]` images into flattened patch rows `[B, N, P*P*3]`.
///
/// Patches are ordered row-major over the grid; within a patch, values are
/// ordered channel, then row, then column. This layout is part of the
/// checkpoint contract since the embedding matrix is trained against it.
pub fn patchify(images: &Array4<f64>, patch_size: usize) -> Result<Arr> {
    let (b, c, h, w) = images.dim();
    if c != 3 {
        return Err(Error::config(format!("expected 3 channels, got {c}")));
    }
    if h != w {
        return Err(Error::config(format!("expected square images, got {h}x{w}")));
    }
    if h % patch_size != 0 {
        return Err(Error::config(format!(
            "image size {h} not divisible by patch size {patch_size}"
        )));
    }
    let side = h / patch_size;
    let n = side * side;
    let pd = patch_size * patch_size * c;
    let mut out = Arr::zeros(IxDyn(&[b, n, pd]));
    for bi in 0..b {
        for gy in 0..side {
            for gx in 0..side {
                let p = gy * side + gx;
                let mut k = 0;
                for ci in 0..c {
                    for py in 0..patch_size {
                        for px in 0..patch_size {
                            out[[bi, p, k]] =
                                images[[bi, ci, gy * patch_size + py, gx * patch_size + px]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A ViT encoder bound to a parameter namespace.
///
/// Parameters live in a [`ParamStore`] under `<prefix>.embed.*` and
/// `<prefix>.block<i>.*`; the struct itself holds only the config and name.
pub struct VitEncoder {
    pub config: EncoderConfig,
    prefix: String,
}

impl VitEncoder {
    pub fn new(config: EncoderConfig, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, prefix: prefix.into() })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    /// Create all parameters with truncated-normal(0.02) weights, zero
    /// biases, and identity layer norms, then apply the configured freeze.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.config.hidden_dim;
        let f = self.config.ffn_dim;
        let t = self.config.seq_len();
        let pd = self.config.patch_dim();
        let std = 0.02;

        store.insert(self.name("embed.weight"), trunc_normal(&[pd, d], std, rng));
        store.insert(self.name("embed.class_token"), trunc_normal(&[d], std, rng));
        store.insert(self.name("embed.pos"), trunc_normal(&[t, d], std, rng));

        for i in 0..self.config.num_layers {
            let b = |s: &str| self.name(&format!("block{i}.{s}"));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                store.insert(b(w), trunc_normal(&[d, d], std, rng));
            }
            for bias in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
                store.insert(b(bias), Arr::zeros(IxDyn(&[d])));
            }
            store.insert(b("ln1.gamma"), Arr::ones(IxDyn(&[d])));
            store.insert(b("ln1.beta"), Arr::zeros(IxDyn(&[d])));
            store.insert(b("ffn.w1"), trunc_normal(&[d, f], std, rng));
            store.insert(b("ffn.b1"), Arr::zeros(IxDyn(&[f])));
            store.insert(b("ffn.w2"), trunc_normal(&[f, d], std, rng));
            store.insert(b("ffn.b2"), Arr::zeros(IxDyn(&[d])));
            store.insert(b("ln2.gamma"), Arr::ones(IxDyn(&[d])));
            store.insert(b("ln2.beta"), Arr::zeros(IxDyn(&[d])));
        }
        self.set_frozen_prefix(store, self.config.frozen_prefix)
            .expect("frozen_prefix validated by config");
    }

    /// Freeze the first `k` blocks. The patch/class/positional embeddings
    /// freeze whenever `k > 0`, since they feed every frozen block.
    pub fn set_frozen_prefix(&self, store: &mut ParamStore, k: usize) -> Result<()> {
        if k > self.config.num_layers {
            return Err(Error::config(format!(
                "frozen prefix {k} exceeds layer count {}",
                self.config.num_layers
            )));
        }
        let embed = self.name("embed.");
        store.set_frozen_where(false, |n| n.starts_with(&format!("{}.", self.prefix)));
        if k > 0 {
            store.set_frozen_where(true, |n| n.starts_with(&embed));
        }
        for i in 0..k {
            let block = self.name(&format!("block{i}."));
            store.set_frozen_where(true, |n| n.starts_with(&block));
        }
        Ok(())
    }

    /// Patch-embed pre-extracted patches `[B, N, P*P*3]` into tokens
    /// `[B, N+1, D]` with the class token prepended and positions added.
    pub fn embed(&self, bound: &BoundParams, patches: Tx) -> Tx {
        let g = bound.graph();
        let shape = g.shape(patches);
        let batch = shape[0];
        let d = self.config.hidden_dim;
        let projected = g.matmul(patches, bound.get(&self.name("embed.weight")));
        let cls = g.reshape(bound.get(&self.name("embed.class_token")), &[1, 1, d]);
        let cls = g.broadcast_to(cls, &[batch, 1, d]);
        let tokens = g.concat(&[cls, projected], 1);
        g.add(tokens, bound.get(&self.name("embed.pos")))
    }

    /// One transformer block: post-add layer normalization around MHSA and FFN.
    pub fn block(&self, bound: &BoundParams, index: usize, tokens: Tx) -> Tx {
        let g = bound.graph();
        let p = |s: &str| bound.get(&self.name(&format!("block{index}.{s}")));
        let shape = g.shape(tokens);
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let heads = self.config.num_heads;
        let dh = d / heads;

        let split = |x: Tx| {
            let x = g.reshape(x, &[b, t, heads, dh]);
            g.permute(x, &[0, 2, 1, 3])
        };
        let q = split(g.add(g.matmul(tokens, p("attn.wq")), p("attn.bq")));
        let k = split(g.add(g.matmul(tokens, p("attn.wk")), p("attn.bk")));
        let v = split(g.add(g.matmul(tokens, p("attn.wv")), p("attn.bv")));

        let scores = g.scale(g.batch_matmul(q, g.transpose_last2(k)), 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_last(scores);
        let ctx = g.batch_matmul(attn, v);
        let ctx = g.reshape(g.permute(ctx, &[0, 2, 1, 3]), &[b, t, d]);
        let mhsa = g.add(g.matmul(ctx, p("attn.wo")), p("attn.bo"));

        let z = g.layer_norm(g.add(mhsa, tokens), p("ln1.gamma"), p("ln1.beta"), LN_EPS);

        let f = g.add(g.matmul(z, p("ffn.w1")), p("ffn.b1"));
        let f = g.gelu(f);
        let f = g.add(g.matmul(f, p("ffn.w2")), p("ffn.b2"));
        g.layer_norm(g.add(f, z), p("ln2.gamma"), p("ln2.beta"), LN_EPS)
    }

    /// Full forward pass over flattened patches, recording each block output.
    pub fn forward(&self, bound: &BoundParams, patches: Tx) -> EncoderOutput {
        let g = bound.graph();
        let mut tokens = self.embed(bound, patches);
        let mut per_layer = Vec::with_capacity(self.config.num_layers);
        for i in 0..self.config.num_layers {
            tokens = self.block(bound, i, tokens);
            per_layer.push(tokens);
        }
        let shape = g.shape(tokens);
        let cls = g.narrow(tokens, 1, 0, 1);
        let final_class_token = g.reshape(cls, &[shape[0], shape[2]]);
        EncoderOutput { per_layer, final_class_token }
    }

    /// Patchify raw images and run [`Self::forward`].
    pub fn encode(&self, bound: &BoundParams, images: &Array4<f64>) -> Result<EncoderOutput> {
        let (_, _, h, w) = images.dim();
        if h != self.config.image_size || w != self.config.image_size {
            return Err(Error::config(format!(
                "images are {h}x{w} but encoder expects {}",
                self.config.image_size
            )));
        }
        let patches = patchify(images, self.config.patch_size)?;
        let tx = bound.graph().constant(patches);
        Ok(self.forward(bound, tx))
    }
}
