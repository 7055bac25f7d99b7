//! Tiny vision transformer: patch embedding, pre-norm encoder, a small
//! reconstruction decoder over the patch tokens, and a linear class head.
//!
//! A learnable CLS token is prepended before the encoder. Its final state is
//! `z_cls`; the remaining tokens are `z_patches`, which is what the SOM sees
//! (flattened per image).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{kernels, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-6;

/// Standard deviation of the positional-embedding and CLS-token init.
const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Clustering,
    Classification,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clustering" => Ok(Task::Clustering),
            "classification" => Ok(Task::Classification),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Clustering => "clustering",
            Task::Classification => "classification",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    pub num_classes: Option<usize>,
    pub task: Task,
}

impl VitConfig {
    /// Clustering backbone: embed 16, MLP 64, 4 encoder / 2 decoder blocks,
    /// 2 heads, 4-pixel patches.
    pub fn clustering(image_size: usize, channels: usize) -> Self {
        VitConfig {
            image_size,
            patch_size: 4,
            channels,
            embed_dim: 16,
            mlp_dim: 64,
            encoder_depth: 4,
            decoder_depth: 2,
            num_heads: 2,
            num_classes: None,
            task: Task::Clustering,
        }
    }

    /// Classification backbone: embed 192, MLP 768, 12 encoder blocks,
    /// 3 heads, 4-pixel patches. The decoder depth is recorded but no decoder
    /// is built for this task.
    pub fn classification(image_size: usize, channels: usize, num_classes: usize) -> Self {
        VitConfig {
            image_size,
            patch_size: 4,
            channels,
            embed_dim: 192,
            mlp_dim: 768,
            encoder_depth: 12,
            decoder_depth: 2,
            num_heads: 3,
            num_classes: Some(num_classes),
            task: Task::Classification,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.mlp_dim == 0 {
            return fail("channels, embed_dim and mlp_dim must be positive".into());
        }
        if self.task == Task::Classification && !matches!(self.num_classes, Some(c) if c >= 2) {
            return fail("classification requires num_classes >= 2".into());
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Length of `flatten(z_patches)` for one image.
    pub fn latent_dim(&self) -> usize {
        self.num_patches() * self.embed_dim
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

/// Splits a `C×H×W` image into row-major `ps×ps` patches, each flattened in
/// `(channel, row, col)` order: `[num_patches × C·ps²]`.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("patchify expects C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Config(format!(
            "{h}x{w} image is not divisible into {patch_size}-pixel patches"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let shape5 = [c, gh, patch_size, gw, patch_size];
    let (data, _) = kernels::permute(image.data(), &shape5, &[1, 3, 0, 2, 4]);
    Tensor::new(&[gh * gw, c * patch_size * patch_size], data)
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        Linear {
            w: store.add(format!("{name}.w"), Tensor::new(&[fan_in, fan_out], w).unwrap(), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), false),
        }
    }

    /// `x: [rows × in] → [rows × out]`.
    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add_broadcast(y, p[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias], LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &VitConfig) -> Self {
        let d = cfg.embed_dim;
        Block {
            norm1: Norm::new(store, &format!("{name}.norm1"), d),
            qkv: Linear::new(store, rng, &format!("{name}.attn.qkv"), d, 3 * d),
            proj: Linear::new(store, rng, &format!("{name}.attn.proj"), d, d),
            norm2: Norm::new(store, &format!("{name}.norm2"), d),
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), d, cfg.mlp_dim),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), cfg.mlp_dim, d),
        }
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
    head: Linear,
}

/// Result of [`Vit::attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOut {
    pub output: Var,
    /// Row-stochastic weights, `[B·heads × n × n]`.
    pub weights: Var,
}

/// Encoder outputs of Algorithm-style forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B × embed_dim]`
    pub z_cls: Var,
    /// `[B × num_patches × embed_dim]`
    pub z_patches: Var,
}

#[derive(Clone, Debug)]
pub struct Vit {
    config: VitConfig,
    patch_embed: Linear,
    cls_token: ParamId,
    pos_embed: ParamId,
    encoder: Vec<Block>,
    encoder_norm: Norm,
    decoder: Option<Decoder>,
    head: Option<Linear>,
}

impl Vit {
    /// Registers all parameters in `store` (names prefixed `vit.`) and
    /// initialises them from `seed`.
    pub fn new(config: VitConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, EMBED_INIT_STD).expect("valid std");
        let d = config.embed_dim;
        let n = config.num_patches();
        let gaussian = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let len = shape.iter().product();
            Tensor::new(shape, (0..len).map(|_| normal.sample(rng)).collect()).unwrap()
        };

        let patch_embed = Linear::new(store, &mut rng, "vit.patch_embed", config.patch_dim(), d);
        let cls_token = store.add("vit.cls_token", gaussian(&[1, d], &mut rng), false);
        let pos_embed = store.add("vit.pos_embed", gaussian(&[n + 1, d], &mut rng), false);
        let encoder = (0..config.encoder_depth)
            .map(|i| Block::new(store, &mut rng, &format!("vit.encoder.{i}"), &config))
            .collect();
        let encoder_norm = Norm::new(store, "vit.encoder.norm", d);

        let (decoder, head) = match config.task {
            Task::Clustering => {
                let pos_embed = store.add("vit.decoder.pos_embed", gaussian(&[n, d], &mut rng), false);
                let blocks = (0..config.decoder_depth)
                    .map(|i| Block::new(store, &mut rng, &format!("vit.decoder.{i}"), &config))
                    .collect();
                let norm = Norm::new(store, "vit.decoder.norm", d);
                let head = Linear::new(store, &mut rng, "vit.decoder.head", d, config.patch_dim());
                (
                    Some(Decoder {
                        pos_embed,
                        blocks,
                        norm,
                        head,
                    }),
                    None,
                )
            }
            Task::Classification => {
                let classes = config.num_classes.expect("validated");
                (None, Some(Linear::new(store, &mut rng, "vit.head", d, classes)))
            }
        };

        Ok(Vit {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            encoder,
            encoder_norm,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    /// Multi-head self-attention of encoder (or decoder, when `decoder` is
    /// set) block `block` over tokens `x: [B × n × d]`. No normalisation or
    /// residual is applied here.
    pub fn attention(&self, tape: &mut Tape, p: &Bound, decoder: bool, block: usize, x: Var) -> Result<AttentionOut> {
        let blocks = if decoder {
            &self
                .decoder
                .as_ref()
                .ok_or_else(|| Error::Contract("model has no decoder".into()))?
                .blocks
        } else {
            &self.encoder
        };
        let b = blocks
            .get(block)
            .ok_or_else(|| Error::Contract(format!("no block {block}")))?;
        self.attend(tape, p, b, x)
    }

    fn attend(&self, tape: &mut Tape, p: &Bound, blk: &Block, x: Var) -> Result<AttentionOut> {
        let shape = tape.shape(x).to_vec();
        let d = self.config.embed_dim;
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::dim(format!("attention expects [B, n, {d}], got {shape:?}")));
        }
        let (bsz, n) = (shape[0], shape[1]);
        let h = self.config.num_heads;
        let dh = d / h;

        let flat = tape.reshape(x, &[bsz * n, d])?;
        let qkv = blk.qkv.apply(tape, p, flat)?;
        let qkv = tape.reshape(qkv, &[bsz, n, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = tape.reshape(qkv, &[3 * bsz * h, n, dh])?;
        let q = tape.slice(qkv, 0, 0, bsz * h)?;
        let k = tape.slice(qkv, 0, bsz * h, bsz * h)?;
        let v = tape.slice(qkv, 0, 2 * bsz * h, bsz * h)?;

        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax(scores, 2)?;
        let ctx = tape.batch_matmul(weights, v, false)?;
        let ctx = tape.reshape(ctx, &[bsz, h, n, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[bsz * n, d])?;
        let out = blk.proj.apply(tape, p, ctx)?;
        let output = tape.reshape(out, &[bsz, n, d])?;
        Ok(AttentionOut { output, weights })
    }

    fn block(&self, tape: &mut Tape, p: &Bound, blk: &Block, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let d = self.config.embed_dim;
        let rows = shape[0] * shape[1];

        let h = blk.norm1.apply(tape, p, x)?;
        let a = self.attend(tape, p, blk, h)?.output;
        let x = tape.add(x, a)?;

        let h = blk.norm2.apply(tape, p, x)?;
        let h = tape.reshape(h, &[rows, d])?;
        let h = blk.fc1.apply(tape, p, h)?;
        let h = tape.gelu(h);
        let h = blk.fc2.apply(tape, p, h)?;
        let h = tape.reshape(h, &[shape[0], shape[1], d])?;
        tape.add(x, h)
    }

    /// Embeds images `[B × C × H × W]` and runs the encoder.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, images: &Tensor) -> Result<Encoded> {
        let cfg = &self.config;
        let s = images.shape();
        let want = [cfg.channels, cfg.image_size, cfg.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::dim(format!(
                "encode expects [B, {}, {}, {}], got {s:?}",
                want[0], want[1], want[2]
            )));
        }
        let bsz = s[0];
        let (n, d, ps, g) = (cfg.num_patches(), cfg.embed_dim, cfg.patch_size, cfg.grid_side());
        let shape6 = [bsz, cfg.channels, g, ps, g, ps];
        let (patches, _) = kernels::permute(images.data(), &shape6, &[0, 2, 4, 1, 3, 5]);
        let patches = tape.constant(Tensor::new(&[bsz * n, cfg.patch_dim()], patches)?);

        let tokens = self.patch_embed.apply(tape, p, patches)?;
        let tokens = tape.reshape(tokens, &[bsz, n, d])?;
        let cls = tape.expand(p[self.cls_token], bsz);
        let mut x = tape.concat(&[cls, tokens], 1)?;
        x = tape.add_broadcast(x, p[self.pos_embed])?;
        for blk in &self.encoder {
            x = self.block(tape, p, blk, x)?;
        }
        let x = self.encoder_norm.apply(tape, p, x)?;
        let z_cls = tape.slice(x, 1, 0, 1)?;
        let z_cls = tape.reshape(z_cls, &[bsz, d])?;
        let z_patches = tape.slice(x, 1, 1, n)?;
        Ok(Encoded { z_cls, z_patches })
    }

    /// Reconstructs images `[B × C × H × W]` from `z_patches`.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, z_patches: Var) -> Result<Var> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Contract("decode called on a model built without decoder weights".into()))?;
        let cfg = &self.config;
        let (n, d, ps, g) = (cfg.num_patches(), cfg.embed_dim, cfg.patch_size, cfg.grid_side());
        let s = tape.shape(z_patches).to_vec();
        if s.len() != 3 || s[1] != n || s[2] != d {
            return Err(Error::dim(format!("decode expects [B, {n}, {d}], got {s:?}")));
        }
        let bsz = s[0];
        let mut x = tape.add_broadcast(z_patches, p[dec.pos_embed])?;
        for blk in &dec.blocks {
            x = self.block(tape, p, blk, x)?;
        }
        let x = dec.norm.apply(tape, p, x)?;
        let x = tape.reshape(x, &[bsz * n, d])?;
        let pix = dec.head.apply(tape, p, x)?;
        let pix = tape.reshape(pix, &[bsz, g, g, cfg.channels, ps, ps])?;
        let pix = tape.permute(pix, &[0, 3, 1, 4, 2, 5])?;
        tape.reshape(pix, &[bsz, cfg.channels, cfg.image_size, cfg.image_size])
    }

    /// Class logits `[B × num_classes]` from `z_cls`.
    pub fn classify(&self, tape: &mut Tape, p: &Bound, z_cls: Var) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("classify needs a classification config with num_classes".into()))?;
        head.apply(tape, p, z_cls)
    }
}
