//! Patch-embedding transformer: the frozen teacher encoder, the linear neck,
//! and the two structurally identical decoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub teacher_blocks: usize,
    pub teacher_stages: usize,
    pub decoder_blocks: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub seed: u64,
    /// Feed `Neck(F⁴)` rather than `F⁴` to the identity decoder.
    pub identity_uses_neck: bool,
    /// Initialize both decoders from the same seed.
    pub tied_decoder_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            embed_dim: 384,
            num_heads: 6,
            teacher_blocks: 12,
            teacher_stages: 4,
            decoder_blocks: 9,
            mlp_ratio: 4.0,
            num_classes: 15,
            seed: 0,
            identity_uses_neck: false,
            tied_decoder_init: true,
        }
    }
}

pub const DECODER_STAGES: usize = 3;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.teacher_stages < DECODER_STAGES + 1
            || self.teacher_blocks == 0
            || self.teacher_blocks % self.teacher_stages != 0
        {
            return bad(format!(
                "{} teacher blocks cannot form {} stages (need at least {})",
                self.teacher_blocks,
                self.teacher_stages,
                DECODER_STAGES + 1
            ));
        }
        if self.decoder_blocks == 0 || self.decoder_blocks % DECODER_STAGES != 0 {
            return bad(format!("decoder_blocks {} not divisible by 3", self.decoder_blocks));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_classes == 0 || !(self.mlp_ratio > 0.0) {
            return bad("num_classes and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Side of the token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Teacher block indices (1-based) after which a stage ends.
    pub fn teacher_stage_ends(&self) -> Vec<usize> {
        let per = self.teacher_blocks / self.teacher_stages;
        (1..=self.teacher_stages).map(|s| s * per).collect()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std) truncated to ±2 std.
    pub fn trunc_normal<T: Scalar>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
    }

    pub fn uniform<T: Scalar>(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.rng.random_range(-bound..=bound)))
    }
}

const INIT_STD: f64 = 0.02;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dims: (usize, usize),
        trainable: bool,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), init.trunc_normal(vec![dims.0, dims.1], INIT_STD), trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dims.1]), trainable),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(&p[self.weight])?.add(&p[self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, trainable: bool) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![dim]), trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), trainable),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let axis = x.shape().len() - 1;
        x.layer_norm(&p[self.gamma], &p[self.beta], axis)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    norm1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
        trainable: bool,
    ) -> Self {
        let (c, hidden) = (cfg.embed_dim, cfg.hidden_dim());
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c, trainable),
            query: Linear::new(store, init, &format!("{name}.attn.query"), (c, c), trainable),
            key: Linear::new(store, init, &format!("{name}.attn.key"), (c, c), trainable),
            value: Linear::new(store, init, &format!("{name}.attn.value"), (c, c), trainable),
            proj: Linear::new(store, init, &format!("{name}.attn.proj"), (c, c), trainable),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c, trainable),
            fc1: Linear::new(store, init, &format!("{name}.mlp.fc1"), (c, hidden), trainable),
            fc2: Linear::new(store, init, &format!("{name}.mlp.fc2"), (hidden, c), trainable),
            heads: cfg.num_heads,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let (bs, tokens, c) = (shape[0], shape[1], shape[2]);
        let (h, d) = (self.heads, c / self.heads);
        let split = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            v.reshape(vec![bs, tokens, h, d])?.permute(&[0, 2, 1, 3])
        };
        let normed = self.norm1.forward(p, x)?;
        let q = split(self.query.forward(p, &normed)?)?;
        let k = split(self.key.forward(p, &normed)?)?;
        let v = split(self.value.forward(p, &normed)?)?;
        let scores = q.matmul(&k.transpose_last()?)?.mul_scalar(1.0 / (d as f64).sqrt());
        let attn = scores.softmax(3)?;
        let mixed = attn
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![bs, tokens, c])?;
        let x = x.add(&self.proj.forward(p, &mixed)?)?;
        let hidden = self.fc1.forward(p, &self.norm2.forward(p, &x)?)?.gelu();
        x.add(&self.fc2.forward(p, &hidden)?)
    }
}

/// Splits `[bs, 3, H, W]` images into `[bs, T, 3·p·p]` non-overlapping patches,
/// tokens in row-major grid order, each patch flattened channel-major.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != s[3] || s[2] % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "expected [bs, 3, H, H] images divisible into {patch}px patches, got {s:?}"
        )));
    }
    let (bs, side) = (s[0], s[2]);
    let g = side / patch;
    let dim = 3 * patch * patch;
    let mut out = Vec::with_capacity(bs * g * g * dim);
    let data = images.data();
    for b in 0..bs {
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..3 {
                    for py in 0..patch {
                        let row = ((b * 3 + ch) * side + gy * patch + py) * side + gx * patch;
                        out.extend_from_slice(&data[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![bs, g * g, dim], out)
}

/// `[bs, T, c]` → `[bs, c, h, w]` with token `t` at `(t / w, t % w)`.
pub fn tokens_to_spatial<'t, T: Scalar>(tokens: &Var<'t, T>, grid: usize) -> Result<Var<'t, T>> {
    let s = tokens.shape();
    tokens.permute(&[0, 2, 1])?.reshape(vec![s[0], s[2], grid, grid])
}

pub fn spatial_to_tokens<'t, T: Scalar>(spatial: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = spatial.shape();
    spatial.reshape(vec![s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// Stage outputs of the teacher: three spatial maps and the deepest tokens.
pub struct FeaturePyramid<'t, T: Scalar> {
    pub spatial: Vec<Var<'t, T>>,
    pub tokens: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    blocks: Vec<Block>,
    stage_ends: Vec<usize>,
    patch: usize,
    grid: usize,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        let patch_embed = Linear::new(
            store,
            init,
            "teacher.patch_embed",
            (3 * cfg.patch_size * cfg.patch_size, c),
            false,
        );
        let pos_embed = store.add(
            "teacher.pos_embed",
            init.trunc_normal(vec![cfg.tokens(), c], INIT_STD),
            false,
        );
        let blocks = (0..cfg.teacher_blocks)
            .map(|i| Block::new(store, init, &format!("teacher.blocks.{i}"), cfg, false))
            .collect();
        Self {
            patch_embed,
            pos_embed,
            blocks,
            stage_ends: cfg.teacher_stage_ends(),
            patch: cfg.patch_size,
            grid: cfg.grid(),
        }
    }

    pub fn embed<'t, T: Scalar>(&self, p: &Bound<'t, T>, images: &Tensor<T>) -> Result<Var<'t, T>> {
        let patches = p[self.pos_embed].tape().constant(patchify(images, self.patch)?);
        self.patch_embed.forward(p, &patches)?.add(&p[self.pos_embed])
    }

    /// Runs every block; returns the outputs at the stage boundaries. The
    /// last stage stays a token sequence, the earlier ones become spatial
    /// maps. Only the last [`DECODER_STAGES`] + 1 stages are kept.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, images: &Tensor<T>) -> Result<FeaturePyramid<'t, T>> {
        let mut x = self.embed(p, images)?;
        let mut stages = Vec::with_capacity(self.stage_ends.len());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(p, &x)?;
            if self.stage_ends.contains(&(i + 1)) {
                stages.push(x);
            }
        }
        let tokens = stages.pop().expect("at least one stage");
        let first = stages.len() - DECODER_STAGES;
        let spatial = stages[first..]
            .iter()
            .map(|s| tokens_to_spatial(s, self.grid))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { spatial, tokens })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<Block>,
    grid: usize,
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        Self {
            blocks: (0..cfg.decoder_blocks)
                .map(|i| Block::new(store, init, &format!("{name}.blocks.{i}"), cfg, true))
                .collect(),
            grid: cfg.grid(),
        }
    }

    /// Three spatial maps, ordered to pair with the teacher's stages 1..3:
    /// element 0 is the output of the last decoder stage (it mirrors the
    /// shallowest teacher stage), element 2 the output of the first.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, tokens: &Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let per = self.blocks.len() / DECODER_STAGES;
        let mut x = *tokens;
        let mut outs = Vec::with_capacity(DECODER_STAGES);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(p, &x)?;
            if (i + 1) % per == 0 {
                outs.push(tokens_to_spatial(&x, self.grid)?);
            }
        }
        outs.reverse();
        Ok(outs)
    }
}
