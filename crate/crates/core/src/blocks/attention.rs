use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{Activation, ConvSpec, ConvUnit};
use super::{
    heads_from_channels, join, BatchNorm, BlockError, Mode, ParamKind, Parameterized, Result,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Shape of a multi-head attention block.
///
/// `head_dim` is the per-head value width; queries and keys use the narrower
/// `key_dim = max(1, round(head_dim · attn_ratio))`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub channels: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub attn_ratio: f64,
    pub key_dim: usize,
}

impl AttentionConfig {
    pub fn new(channels: usize, num_heads: usize, attn_ratio: f64) -> Result<Self> {
        if num_heads == 0 || channels == 0 || channels % num_heads != 0 {
            return Err(BlockError::Config(format!(
                "{channels} channels cannot be split over {num_heads} heads"
            )));
        }
        if !(attn_ratio > 0.0 && attn_ratio <= 1.0) {
            return Err(BlockError::Config(format!(
                "attention ratio {attn_ratio} outside (0, 1]"
            )));
        }
        let head_dim = channels / num_heads;
        let key_dim = ((head_dim as f64 * attn_ratio).round() as usize).max(1);
        Ok(Self {
            channels,
            num_heads,
            head_dim,
            attn_ratio,
            key_dim,
        })
    }

    /// Config whose head count follows [`heads_from_channels`].
    pub fn for_channels(channels: usize, attn_ratio: f64) -> Result<Self> {
        Self::new(channels, heads_from_channels(channels)?, attn_ratio)
    }

    /// Channels produced by the fused query/key/value projection.
    pub fn qkv_channels(&self) -> usize {
        self.num_heads * (2 * self.key_dim + self.head_dim)
    }
}

/// Parameters of the attention block: a fused qkv projection, a depthwise
/// positional-encoding conv over the values, and an output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub config: AttentionConfig,
    pub qkv: ConvUnit,
    pub pe: ConvUnit,
    pub proj: ConvUnit,
}

impl AttentionParams {
    pub fn init(config: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = config.channels;
        let qkv = ConvUnit::init(
            ConvSpec::pointwise(c, config.qkv_channels(), Activation::None),
            rng,
        )?;
        let pe = ConvUnit::init(
            ConvSpec {
                c_in: c,
                c_out: c,
                kernel: 3,
                stride: 1,
                groups: c,
                bn: false,
                bias: true,
                act: Activation::None,
            },
            rng,
        )?;
        let proj = ConvUnit::init(ConvSpec::pointwise(c, c, Activation::None), rng)?;
        Ok(Self {
            config,
            qkv,
            pe,
            proj,
        })
    }

    pub fn seeded(config: AttentionConfig, seed: u64) -> Result<Self> {
        Self::init(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Projects `x` (B, C, H, W) to Q, K of shape (B, M, key_dim, N) and V of
    /// shape (B, M, D, N), with N = H·W.
    pub fn qkv_project(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, Var, Var)> {
        let shape = tape.value(x).shape().to_vec();
        let cfg = &self.config;
        if shape.len() != 4 || shape[1] != cfg.channels {
            return Err(BlockError::ChannelMismatch {
                block: "attention",
                expected: cfg.channels,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        let (b, n) = (shape[0], shape[2] * shape[3]);
        let y = self.qkv.forward(tape, x, mode)?;
        let y = tape.reshape(y, &[b, cfg.num_heads, 2 * cfg.key_dim + cfg.head_dim, n])?;
        let parts = tape.split(y, 2, &[cfg.key_dim, cfg.key_dim, cfg.head_dim])?;
        Ok((parts[0], parts[1], parts[2]))
    }

    /// Full block: `proj(attention(Q, K, V) + pe(V))`, shape preserving.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (q, k, v) = self.qkv_project(tape, x, mode)?;
        let attended = scaled_attention(tape, q, k, v, &self.config)?;
        let attended = tape.reshape(attended, &shape)?;
        let v_map = tape.reshape(v, &shape)?;
        let pos = self.pe.forward(tape, v_map, mode)?;
        let mixed = tape.add(attended, pos)?;
        self.proj.forward(tape, mixed, mode)
    }
}

/// Attention weights `softmax(Qᵀ K / √key_dim)` of shape (B, M, N, N); row
/// `n` holds the weights output position `n` assigns to every key position.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, config: &AttentionConfig) -> Result<Var> {
    let qt = tape.permute(q, &[0, 1, 3, 2])?;
    let scores = tape.matmul(qt, k)?;
    let scaled = tape.mul_scalar(scores, 1.0 / (config.key_dim as f64).sqrt());
    Ok(tape.softmax(scaled, 3)?)
}

/// Scaled dot-product attention over spatial positions, returning
/// (B, M, D, N): output column `n` is the convex combination of V's columns
/// weighted by attention row `n`.
pub fn scaled_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    config: &AttentionConfig,
) -> Result<Var> {
    let (sq, sk, sv) = (
        tape.value(q).shape().to_vec(),
        tape.value(k).shape().to_vec(),
        tape.value(v).shape().to_vec(),
    );
    let ok = sq.len() == 4
        && sq == sk
        && sv.len() == 4
        && sq[..2] == sv[..2]
        && sq[3] == sv[3]
        && sq[2] == config.key_dim
        && sv[2] == config.head_dim;
    if !ok {
        return Err(TensorError::ShapeMismatch {
            op: "scaled_attention",
            lhs: sq,
            rhs: sv,
        }
        .into());
    }
    let weights = attention_weights(tape, q, k, config)?;
    let wt = tape.permute(weights, &[0, 1, 3, 2])?;
    Ok(tape.matmul(v, wt)?)
}

impl Parameterized for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.pe.visit(&join(prefix, "pe"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.pe.visit_mut(&join(prefix, "pe"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }

    fn visit_norms_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.qkv.visit_norms_mut(f);
        self.pe.visit_norms_mut(f);
        self.proj.visit_norms_mut(f);
    }
}
