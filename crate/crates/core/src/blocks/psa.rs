use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{AttentionConfig, AttentionParams};
use super::conv::{Activation, ConvSpec, ConvUnit};
use super::{join, BatchNorm, BlockError, Mode, ParamKind, Parameterized, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Partial self-attention block.
///
/// The entry conv output is split into two channel halves. One half passes
/// through untouched; the other gets a residual attention block and then a
/// residual two-layer feed-forward conv pair. The halves are concatenated
/// and mixed by the exit conv.
#[derive(Debug, Clone, PartialEq)]
pub struct PsaParams {
    pub channels: usize,
    pub entry: ConvUnit,
    pub attention: AttentionParams,
    pub ffn_expand: ConvUnit,
    pub ffn_project: ConvUnit,
    pub exit: ConvUnit,
}

impl PsaParams {
    pub fn init(channels: usize, attn_ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(BlockError::Config(format!(
                "PSA needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        let config = AttentionConfig::for_channels(half, attn_ratio)?;
        Ok(Self {
            channels,
            entry: ConvUnit::init(
                ConvSpec::pointwise(channels, channels, Activation::Silu),
                rng,
            )?,
            attention: AttentionParams::init(config, rng)?,
            ffn_expand: ConvUnit::init(ConvSpec::pointwise(half, channels, Activation::Silu), rng)?,
            ffn_project: ConvUnit::init(
                ConvSpec::pointwise(channels, half, Activation::None),
                rng,
            )?,
            exit: ConvUnit::init(
                ConvSpec::pointwise(channels, channels, Activation::Silu),
                rng,
            )?,
        })
    }

    pub fn seeded(channels: usize, attn_ratio: f64, seed: u64) -> Result<Self> {
        Self::init(channels, attn_ratio, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let got = tape.value(x).shape().get(1).copied().unwrap_or(0);
        if tape.value(x).rank() != 4 || got != self.channels {
            return Err(BlockError::ChannelMismatch {
                block: "psa",
                expected: self.channels,
                got,
            });
        }
        let half = self.channels / 2;
        let t = self.entry.forward(tape, x, mode)?;
        let halves = tape.split(t, 1, &[half, half])?;
        let (a, mut b) = (halves[0], halves[1]);
        let attended = self.attention.forward(tape, b, mode)?;
        b = tape.add(b, attended)?;
        let hidden = self.ffn_expand.forward(tape, b, mode)?;
        let ffn = self.ffn_project.forward(tape, hidden, mode)?;
        b = tape.add(b, ffn)?;
        let merged = tape.concat(&[a, b], 1)?;
        self.exit.forward(tape, merged, mode)
    }
}

impl Parameterized for PsaParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.entry.visit(&join(prefix, "entry"), f);
        self.attention.visit(&join(prefix, "attn"), f);
        self.ffn_expand.visit(&join(prefix, "ffn.0"), f);
        self.ffn_project.visit(&join(prefix, "ffn.1"), f);
        self.exit.visit(&join(prefix, "exit"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.entry.visit_mut(&join(prefix, "entry"), f);
        self.attention.visit_mut(&join(prefix, "attn"), f);
        self.ffn_expand.visit_mut(&join(prefix, "ffn.0"), f);
        self.ffn_project.visit_mut(&join(prefix, "ffn.1"), f);
        self.exit.visit_mut(&join(prefix, "exit"), f);
    }

    fn visit_norms_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.entry.visit_norms_mut(f);
        self.attention.visit_norms_mut(f);
        self.ffn_expand.visit_norms_mut(f);
        self.ffn_project.visit_norms_mut(f);
        self.exit.visit_norms_mut(f);
    }
}
