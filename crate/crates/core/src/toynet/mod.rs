//! Desk-scale single-scale detector with configurable PSA placement.

mod flops;
mod head;
mod train;

pub use flops::{flops_estimate, FlopsReport, LayerFlops};
pub use head::{build_targets, decode, detection_loss, nms, CellTargets};
pub use train::{detect, evaluate_map50, train_toy, EpochLog, Sgd, TrainOptions, TrainOutcome};

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{
    join, load_checkpoint, save_checkpoint, Activation, BatchNorm, BlockError, ConvSpec, ConvUnit,
    Mode, ParamKind, Parameterized, PsaParams,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T, E = ToyError> = std::result::Result<T, E>;

pub const DEFAULT_NMS_IOU: f64 = 0.45;
pub const DEFAULT_CONF: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    /// Output channels of the stem (stage 0) and each later stage; every
    /// stage halves the resolution.
    pub stage_channels: Vec<usize>,
    /// Stages followed by a PSA block.
    pub psa_placements: BTreeSet<usize>,
    pub attn_ratio: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stage_channels: vec![16, 32, 64],
            psa_placements: BTreeSet::from([2]),
            attn_ratio: 0.5,
            num_classes: 7,
        }
    }
}

impl ModelConfig {
    pub fn head_channels(&self) -> usize {
        1 + self.num_classes + 4
    }

    pub fn grid(&self) -> usize {
        self.input_size >> self.stage_channels.len()
    }

    /// Spatial side of the feature map after `stage`.
    pub fn stage_size(&self, stage: usize) -> usize {
        self.input_size >> (stage + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 || self.stage_channels.contains(&0) {
            return Err(ToyError::Config(
                "stage channels must be non-empty and positive".into(),
            ));
        }
        if self.num_classes == 0 {
            return Err(ToyError::Config("need at least one class".into()));
        }
        if n >= usize::BITS as usize || self.input_size == 0 || self.input_size % (1 << n) != 0 {
            return Err(ToyError::Config(format!(
                "input size {} not divisible by 2^{n}",
                self.input_size
            )));
        }
        if !(self.attn_ratio > 0.0 && self.attn_ratio <= 1.0) {
            return Err(ToyError::Config(format!(
                "attention ratio {} outside (0, 1]",
                self.attn_ratio
            )));
        }
        for &p in &self.psa_placements {
            let Some(&c) = self.stage_channels.get(p) else {
                return Err(ToyError::Config(format!(
                    "PSA placement {p} out of range for {n} stages"
                )));
            };
            if c % 2 != 0 {
                return Err(ToyError::Config(format!(
                    "stage {p} has odd width {c}; PSA needs an even channel count"
                )));
            }
        }
        Ok(())
    }
}

/// Parses a comma-separated placement list; the empty string means none.
pub fn parse_placements(s: &str) -> Result<BTreeSet<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| ToyError::Config(format!("bad placement index {t:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub config: ModelConfig,
    pub stages: Vec<ConvUnit>,
    /// One slot per stage.
    pub psa: Vec<Option<PsaParams>>,
    pub head: ConvUnit,
}

/// Feature maps on either side of a PSA block.
#[derive(Debug, Clone, Copy)]
pub struct PsaTap {
    pub stage: usize,
    pub before: Var,
    pub after: Var,
}

impl ToyNet {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut psa = Vec::new();
        let mut c_in = 3;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            stages.push(ConvUnit::init(
                ConvSpec {
                    c_in,
                    c_out: c,
                    kernel: 3,
                    stride: 2,
                    groups: 1,
                    bn: true,
                    bias: false,
                    act: Activation::Silu,
                },
                &mut rng,
            )?);
            psa.push(if config.psa_placements.contains(&i) {
                Some(PsaParams::init(c, config.attn_ratio, &mut rng)?)
            } else {
                None
            });
            c_in = c;
        }
        let head = ConvUnit::init(
            ConvSpec {
                c_in,
                c_out: config.head_channels(),
                kernel: 1,
                stride: 1,
                groups: 1,
                bn: false,
                bias: true,
                act: Activation::None,
            },
            &mut rng,
        )?;
        Ok(Self {
            config,
            stages,
            psa,
            head,
        })
    }

    pub fn num_psa(&self) -> usize {
        self.psa.iter().flatten().count()
    }

    pub fn forward(&self, tape: &mut Tape, images: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_with_taps(tape, images, mode)?.0)
    }

    /// Forward pass that also reports the maps around every PSA block.
    pub fn forward_with_taps(
        &self,
        tape: &mut Tape,
        images: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<PsaTap>)> {
        let s = self.config.input_size;
        let shape = tape.value(images).shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(ToyError::Input(format!(
                "expected images [B, 3, {s}, {s}], got {shape:?}"
            )));
        }
        let mut x = images;
        let mut taps = Vec::new();
        for (i, (stage, psa)) in self.stages.iter().zip(&self.psa).enumerate() {
            x = stage.forward(tape, x, mode)?;
            if let Some(p) = psa {
                let before = x;
                x = p.forward(tape, x, mode)?;
                taps.push(PsaTap {
                    stage: i,
                    before,
                    after: x,
                });
            }
        }
        Ok((self.head.forward(tape, x, mode)?, taps))
    }

    /// Inference-mode prediction tensor `[B, head_channels, G, G]`.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, x, Mode::Infer)?;
        Ok(tape.value(y).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": self.config });
        save_checkpoint(self, path, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
            .map_err(|e| ToyError::Input(format!("checkpoint metadata: {e}")))?;
        let mut net = Self::build(config, 0)?;
        ck.apply_to(&mut net)?;
        Ok(net)
    }
}

impl Parameterized for ToyNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        for (i, (stage, psa)) in self.stages.iter().zip(&self.psa).enumerate() {
            stage.visit(&join(prefix, &format!("stage{i}")), f);
            if let Some(p) = psa {
                p.visit(&join(prefix, &format!("psa{i}")), f);
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        for (i, (stage, psa)) in self.stages.iter_mut().zip(&mut self.psa).enumerate() {
            stage.visit_mut(&join(prefix, &format!("stage{i}")), f);
            if let Some(p) = psa {
                p.visit_mut(&join(prefix, &format!("psa{i}")), f);
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn visit_norms_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        for (stage, psa) in self.stages.iter_mut().zip(&mut self.psa) {
            stage.visit_norms_mut(f);
            if let Some(p) = psa {
                p.visit_norms_mut(f);
            }
        }
        self.head.visit_norms_mut(f);
    }
}

/// Stacks `[3, S, S]` images into one `[B, 3, S, S]` batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| ToyError::Input("empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(ToyError::Input(format!(
                "mixed image shapes {shape:?} and {:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Ok(Tensor::new(&full, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            psa_placements: BTreeSet::from([3]),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let odd = ModelConfig {
            stage_channels: vec![16, 33, 64],
            psa_placements: BTreeSet::from([1]),
            ..Default::default()
        };
        assert!(odd.validate().is_err());
        let size = ModelConfig {
            input_size: 60,
            ..Default::default()
        };
        assert!(size.validate().is_err());
        assert_eq!(ModelConfig::default().grid(), 8);
        assert_eq!(ModelConfig::default().head_channels(), 12);
    }

    #[test]
    fn placement_parsing() {
        assert!(parse_placements("").unwrap().is_empty());
        assert_eq!(parse_placements("0, 2").unwrap(), BTreeSet::from([0, 2]));
        assert!(parse_placements("x").is_err());
    }

    #[test]
    fn structure_follows_placements() {
        let base = ModelConfig {
            psa_placements: BTreeSet::new(),
            ..Default::default()
        };
        assert_eq!(ToyNet::build(base, 0).unwrap().num_psa(), 0);
        let all = ModelConfig {
            psa_placements: BTreeSet::from([0, 1, 2]),
            ..Default::default()
        };
        assert_eq!(ToyNet::build(all, 0).unwrap().num_psa(), 3);
    }
}
