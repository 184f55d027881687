use rand::Rng;

use super::{join, BlockError, Mode, ParamKind, Parameterized, Result};
use crate::tensor::{ConvGeometry, NormMode, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Silu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn key(&self) -> usize {
        self as *const Self as usize
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        let norm_mode = match mode {
            Mode::Train => NormMode::Train,
            Mode::Infer => NormMode::Infer {
                mean: self.running_mean.data(),
                var: self.running_var.data(),
            },
        };
        let (y, stats) = tape.batchnorm2d(x, gamma, beta, norm_mode, self.eps)?;
        if let Some(stats) = stats {
            tape.record_batch_stats(self.key(), stats);
        }
        Ok(y)
    }

    /// Exponential moving update of the running statistics from the batch
    /// statistics this layer recorded on `tape`, if any.
    pub fn commit(&mut self, tape: &Tape) {
        let Some(stats) = tape.batch_stats(self.key()).cloned() else {
            return;
        };
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "gamma"), ParamKind::Trainable, &self.gamma);
        f(&join(prefix, "beta"), ParamKind::Trainable, &self.beta);
        f(
            &join(prefix, "running_mean"),
            ParamKind::Buffer,
            &self.running_mean,
        );
        f(
            &join(prefix, "running_var"),
            ParamKind::Buffer,
            &self.running_var,
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(
            &join(prefix, "gamma"),
            ParamKind::Trainable,
            &mut self.gamma,
        );
        f(&join(prefix, "beta"), ParamKind::Trainable, &mut self.beta);
        f(
            &join(prefix, "running_mean"),
            ParamKind::Buffer,
            &mut self.running_mean,
        );
        f(
            &join(prefix, "running_var"),
            ParamKind::Buffer,
            &mut self.running_var,
        );
    }
}

/// Convolution, optionally followed by batch norm and an activation.
///
/// A unit never carries both a conv bias and batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub bn: Option<BatchNorm>,
    pub act: Activation,
    pub geom: ConvGeometry,
}

/// Construction options for [`ConvUnit::init`].
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bn: bool,
    pub bias: bool,
    pub act: Activation,
}

impl ConvSpec {
    /// 1×1 conv with batch norm.
    pub fn pointwise(c_in: usize, c_out: usize, act: Activation) -> Self {
        Self {
            c_in,
            c_out,
            kernel: 1,
            stride: 1,
            groups: 1,
            bn: true,
            bias: false,
            act,
        }
    }
}

impl ConvUnit {
    /// Weights uniform in ±√(6 / fan_in); batch norm at identity.
    pub fn init(spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        let ConvSpec {
            c_in,
            c_out,
            kernel,
            stride,
            groups,
            bn,
            bias,
            act,
        } = spec;
        if c_in == 0 || c_out == 0 || kernel == 0 || stride == 0 || groups == 0 {
            return Err(BlockError::Config(format!("degenerate conv spec {spec:?}")));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(BlockError::Config(format!(
                "channels {c_in}->{c_out} not divisible by groups {groups}"
            )));
        }
        if bn && bias {
            return Err(BlockError::Config(
                "conv bias is redundant in front of batch norm".into(),
            ));
        }
        let fan_in = c_in / groups * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_fn(&[c_out, c_in / groups, kernel, kernel], |_| {
            rng.gen_range(-bound..=bound)
        });
        Ok(Self {
            weight,
            bias: bias.then(|| Tensor::zeros(&[c_out])),
            bn: bn.then(|| BatchNorm::new(c_out)),
            act,
            geom: ConvGeometry {
                stride,
                padding: kernel / 2,
                groups,
            },
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.geom.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        let mut y = tape.conv2d(x, w, b, self.geom)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(tape, y, mode)?;
        }
        Ok(match self.act {
            Activation::None => y,
            Activation::Silu => tape.silu(y),
        })
    }

    /// Zeroes the conv weights (and bias) so the unit outputs its batch-norm
    /// shift only.
    pub fn zero_weights(&mut self) {
        self.weight.data_mut().fill(0.0);
        if let Some(b) = &mut self.bias {
            b.data_mut().fill(0.0);
        }
    }
}

impl Parameterized for ConvUnit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), ParamKind::Trainable, b);
        }
        if let Some(bn) = &self.bn {
            bn.visit(&join(prefix, "bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(
            &join(prefix, "weight"),
            ParamKind::Trainable,
            &mut self.weight,
        );
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), ParamKind::Trainable, b);
        }
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(&join(prefix, "bn"), f);
        }
    }

    fn visit_norms_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        if let Some(bn) = &mut self.bn {
            f(bn);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds_and_identity_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ConvSpec {
            c_in: 4,
            c_out: 4,
            kernel: 3,
            stride: 1,
            groups: 4,
            bn: true,
            bias: false,
            act: Activation::None,
        };
        let unit = ConvUnit::init(spec, &mut rng).unwrap();
        let bound = (2.0f64 / 3.0).sqrt();
        assert!(unit.weight.data().iter().all(|w| w.abs() <= bound));
        let bn = unit.bn.as_ref().unwrap();
        assert!(bn.gamma.data().iter().all(|&g| g == 1.0));
        assert!(bn.beta.data().iter().all(|&b| b == 0.0));
        assert!(bn.running_var.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_bias_with_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut spec = ConvSpec::pointwise(2, 2, Activation::None);
        spec.bias = true;
        assert!(ConvUnit::init(spec, &mut rng).is_err());
    }

    #[test]
    fn commit_moves_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut unit =
            ConvUnit::init(ConvSpec::pointwise(1, 1, Activation::None), &mut rng).unwrap();
        unit.weight.data_mut()[0] = 1.0;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 1, 2], |i| [1.0, 3.0][i]));
        unit.forward(&mut tape, x, Mode::Train).unwrap();
        unit.commit_batch_stats(&tape);
        let bn = unit.bn.as_ref().unwrap();
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance 2, running 0.9·1 + 0.1·2
        assert!((bn.running_var.data()[0] - 1.1).abs() < 1e-15);
    }
}
