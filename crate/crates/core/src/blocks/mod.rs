//! Neural building blocks: conv units, the attention block and the partial
//! self-attention (PSA) block, plus parameter checkpointing.

mod attention;
mod checkpoint;
mod conv;
mod gradcheck;
mod psa;

pub use attention::{attention_weights, scaled_attention, AttentionConfig, AttentionParams};
pub use checkpoint::{
    decode_pvd, encode_pvd, load_checkpoint, save_checkpoint, sidecar_path, Checkpoint, TensorEntry,
};
pub use conv::{Activation, BatchNorm, ConvSpec, ConvUnit};
pub use gradcheck::{check_block_gradients, GroupError};
pub use psa::PsaParams;

use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum BlockError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{block}: expected {expected} input channels, got {got}")]
    ChannelMismatch {
        block: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = BlockError> = std::result::Result<T, E>;

/// Whether batch norm uses batch statistics (and records them) or running
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; saved but never touched by the optimizer.
    Buffer,
}

/// Structured access to every tensor a block owns, in a fixed order.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor));
    fn visit_norms_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm));

    /// Folds batch statistics recorded on `tape` into running statistics.
    fn commit_batch_stats(&mut self, tape: &Tape) {
        self.visit_norms_mut(&mut |bn| bn.commit(tape));
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                n += t.numel();
            }
        });
        n
    }

    /// Gradients of all trainable tensors from `tape`, in visiting order.
    /// Tensors the tape never reached get zero gradients.
    fn collect_grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                out.push(
                    tape.param_grad(t)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; t.numel()]),
                );
            }
        });
        out
    }
}

/// A shape-preserving or shape-changing block with a recorded forward pass.
pub trait Block: Parameterized {
    fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var>;
}

impl Block for ConvUnit {
    fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        ConvUnit::forward(self, tape, x, mode)
    }
}

impl Block for AttentionParams {
    fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        AttentionParams::forward(self, tape, x, mode)
    }
}

impl Block for PsaParams {
    fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        PsaParams::forward(self, tape, x, mode)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Number of attention heads for a channel count: one head per 64 channels,
/// at least one, and the per-head width must divide evenly.
pub fn heads_from_channels(channels: usize) -> Result<usize> {
    if channels == 0 {
        return Err(BlockError::Config("channel count must be positive".into()));
    }
    let heads = (channels / 64).max(1);
    if channels % heads != 0 {
        return Err(BlockError::Config(format!(
            "{channels} channels do not split evenly over {heads} heads"
        )));
    }
    Ok(heads)
}
