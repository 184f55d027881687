//! Finite-difference verification of whole-block gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Block, Mode, ParamKind, Result};
use crate::tensor::{finite_diff_grad, max_relative_error, FaultInjection, Tape, Tensor};

/// Worst analytic-vs-numeric discrepancy for one parameter tensor (or the
/// block input).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GroupError {
    pub group: String,
    pub elements: usize,
    pub max_rel_error: f64,
}

/// Compares tape gradients of `Σ w ⊙ block(x)` (fixed random `w`, training
/// mode) with central differences for the input and every trainable tensor.
pub fn check_block_gradients(
    block: &mut dyn Block,
    x: &Tensor,
    seed: u64,
    step: f64,
    fault: Option<FaultInjection>,
) -> Result<Vec<GroupError>> {
    let out_shape = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, xv, Mode::Train)?;
        tape.value(y).shape().to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::from_fn(&out_shape, |_| rng.gen_range(-1.0..1.0));

    let loss = |block: &dyn Block, x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, xv, Mode::Train)?;
        Ok(tape
            .value(y)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let xv = tape.leaf(x.clone(), true);
    let y = block.forward(&mut tape, xv, Mode::Train)?;
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    let total = tape.sum(prod);
    tape.backward(total)?;

    let mut report = Vec::new();
    let x_grad = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut failure = None;
    let numeric = finite_diff_grad(
        |xp| {
            loss(&*block, xp).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        x,
        step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    report.push(GroupError {
        group: "input".into(),
        elements: x.numel(),
        max_rel_error: max_relative_error(&x_grad, numeric.data()),
    });

    let analytic = block.collect_grads(&tape);
    drop(tape);
    let mut roles = Vec::new();
    block.visit("", &mut |role, kind, _| {
        if kind == ParamKind::Trainable {
            roles.push(role.to_string());
        }
    });

    for (ti, (role, grad)) in roles.iter().zip(&analytic).enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let orig = set_element(block, ti, j, None);
            set_element(block, ti, j, Some(orig + step));
            let plus = loss(&*block, x);
            set_element(block, ti, j, Some(orig - step));
            let minus = loss(&*block, x);
            set_element(block, ti, j, Some(orig));
            numeric.push((plus? - minus?) / (2.0 * step));
        }
        report.push(GroupError {
            group: role.clone(),
            elements: grad.len(),
            max_rel_error: max_relative_error(grad, &numeric),
        });
    }
    Ok(report)
}

/// Returns element `j` of the `index`-th trainable tensor, overwriting it
/// first when `value` is given.
fn set_element(block: &mut dyn Block, index: usize, j: usize, value: Option<f64>) -> f64 {
    let mut seen = 0;
    let mut old = f64::NAN;
    block.visit_mut("", &mut |_, kind, t| {
        if kind != ParamKind::Trainable {
            return;
        }
        if seen == index {
            old = t.data()[j];
            if let Some(v) = value {
                t.data_mut()[j] = v;
            }
        }
        seen += 1;
    });
    old
}
