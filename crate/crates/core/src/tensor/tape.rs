use std::collections::HashMap;

use super::kernels::{self, ConvDims, ConvGeometry};
use super::{inverse_perm, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Infer { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, the quantity folded into running stats.
    pub var: Vec<f64>,
}

/// Deliberate gradient corruption, used as a negative control for gradient
/// checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    /// Scales the softmax input gradient by 1.5.
    SoftmaxGrad,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        channels: usize,
        plane: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        offset: usize,
        len: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Sum(Var),
    BceWithLogits {
        x: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so the record is already a
/// topological order and `backward` replays it in reverse exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<usize, Var>,
    batch_stats: HashMap<usize, BatchStats>,
    fault: Option<FaultInjection>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (outer, axis length, inner) factorization of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: FaultInjection) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a long-lived parameter tensor as a trainable leaf.
    ///
    /// Registration is keyed by the tensor's address, so repeated calls with
    /// the same tensor return the same leaf and [`Tape::param_grad`] can look
    /// the gradient up afterwards. The tensor must outlive its use on the tape.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let key = tensor as *const Tensor as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(tensor.clone(), true);
        self.params.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, tensor: &Tensor) -> Option<&[f64]> {
        let key = tensor as *const Tensor as usize;
        self.params.get(&key).and_then(|&v| self.grad(v))
    }

    pub fn record_batch_stats(&mut self, key: usize, stats: BatchStats) {
        self.batch_stats.insert(key, stats);
    }

    pub fn batch_stats(&self, key: usize) -> Option<&BatchStats> {
        self.batch_stats.get(&key)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(mismatch());
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut shape = sa.to_vec();
        shape[r - 1] = n;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: t.rank(),
            });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * len + i) * inner + r;
                let max = (0..len)
                    .map(|i| src[at(i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] /= total;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let dims = ConvDims::resolve(self.value(x).shape(), self.value(w).shape(), geom)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [dims.c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.value(b).shape().to_vec(),
                    rhs: vec![dims.c_out],
                });
            }
        }
        let out = kernels::conv2d_forward(
            &dims,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.needs(&inputs);
        Ok(self.push(
            Tensor::new(&dims.out_shape(), out)?,
            Op::Conv2d { x, w, bias, dims },
            rg,
        ))
    }

    /// Batch normalization over (B, H, W) per channel of a rank-4 input.
    ///
    /// Training mode returns the batch statistics so the owning layer can fold
    /// them into its running estimates.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let invalid = |msg: String| TensorError::Invalid {
            op: "batchnorm2d",
            msg,
        };
        if !(eps > 0.0) {
            return Err(invalid(format!("eps must be positive, got {eps}")));
        }
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(invalid(format!("expected rank-4 input, got {shape:?}")));
        }
        let (batch, channels, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let lens = [
            self.value(gamma).numel(),
            self.value(beta).numel(),
            match mode {
                NormMode::Train => channels,
                NormMode::Infer { mean, .. } => mean.len(),
            },
            match mode {
                NormMode::Train => channels,
                NormMode::Infer { var, .. } => var.len(),
            },
        ];
        if lens.iter().any(|&l| l != channels) {
            return Err(invalid(format!(
                "parameter lengths {lens:?} do not match {channels} channels"
            )));
        }
        let src = self.value(x).data();
        let idx = |b: usize, c: usize, p: usize| (b * channels + c) * plane + p;
        let n = (batch * plane) as f64;
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for b in 0..batch {
                        for p in 0..plane {
                            s += src[idx(b, c, p)];
                        }
                    }
                    mean[c] = s / n;
                    let mut v = 0.0;
                    for b in 0..batch {
                        for p in 0..plane {
                            let d = src[idx(b, c, p)] - mean[c];
                            v += d * d;
                        }
                    }
                    var[c] = v / n;
                }
                let unbiased = if n > 1.0 {
                    var.iter().map(|v| v * n / (n - 1.0)).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Infer { mean, var } => (mean.to_vec(), var.to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for c in 0..channels {
                for p in 0..plane {
                    let i = idx(b, c, p);
                    xhat[i] = (src[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: matches!(mode, NormMode::Train),
                channels,
                plane,
            },
            rg,
        );
        Ok((v, stats))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let value =
            Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    /// Elementwise binary cross-entropy of logits `x` against fixed targets.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: t.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let data = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::new(t.shape(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                x,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "split",
                axis,
                rank: shape.len(),
            });
        }
        if sizes.iter().sum::<usize>() != shape[axis] || sizes.contains(&0) {
            return Err(TensorError::Invalid {
                op: "split",
                msg: format!(
                    "sizes {sizes:?} do not partition axis of length {}",
                    shape[axis]
                ),
            });
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let rg = self.needs(&[x]);
        let mut offset = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            let src = self.value(x).data();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let start = (o * axis_len + offset) * inner;
                data.extend_from_slice(&src[start..start + len * inner]);
            }
            let mut piece_shape = shape.clone();
            piece_shape[axis] = len;
            let v = self.push(
                Tensor::new(&piece_shape, data)?,
                Op::Slice {
                    x,
                    outer,
                    axis_len,
                    inner,
                    offset,
                    len,
                },
                rg,
            );
            out.push(v);
            offset += len;
        }
        Ok(out)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut axis_len = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_len += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_len;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.value(p).shape()[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let descr = parts
            .iter()
            .map(|&p| (p, self.value(p).shape()[axis]))
            .collect();
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: descr,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element output with seed 1.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let t = self.value(out);
        if t.numel() != 1 {
            return Err(TensorError::NonScalarBackward(t.shape().to_vec()));
        }
        self.backward_with_seed(out, Tensor::new(t.shape(), vec![1.0])?)
    }

    /// Reverse pass with an explicit output adjoint.
    pub fn backward_with_seed(&mut self, out: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.value(out).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "backward seed",
                lhs: seed.shape().to_vec(),
                rhs: self.value(out).shape().to_vec(),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[out.0] = Some(seed.into_data());
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, i, &g, &mut self.grads, self.fault);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Adds `contribution` into the gradient slot of `v` (skipping constants).
fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    contribution: impl FnOnce(&mut [f64]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    contribution(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn propagate(
    nodes: &[Node],
    i: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    fault: Option<FaultInjection>,
) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Matmul {
            a,
            b,
            batch,
            m,
            k,
            n,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (da, db) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| {
                for bi in 0..*batch {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        false,
                        &db[bi * k * n..(bi + 1) * k * n],
                        true,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        true,
                    );
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for bi in 0..*batch {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &da[bi * m * k..(bi + 1) * m * k],
                        true,
                        &g[bi * m * n..(bi + 1) * m * n],
                        false,
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        true,
                    );
                }
            });
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = node.value.data();
            let scale = match fault {
                Some(FaultInjection::SoftmaxGrad) => 1.5,
                None => 1.0,
            };
            accumulate(nodes, grads, *x, |gx| {
                for o in 0..*outer {
                    for r in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + r;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            gx[at(j)] += scale * y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::Conv2d { x, w, bias, dims } => {
            let need = (
                nodes[x.0].requires_grad,
                nodes[w.0].requires_grad,
                bias.is_some_and(|b| nodes[b.0].requires_grad),
            );
            let cg = kernels::conv2d_backward(dims, val(*x), val(*w), g, need);
            if let Some(dx) = cg.dx {
                accumulate(nodes, grads, *x, |gx| add_into(gx, &dx));
            }
            if let Some(dw) = cg.dw {
                accumulate(nodes, grads, *w, |gw| add_into(gw, &dw));
            }
            if let (Some(b), Some(db)) = (bias, cg.db) {
                accumulate(nodes, grads, *b, |gb| add_into(gb, &db));
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
            channels,
            plane,
        } => {
            let (channels, plane) = (*channels, *plane);
            let batch = g.len() / (channels * plane);
            let idx = |b: usize, c: usize, p: usize| (b * channels + c) * plane + p;
            let gam = val(*gamma);
            let mut sum_dy = vec![0.0; channels];
            let mut sum_dy_xhat = vec![0.0; channels];
            for b in 0..batch {
                for c in 0..channels {
                    for p in 0..plane {
                        let i = idx(b, c, p);
                        sum_dy[c] += g[i];
                        sum_dy_xhat[c] += g[i] * xhat[i];
                    }
                }
            }
            accumulate(nodes, grads, *gamma, |gg| add_into(gg, &sum_dy_xhat));
            accumulate(nodes, grads, *beta, |gb| add_into(gb, &sum_dy));
            let n = (batch * plane) as f64;
            accumulate(nodes, grads, *x, |gx| {
                for b in 0..batch {
                    for c in 0..channels {
                        for p in 0..plane {
                            let i = idx(b, c, p);
                            gx[i] += if *train {
                                gam[c] * inv_std[c] / n
                                    * (n * g[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c])
                            } else {
                                gam[c] * inv_std[c] * g[i]
                            };
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s)
            });
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| {
                for ((d, s), o) in ga.iter_mut().zip(g).zip(db) {
                    *d += s * o;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((d, s), o) in gb.iter_mut().zip(g).zip(da) {
                    *d += s * o;
                }
            });
        }
        Op::Scale(x, s) => {
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, v)| *d += v * s)
            });
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            accumulate(nodes, grads, *x, |gx| {
                for ((d, v), y) in gx.iter_mut().zip(g).zip(y) {
                    *d += v * y * (1.0 - y);
                }
            });
        }
        Op::Silu(x) => {
            let xs = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for ((d, v), &z) in gx.iter_mut().zip(g).zip(xs) {
                    let s = sigmoid(z);
                    *d += v * s * (1.0 + z * (1.0 - s));
                }
            });
        }
        Op::BceWithLogits { x, target } => {
            let xs = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for (((d, v), &z), t) in gx.iter_mut().zip(g).zip(xs).zip(target) {
                    *d += v * (sigmoid(z) - t);
                }
            });
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().for_each(|d| *d += g[0])
            });
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |gx| add_into(gx, g)),
        Op::Permute { x, perm } => {
            let gt =
                Tensor::new(node.value.shape(), g.to_vec()).expect("gradient matches value shape");
            let back = gt
                .permute(&inverse_perm(perm))
                .expect("inverse of a valid permutation");
            accumulate(nodes, grads, *x, |gx| add_into(gx, back.data()));
        }
        Op::Slice {
            x,
            outer,
            axis_len,
            inner,
            offset,
            len,
        } => {
            accumulate(nodes, grads, *x, |gx| {
                for o in 0..*outer {
                    let dst = (o * axis_len + offset) * inner;
                    let src = o * len * inner;
                    add_into(&mut gx[dst..dst + len * inner], &g[src..src + len * inner]);
                }
            });
        }
        Op::Concat {
            parts,
            outer,
            axis_len,
            inner,
        } => {
            let mut offset = 0;
            for &(p, len) in parts {
                accumulate(nodes, grads, p, |gp| {
                    for o in 0..*outer {
                        let src = (o * axis_len + offset) * inner;
                        let dst = o * len * inner;
                        add_into(&mut gp[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
                offset += len;
            }
        }
    }
}
