//! Raw numeric kernels behind the tape operations.

use super::{Result, TensorError};

/// `c = a · b` (or `c += a · b` when `accumulate`), where `a` is `m×k` and `b`
/// is `k×n` after the optional transposes. Storage is row-major in all cases:
/// a transposed `a` is stored as `k×m`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// Fully resolved sizes of one conv2d call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn resolve(x: &[usize], w: &[usize], geom: ConvGeometry) -> Result<Self> {
        let invalid = |msg: String| TensorError::Invalid { op: "conv2d", msg };
        if x.len() != 4 || w.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if geom.stride == 0 || geom.groups == 0 {
            return Err(invalid(format!(
                "stride {} and groups {} must be positive",
                geom.stride, geom.groups
            )));
        }
        let (batch, c_in, h, wd) = (x[0], x[1], x[2], x[3]);
        let (c_out, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
        if c_in % geom.groups != 0 || c_out % geom.groups != 0 {
            return Err(invalid(format!(
                "channels in {c_in} / out {c_out} not divisible by groups {}",
                geom.groups
            )));
        }
        if cin_g != c_in / geom.groups {
            return Err(invalid(format!(
                "weight expects {cin_g} input channels per group, input gives {}",
                c_in / geom.groups
            )));
        }
        let (hp, wp) = (h + 2 * geom.padding, wd + 2 * geom.padding);
        if kh > hp || kw > wp {
            return Err(invalid(format!(
                "kernel {kh}x{kw} larger than padded input {hp}x{wp}"
            )));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            h_out: (hp - kh) / geom.stride + 1,
            w_out: (wp - kw) / geom.stride + 1,
            geom,
        })
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.geom.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.geom.groups
    }

    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.h_out, self.w_out]
    }

    /// Visits (column row, output position, input offset) for every in-bounds
    /// tap of one group of one image. `input` offsets are relative to the
    /// group's first channel.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = self.geom.padding as isize;
        let stride = self.geom.stride as isize;
        for c in 0..self.cin_g() {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.h_out {
                        let iy = oy as isize * stride + ky as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let ix = ox as isize * stride + kx as isize - pad;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let input = (c * self.h + iy as usize) * self.w + ix as usize;
                            f(row, oy * self.w_out + ox, input);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x_group: &[f64], col: &mut [f64]) {
        col.fill(0.0);
        let p = self.positions();
        self.for_each_tap(|row, pos, input| col[row * p + pos] = x_group[input]);
    }

    fn col2im(&self, col: &[f64], dx_group: &mut [f64]) {
        let p = self.positions();
        self.for_each_tap(|row, pos, input| dx_group[input] += col[row * p + pos]);
    }
}

pub(crate) fn conv2d_forward(d: &ConvDims, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (p, patch, cin_g, cout_g) = (d.positions(), d.patch(), d.cin_g(), d.cout_g());
    let mut out = vec![0.0; d.batch * d.c_out * p];
    let mut col = vec![0.0; patch * p];
    let x_img = d.c_in * d.h * d.w;
    for b in 0..d.batch {
        for g in 0..d.geom.groups {
            let xs = b * x_img + g * cin_g * d.h * d.w;
            d.im2col(&x[xs..xs + cin_g * d.h * d.w], &mut col);
            let ws = g * cout_g * patch;
            let os = (b * d.c_out + g * cout_g) * p;
            gemm(
                cout_g,
                patch,
                p,
                &w[ws..ws + cout_g * patch],
                false,
                &col,
                false,
                &mut out[os..os + cout_g * p],
                false,
            );
        }
        if let Some(bias) = bias {
            for c in 0..d.c_out {
                let os = (b * d.c_out + c) * p;
                out[os..os + p].iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    }
    out
}

/// Gradients of conv2d w.r.t. input, weight and bias (each only if requested).
pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    d: &ConvDims,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (p, patch, cin_g, cout_g) = (d.positions(), d.patch(), d.cin_g(), d.cout_g());
    let x_img = d.c_in * d.h * d.w;
    let mut dx = need.0.then(|| vec![0.0; x.len()]);
    let mut dw = need.1.then(|| vec![0.0; w.len()]);
    let mut col = vec![0.0; patch * p];
    for b in 0..d.batch {
        for g in 0..d.geom.groups {
            let os = (b * d.c_out + g * cout_g) * p;
            let dy_g = &dy[os..os + cout_g * p];
            let ws = g * cout_g * patch;
            let xs = b * x_img + g * cin_g * d.h * d.w;
            if let Some(dw) = dw.as_mut() {
                d.im2col(&x[xs..xs + cin_g * d.h * d.w], &mut col);
                gemm(
                    cout_g,
                    p,
                    patch,
                    dy_g,
                    false,
                    &col,
                    true,
                    &mut dw[ws..ws + cout_g * patch],
                    true,
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    patch,
                    cout_g,
                    p,
                    &w[ws..ws + cout_g * patch],
                    true,
                    dy_g,
                    false,
                    &mut col,
                    false,
                );
                d.col2im(&col, &mut dx[xs..xs + cin_g * d.h * d.w]);
            }
        }
    }
    let db = need.2.then(|| {
        let mut db = vec![0.0; d.c_out];
        for b in 0..d.batch {
            for (c, acc) in db.iter_mut().enumerate() {
                let os = (b * d.c_out + c) * p;
                *acc += dy[os..os + p].iter().sum::<f64>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}
