//! Primitive tensor operations and their vector-Jacobian products.
//!
//! Elementwise binaries support equal shapes plus scalar broadcast (either
//! side of length 1); everything else is explicit about its shape contract.

use super::{make_op, Result, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Equal,
    AScalar,
    BScalar,
}

fn broadcast_kind<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, op: &str) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Equal)
    } else if a.len() == 1 {
        Ok(Bcast::AScalar)
    } else if b.len() == 1 {
        Ok(Bcast::BScalar)
    } else {
        Err(TensorError::ShapeMismatch(format!(
            "{op}: {:?} vs {:?} (only equal shapes or scalar broadcast)",
            a.shape(),
            b.shape()
        )))
    }
}

/// Elementwise binary with scalar broadcast. `dfa`/`dfb` give the local
/// partials as functions of the two operand values.
fn binary_ew<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    op: &'static str,
    f: fn(S, S) -> S,
    dfa: fn(S, S) -> S,
    dfb: fn(S, S) -> S,
) -> Result<Tensor<S>> {
    let kind = broadcast_kind(a, b, op)?;
    let (ad, bd) = (a.data_ref(), b.data_ref());
    let (shape, data): (Vec<usize>, Vec<S>) = match kind {
        Bcast::Equal => (
            a.shape().to_vec(),
            ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Bcast::AScalar => {
            let x = ad[0];
            (b.shape().to_vec(), bd.iter().map(|&y| f(x, y)).collect())
        }
        Bcast::BScalar => {
            let y = bd[0];
            (a.shape().to_vec(), ad.iter().map(|&x| f(x, y)).collect())
        }
    };
    drop(ad);
    drop(bd);
    Ok(make_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        move |ctx| {
            let ad = ctx.parents[0].data_ref();
            let bd = ctx.parents[1].data_ref();
            let g = ctx.out_grad;
            match kind {
                Bcast::Equal => {
                    ctx.add_to(0, |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * dfa(ad[i], bd[i]);
                        }
                    });
                    ctx.add_to(1, |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * dfb(ad[i], bd[i]);
                        }
                    });
                }
                Bcast::AScalar => {
                    let x = ad[0];
                    ctx.add_to(0, |buf| {
                        let mut acc = S::zero();
                        for i in 0..g.len() {
                            acc += g[i] * dfa(x, bd[i]);
                        }
                        buf[0] += acc;
                    });
                    ctx.add_to(1, |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * dfb(x, bd[i]);
                        }
                    });
                }
                Bcast::BScalar => {
                    let y = bd[0];
                    ctx.add_to(0, |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * dfa(ad[i], y);
                        }
                    });
                    ctx.add_to(1, |buf| {
                        let mut acc = S::zero();
                        for i in 0..g.len() {
                            acc += g[i] * dfb(ad[i], y);
                        }
                        buf[0] += acc;
                    });
                }
            }
        },
    ))
}

/// Elementwise unary; `df` sees the input and output values.
fn unary_ew<S: Scalar>(x: &Tensor<S>, f: fn(S) -> S, df: fn(S, S) -> S) -> Tensor<S> {
    let data: Vec<S> = x.data_ref().iter().map(|&v| f(v)).collect();
    make_op(x.shape().to_vec(), data, vec![x.clone()], move |ctx| {
        let xd = ctx.parents[0].data_ref();
        let (g, y) = (ctx.out_grad, ctx.out_data);
        ctx.add_to(0, |buf| {
            for i in 0..g.len() {
                buf[i] += g[i] * df(xd[i], y[i]);
            }
        });
    })
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary_ew(self, other, "add", |a, b| a + b, |_, _| S::one(), |_, _| S::one())
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary_ew(
            self,
            other,
            "sub",
            |a, b| a - b,
            |_, _| S::one(),
            |_, _| -S::one(),
        )
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary_ew(self, other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary_ew(
            self,
            other,
            "div",
            |a, b| a / b,
            |_, b| S::one() / b,
            |a, b| -a / (b * b),
        )
    }

    /// max(a, b); on ties the gradient goes to `a`.
    pub fn maximum(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary_ew(
            self,
            other,
            "maximum",
            |a, b| a.max(b),
            |a, b| if a >= b { S::one() } else { S::zero() },
            |a, b| if a >= b { S::zero() } else { S::one() },
        )
    }

    /// min(a, b); on ties the gradient goes to `a`.
    pub fn minimum(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary_ew(
            self,
            other,
            "minimum",
            |a, b| a.min(b),
            |a, b| if a <= b { S::one() } else { S::zero() },
            |a, b| if a <= b { S::zero() } else { S::one() },
        )
    }

    pub fn neg(&self) -> Tensor<S> {
        unary_ew(self, |v| -v, |_, _| -S::one())
    }

    pub fn relu(&self) -> Tensor<S> {
        unary_ew(
            self,
            |v| v.max(S::zero()),
            |x, _| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        unary_ew(
            self,
            |v| S::one() / (S::one() + (-v).exp()),
            |_, y| y * (S::one() - y),
        )
    }

    pub fn abs(&self) -> Tensor<S> {
        unary_ew(
            self,
            |v| v.abs(),
            |x, _| {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    /// Multiply by a compile-time constant (no graph node for the constant).
    pub fn scale(&self, c: S) -> Tensor<S> {
        let data: Vec<S> = self.data_ref().iter().map(|&v| v * c).collect();
        make_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            let g = ctx.out_grad;
            ctx.add_to(0, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * c;
                }
            });
        })
    }

    pub fn add_const(&self, c: S) -> Tensor<S> {
        let data: Vec<S> = self.data_ref().iter().map(|&v| v + c).collect();
        make_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            let g = ctx.out_grad;
            ctx.add_to(0, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i];
                }
            });
        })
    }

    /// max(x, c); the gradient passes only where x strictly exceeds c.
    pub fn clamp_min(&self, c: S) -> Tensor<S> {
        let data: Vec<S> = self.data_ref().iter().map(|&v| v.max(c)).collect();
        make_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            let xd = ctx.parents[0].data_ref();
            let g = ctx.out_grad;
            ctx.add_to(0, |buf| {
                for i in 0..g.len() {
                    if xd[i] > c {
                        buf[i] += g[i];
                    }
                }
            });
        })
    }

    /// Full reduction to a scalar.
    pub fn sum(&self) -> Tensor<S> {
        let total: S = self.data_ref().iter().copied().sum();
        make_op(vec![1], vec![total], vec![self.clone()], |ctx| {
            let g = ctx.out_grad[0];
            ctx.add_to(0, |buf| {
                for v in buf.iter_mut() {
                    *v += g;
                }
            });
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            )));
        }
        let data = self.data_vec();
        Ok(make_op(shape, data, vec![self.clone()], |ctx| {
            let g = ctx.out_grad;
            ctx.add_to(0, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i];
                }
            });
        }))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor<S>> {
        let &[r, c] = self.shape() else {
            return Err(TensorError::ShapeMismatch(format!(
                "transpose: expected 2-D, got {:?}",
                self.shape()
            )));
        };
        let src = self.data_ref();
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Ok(make_op(vec![c, r], data, vec![self.clone()], move |ctx| {
            let g = ctx.out_grad;
            ctx.add_to(0, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            });
        }))
    }

    /// Columns `[start, start + len)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let &[r, c] = self.shape() else {
            return Err(TensorError::ShapeMismatch(format!(
                "slice_cols: expected 2-D, got {:?}",
                self.shape()
            )));
        };
        if start + len > c {
            return Err(TensorError::ShapeMismatch(format!(
                "slice_cols: columns {start}..{} out of 0..{c}",
                start + len
            )));
        }
        let src = self.data_ref();
        let mut data = vec![S::zero(); r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        drop(src);
        Ok(make_op(vec![r, len], data, vec![self.clone()], move |ctx| {
            let g = ctx.out_grad;
            ctx.add_to(0, |buf| {
                for i in 0..r {
                    for j in 0..len {
                        buf[i * c + start + j] += g[i * len + j];
                    }
                }
            });
        }))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = parts[0].shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let &[r, c] = p.shape() else {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_cols: expected 2-D, got {:?}",
                    p.shape()
                )));
            };
            if r != rows {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_cols: row mismatch {r} vs {rows}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![S::zero(); rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = p.data_ref();
            for i in 0..rows {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let widths_b = widths.clone();
        Ok(make_op(
            vec![rows, total],
            data,
            parts.to_vec(),
            move |ctx| {
                let g = ctx.out_grad;
                let mut offset = 0;
                for (k, &w) in widths_b.iter().enumerate() {
                    ctx.add_to(k, |buf| {
                        for i in 0..rows {
                            for j in 0..w {
                                buf[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            },
        ))
    }

    /// Crop a `[c, h, w]` tensor to the window starting at `(y0, x0)`.
    pub fn crop_spatial(&self, y0: usize, x0: usize, kh: usize, kw: usize) -> Result<Tensor<S>> {
        let &[c, h, w] = self.shape() else {
            return Err(TensorError::ShapeMismatch(format!(
                "crop_spatial: expected [c,h,w], got {:?}",
                self.shape()
            )));
        };
        if y0 + kh > h || x0 + kw > w {
            return Err(TensorError::ShapeMismatch(format!(
                "crop_spatial: window {kh}x{kw}@({y0},{x0}) outside {h}x{w}"
            )));
        }
        let src = self.data_ref();
        let mut data = vec![S::zero(); c * kh * kw];
        for ci in 0..c {
            for r in 0..kh {
                let s0 = ci * h * w + (y0 + r) * w + x0;
                data[(ci * kh + r) * kw..(ci * kh + r) * kw + kw]
                    .copy_from_slice(&src[s0..s0 + kw]);
            }
        }
        drop(src);
        Ok(make_op(
            vec![c, kh, kw],
            data,
            vec![self.clone()],
            move |ctx| {
                let g = ctx.out_grad;
                ctx.add_to(0, |buf| {
                    for ci in 0..c {
                        for r in 0..kh {
                            for q in 0..kw {
                                buf[ci * h * w + (y0 + r) * w + x0 + q] +=
                                    g[(ci * kh + r) * kw + q];
                            }
                        }
                    }
                });
            },
        ))
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax_last(&self) -> Tensor<S> {
        let d = *self.shape().last().expect("softmax needs at least 1-D");
        let src = self.data_ref();
        let rows = src.len() / d;
        let mut data = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let out = &mut data[r * d..(r + 1) * d];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                total += e;
            }
            let inv = S::one() / total;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        drop(src);
        make_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            let (g, y) = (ctx.out_grad, ctx.out_data);
            ctx.add_to(0, |buf| {
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        buf[r * d + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        })
    }

    /// Matrix product of 2-D tensors `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let &[m, k] = self.shape() else {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul: lhs must be 2-D, got {:?}",
                self.shape()
            )));
        };
        let &[k2, n] = other.shape() else {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul: rhs must be 2-D, got {:?}",
                other.shape()
            )));
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul: inner extents {k} vs {k2}"
            )));
        }
        let data = mm(&self.data_ref(), &other.data_ref(), m, k, n);
        Ok(make_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            move |ctx| {
                let g = ctx.out_grad;
                {
                    let bd = ctx.parents[1].data_ref();
                    let da = mm_a_bt(g, &bd, m, n, k);
                    drop(bd);
                    ctx.add_to(0, |buf| {
                        for (o, v) in buf.iter_mut().zip(&da) {
                            *o += *v;
                        }
                    });
                }
                {
                    let ad = ctx.parents[0].data_ref();
                    let db = mm_at_b(&ad, g, m, k, n);
                    drop(ad);
                    ctx.add_to(1, |buf| {
                        for (o, v) in buf.iter_mut().zip(&db) {
                            *o += *v;
                        }
                    });
                }
            },
        ))
    }

    /// Add a bias row-vector `[c]` to every row of a 2-D tensor `[r,c]`.
    pub fn add_row_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let &[r, c] = self.shape() else {
            return Err(TensorError::ShapeMismatch(format!(
                "add_row_bias: expected 2-D, got {:?}",
                self.shape()
            )));
        };
        if bias.shape() != [c] {
            return Err(TensorError::ShapeMismatch(format!(
                "add_row_bias: bias {:?} vs row width {c}",
                bias.shape()
            )));
        }
        let src = self.data_ref();
        let bd = bias.data_ref();
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = src[i * c + j] + bd[j];
            }
        }
        drop(src);
        drop(bd);
        Ok(make_op(
            vec![r, c],
            data,
            vec![self.clone(), bias.clone()],
            move |ctx| {
                let g = ctx.out_grad;
                ctx.add_to(0, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i];
                    }
                });
                ctx.add_to(1, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += g[i * c + j];
                        }
                    }
                });
            },
        ))
    }
}

/// `[m,k] x [k,n]` row-major product.
pub(crate) fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `A x B^T` with A `[m,k]`, B `[n,k]` -> `[m,n]`.
fn mm_a_bt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `A^T x B` with A `[m,k]`, B `[m,n]` -> `[k,n]`.
fn mm_at_b<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let crow = &mut c[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Gather conv patches: output `[cin*kh*kw, ho*wo]` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<S> {
    let cols = ho * wo;
    let mut col = vec![S::zero(); cin * kh * kw * cols];
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * cols;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        col[row + oy * wo + ox] = plane[iy * w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the column matrix back onto the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    col: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [S],
) {
    let cols = ho * wo;
    for ci in 0..cin {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * cols;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        plane[iy * w + ix as usize] += col[row + oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// 2-D convolution with zero padding: input `[cin,h,w]`, kernel
/// `[cout,cin,kh,kw]`, optional bias `[cout]`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    assert!(stride >= 1, "conv stride must be >= 1");
    let &[cin, h, w] = input.shape() else {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d: input must be [c,h,w], got {:?}",
            input.shape()
        )));
    };
    let &[cout, kcin, kh, kw] = kernel.shape() else {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d: kernel must be [cout,cin,kh,kw], got {:?}",
            kernel.shape()
        )));
    };
    if kcin != cin {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d: kernel cin {kcin} vs input cin {cin}"
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: bias {:?} vs cout {cout}",
                b.shape()
            )));
        }
    }
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(w, kw, stride, pad);
    let cols = ho * wo;
    let kk = cin * kh * kw;

    let col = im2col(&input.data_ref(), cin, h, w, kh, kw, stride, pad, ho, wo);
    let mut data = mm(&kernel.data_ref(), &col, cout, kk, cols);
    if let Some(b) = bias {
        let bd = b.data_ref();
        for co in 0..cout {
            let v = bd[co];
            for o in &mut data[co * cols..(co + 1) * cols] {
                *o += v;
            }
        }
    }

    let mut parents = vec![input.clone(), kernel.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Ok(make_op(vec![cout, ho, wo], data, parents, move |ctx| {
        let g = ctx.out_grad; // [cout, ho*wo]
        // dW = G x col^T (col recomputed from the saved input)
        {
            let xd = ctx.parents[0].data_ref();
            let col = im2col(&xd, cin, h, w, kh, kw, stride, pad, ho, wo);
            drop(xd);
            let dw = mm_a_bt(g, &col, cout, cols, kk);
            ctx.add_to(1, |buf| {
                for (o, v) in buf.iter_mut().zip(&dw) {
                    *o += *v;
                }
            });
        }
        // dX = col2im(W^T x G)
        {
            let wd = ctx.parents[1].data_ref();
            let dcol = mm_at_b(&wd, g, cout, kk, cols);
            drop(wd);
            ctx.add_to(0, |buf| {
                col2im(&dcol, cin, h, w, kh, kw, stride, pad, ho, wo, buf);
            });
        }
        if has_bias {
            ctx.add_to(2, |buf| {
                for co in 0..cout {
                    let mut acc = S::zero();
                    for o in 0..cols {
                        acc += g[co * cols + o];
                    }
                    buf[co] += acc;
                }
            });
        }
    }))
}

/// Depth-wise 2-D cross-correlation: each channel of `search` is correlated
/// with the matching channel of `template`. With `pad = (K-1)/2` and odd K
/// the output grid equals the search grid.
pub fn depthwise_xcorr<S: Scalar>(
    search: &Tensor<S>,
    template: &Tensor<S>,
    pad: usize,
) -> Result<Tensor<S>> {
    let &[c, h, w] = search.shape() else {
        return Err(TensorError::ShapeMismatch(format!(
            "depthwise_xcorr: search must be [c,h,w], got {:?}",
            search.shape()
        )));
    };
    let &[tc, kh, kw] = template.shape() else {
        return Err(TensorError::ShapeMismatch(format!(
            "depthwise_xcorr: template must be [c,k,k], got {:?}",
            template.shape()
        )));
    };
    if tc != c {
        return Err(TensorError::ShapeMismatch(format!(
            "depthwise_xcorr: channels {tc} vs {c}"
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(TensorError::ShapeMismatch(format!(
            "depthwise_xcorr: padded search {}x{} smaller than template {kh}x{kw}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let ho = h + 2 * pad - kh + 1;
    let wo = w + 2 * pad - kw + 1;

    let xd = search.data_ref();
    let td = template.data_ref();
    let mut data = vec![S::zero(); c * ho * wo];
    for ci in 0..c {
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        let ker = &td[ci * kh * kw..(ci + 1) * kh * kw];
        let out = &mut data[ci * ho * wo..(ci + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = S::zero();
                for ki in 0..kh {
                    let iy = (oy + ki) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let r = iy as usize * w;
                    for kj in 0..kw {
                        let ix = (ox + kj) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        acc += plane[r + ix as usize] * ker[ki * kw + kj];
                    }
                }
                out[oy * wo + ox] = acc;
            }
        }
    }
    drop(xd);
    drop(td);

    Ok(make_op(
        vec![c, ho, wo],
        data,
        vec![search.clone(), template.clone()],
        move |ctx| {
            let g = ctx.out_grad;
            // dSearch[c,iy,ix] += sum_{ki,kj} G[c, iy-ki+pad, ix-kj+pad] * T[c,ki,kj]
            {
                let td = ctx.parents[1].data_ref();
                ctx.add_to(0, |buf| {
                    for ci in 0..c {
                        let ker = &td[ci * kh * kw..(ci + 1) * kh * kw];
                        let gp = &g[ci * ho * wo..(ci + 1) * ho * wo];
                        let plane = &mut buf[ci * h * w..(ci + 1) * h * w];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = gp[oy * wo + ox];
                                if gv == S::zero() {
                                    continue;
                                }
                                for ki in 0..kh {
                                    let iy = (oy + ki) as i64 - pad as i64;
                                    if iy < 0 || iy >= h as i64 {
                                        continue;
                                    }
                                    let r = iy as usize * w;
                                    for kj in 0..kw {
                                        let ix = (ox + kj) as i64 - pad as i64;
                                        if ix < 0 || ix >= w as i64 {
                                            continue;
                                        }
                                        plane[r + ix as usize] += gv * ker[ki * kw + kj];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            // dTemplate[c,ki,kj] += sum_{oy,ox} G[c,oy,ox] * X[c, oy+ki-pad, ox+kj-pad]
            {
                let xd = ctx.parents[0].data_ref();
                ctx.add_to(1, |buf| {
                    for ci in 0..c {
                        let plane = &xd[ci * h * w..(ci + 1) * h * w];
                        let gp = &g[ci * ho * wo..(ci + 1) * ho * wo];
                        let ker = &mut buf[ci * kh * kw..(ci + 1) * kh * kw];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = gp[oy * wo + ox];
                                if gv == S::zero() {
                                    continue;
                                }
                                for ki in 0..kh {
                                    let iy = (oy + ki) as i64 - pad as i64;
                                    if iy < 0 || iy >= h as i64 {
                                        continue;
                                    }
                                    let r = iy as usize * w;
                                    for kj in 0..kw {
                                        let ix = (ox + kj) as i64 - pad as i64;
                                        if ix < 0 || ix >= w as i64 {
                                            continue;
                                        }
                                        ker[ki * kw + kj] += gv * plane[r + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    #[test]
    fn matmul_identity_and_hand_sum() {
        let a = Tensor::constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = Tensor::constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&eye).unwrap().data_vec(), a.data_vec());
        let ones = Tensor::constant(vec![2, 1], vec![1.0, 1.0]);
        assert_eq!(a.matmul(&ones).unwrap().data_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = Tensor::constant(vec![2], vec![0.0, 0.0]);
        assert_eq!(x.softmax_last().data_vec(), vec![0.5, 0.5]);
        let big = Tensor::<f64>::constant(vec![2], vec![1000.0, 0.0]);
        let y = big.softmax_last().data_vec();
        assert!(y[0] > 1.0 - 1e-12 && y[1] < 1e-12);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn elementwise_basics() {
        let x = Tensor::constant(vec![2], vec![-1.0, 2.0]);
        assert_eq!(x.relu().data_vec(), vec![0.0, 2.0]);
        let z = Tensor::constant(vec![1], vec![0.0]);
        assert_eq!(z.sigmoid().data_vec(), vec![0.5]);
        let zero = Tensor::zeros(vec![2]);
        assert_eq!(x.add(&zero).unwrap().data_vec(), x.data_vec());
    }

    #[test]
    fn scalar_broadcast_add_and_incompatible_shapes() {
        let x = Tensor::constant(vec![3], vec![1.0, 2.0, 3.0]);
        let c = Tensor::scalar(10.0);
        assert_eq!(x.add(&c).unwrap().data_vec(), vec![11.0, 12.0, 13.0]);
        let bad = Tensor::<f64>::zeros(vec![2]);
        assert!(x.add(&bad).is_err());
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let x = Tensor::constant(vec![1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let k = Tensor::constant(vec![1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.data_vec(), x.data_vec());
        assert_eq!(y.shape(), &[1, 3, 3]);
    }

    #[test]
    fn conv2d_zero_kernel_gives_zero_output() {
        let x = Tensor::constant(vec![2, 4, 4], vec![1.0; 32]);
        let k = Tensor::zeros(vec![3, 2, 3, 3]);
        let y = conv2d(&x, &k, None, 2, 1).unwrap();
        assert!(y.data_vec().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[3, 2, 2]);
    }

    #[test]
    fn xcorr_zero_template_gives_zero_response() {
        let x = Tensor::constant(vec![2, 5, 5], (0..50).map(|v| v as f64).collect());
        let t = Tensor::zeros(vec![2, 3, 3]);
        let y = depthwise_xcorr(&x, &t, 1).unwrap();
        assert!(y.data_vec().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[2, 5, 5]);
    }

    #[test]
    fn xcorr_peaks_where_template_matches() {
        // search contains an exact copy of the template at offset (1,2)
        let mut search = vec![0.0; 6 * 6];
        let template = [1.0, 2.0, 3.0, 4.0];
        for (idx, &v) in template.iter().enumerate() {
            let (dy, dx) = (idx / 2, idx % 2);
            search[(1 + dy) * 6 + (2 + dx)] = v;
        }
        let x = Tensor::constant(vec![1, 6, 6], search);
        let t = Tensor::constant(vec![1, 2, 2], template.to_vec());
        let y = depthwise_xcorr(&x, &t, 0).unwrap();
        let data = y.data_vec();
        let (wo, _) = (5, 5);
        let argmax = data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!((argmax / wo, argmax % wo), (1, 2));
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let x = Tensor::constant(vec![2, 4], (0..8).map(|v| v as f64).collect());
        let a = x.slice_cols(0, 2).unwrap();
        let b = x.slice_cols(2, 2).unwrap();
        let back = Tensor::concat_cols(&[a, b]).unwrap();
        assert_eq!(back.data_vec(), x.data_vec());
    }

    #[test]
    fn transpose_roundtrip() {
        let x = Tensor::constant(vec![2, 3], (0..6).map(|v| v as f64).collect());
        let y = x.transpose().unwrap().transpose().unwrap();
        assert_eq!(y.data_vec(), x.data_vec());
        assert_eq!(x.transpose().unwrap().shape(), &[3, 2]);
    }
}
