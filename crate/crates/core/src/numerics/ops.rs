//! Forward and backward rules for every graph operation.
//!
//! Shape rules:
//!
//! | op | inputs | output |
//! |----|--------|--------|
//! | `Affine` | `x: N×I`, `w: I×O`, `b: O` | `N×O` |
//! | `Conv2d` | `x: N×C×H×W`, `w: O×C×KH×KW`, `b: O` | `N×O×OH×OW` |
//! | `MaxPool` | `x: N×C×H×W` | `N×C×OH×OW` |
//! | `BatchNorm` | `x: N×C` or `N×C×H×W`, `γ: C`, `β: C` (+ `μ: C`, `σ²: C` in eval) | same as `x` |
//! | `Add`, `Mul` | two equal shapes | same |
//! | `Relu`, `Exp`, `Log`, `ScalarDiv` | any | same |
//! | `Sum(All)`, `Mean` | any | `1` |
//! | `Sum(Rows)`, `LogSumExpRows` | `N×M` | `N` |
//! | `L2NormalizeRows` | `N×D` | `N×D` |
//! | `MatMul` | `M×K`, `K×N` | `M×N` |
//! | `Transpose` | `M×N` | `N×M` |
//! | `SqEuclideanCdist` | `N×D`, `M×D` | `N×M` |
//! | `Reshape(s)` | any with equal element count | `s` |
//! | `SliceRows` | leading dim `≥ end` | leading dim `end − start` |

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeometry};
use super::tensor::{checked_numel, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    All,
    Rows,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Affine,
    Conv2d { stride: usize, padding: usize },
    Relu,
    MaxPool { size: usize, stride: usize },
    BatchNorm { eps: f64, training: bool },
    Add,
    Mul,
    ScalarDiv(f64),
    Exp,
    Log,
    Sum(Axis),
    Mean,
    L2NormalizeRows { eps: f64 },
    MatMul,
    Transpose,
    SqEuclideanCdist,
    Reshape(Vec<usize>),
    SliceRows { start: usize, end: usize },
    LogSumExpRows,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Affine => "affine",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::MaxPool { .. } => "max_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::ScalarDiv(_) => "scalar_div",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum(_) => "sum",
            Op::Mean => "mean",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::SqEuclideanCdist => "sq_euclidean_cdist",
            Op::Reshape(_) => "reshape",
            Op::SliceRows { .. } => "slice_rows",
            Op::LogSumExpRows => "logsumexp_rows",
        }
    }

    fn arity(&self) -> core::ops::RangeInclusive<usize> {
        match self {
            Op::Affine | Op::Conv2d { .. } => 3..=3,
            Op::BatchNorm { training: true, .. } => 3..=3,
            Op::BatchNorm { training: false, .. } => 5..=5,
            Op::Add | Op::Mul | Op::MatMul | Op::SqEuclideanCdist => 2..=2,
            _ => 1..=1,
        }
    }
}

/// Values cached by the forward pass for use in backward.
#[derive(Debug, Clone, Default)]
pub(crate) enum Saved {
    #[default]
    None,
    Argmax(Vec<usize>),
    BatchNorm {
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Norms(Vec<f64>),
}

fn mismatch(op: &Op, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op: op.name(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn dims2(op: &Op, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| mismatch(op, t.shape(), &[0, 0]))
}

fn dims4(op: &Op, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(mismatch(op, t.shape(), &[0, 0, 0, 0])),
    }
}

fn conv_geometry(op: &Op, x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<ConvGeometry> {
    let [_, c, h, wd] = dims4(op, x)?;
    let [_, wc, kh, kw] = dims4(op, w)?;
    if wc != c || stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(mismatch(op, x.shape(), w.shape()));
    }
    Ok(ConvGeometry {
        channels: c,
        height: h,
        width: wd,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (wd + 2 * padding - kw) / stride + 1,
    })
}

/// Channel layout of a batch-norm input: `(batch, channels, spatial)`.
fn bn_layout(op: &Op, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(mismatch(op, x.shape(), &[0, 0])),
    }
}

pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    if !op.arity().contains(&inputs.len()) {
        return Err(Error::invalid(
            "inputs",
            alloc::format!("{} expects {:?} inputs, got {}", op.name(), op.arity(), inputs.len()),
        ));
    }
    let out = match op {
        Op::Affine => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (n, i) = dims2(op, x)?;
            let (wi, o) = dims2(op, w)?;
            if wi != i {
                return Err(mismatch(op, x.shape(), w.shape()));
            }
            if b.shape() != [o] {
                return Err(mismatch(op, w.shape(), b.shape()));
            }
            let mut y = kernels::matmul(x.data(), w.data(), n, i, o);
            for row in y.chunks_mut(o) {
                for (v, bias) in row.iter_mut().zip(b.data()) {
                    *v += bias;
                }
            }
            Tensor::new([n, o], y)?
        }
        Op::Conv2d { stride, padding } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let g = conv_geometry(op, x, w, *stride, *padding)?;
            let n = x.shape()[0];
            let o = w.shape()[0];
            if b.shape() != [o] {
                return Err(mismatch(op, w.shape(), b.shape()));
            }
            let in_len = g.channels * g.height * g.width;
            let out_len = g.out_len();
            let mut y = Vec::with_capacity(n * o * out_len);
            for s in 0..n {
                let cols = kernels::im2col(&x.data()[s * in_len..(s + 1) * in_len], &g);
                let mut ys = kernels::matmul(w.data(), &cols, o, g.patch_len(), out_len);
                for (oc, chunk) in ys.chunks_mut(out_len).enumerate() {
                    let bias = b.data()[oc];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
                y.extend_from_slice(&ys);
            }
            Tensor::new([n, o, g.out_h, g.out_w], y)?
        }
        Op::Relu => inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::MaxPool { size, stride } => {
            let x = inputs[0];
            let [n, c, h, w] = dims4(op, x)?;
            if *size == 0 || *stride == 0 || h < *size || w < *size {
                return Err(mismatch(op, x.shape(), &[*size, *size]));
            }
            let oh = (h - size) / stride + 1;
            let ow = (w - size) / stride + 1;
            let mut y = Vec::with_capacity(n * c * oh * ow);
            let mut arg = Vec::with_capacity(n * c * oh * ow);
            for plane in 0..n * c {
                let base = plane * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = base + i * stride * w + j * stride;
                        for di in 0..*size {
                            for dj in 0..*size {
                                let idx = base + (i * stride + di) * w + j * stride + dj;
                                if x.data()[idx] > x.data()[best] {
                                    best = idx;
                                }
                            }
                        }
                        y.push(x.data()[best]);
                        arg.push(best);
                    }
                }
            }
            return Ok((Tensor::new([n, c, oh, ow], y)?, Saved::Argmax(arg)));
        }
        Op::BatchNorm { eps, training } => return batch_norm_forward(op, *eps, *training, inputs),
        Op::Add | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| if *op == Op::Add { x + y } else { x * y })
                .collect();
            Tensor::new(a.shape(), data)?
        }
        Op::ScalarDiv(d) => {
            if *d == 0.0 || !d.is_finite() {
                return Err(Error::invalid("divisor", "must be finite and non-zero"));
            }
            inputs[0].map(|v| v / d)
        }
        Op::Exp => inputs[0].map(libm::exp),
        Op::Log => inputs[0].map(libm::log),
        Op::Sum(Axis::All) => Tensor::scalar(inputs[0].data().iter().sum()),
        Op::Sum(Axis::Rows) => {
            let x = inputs[0];
            let (n, m) = dims2(op, x)?;
            let data = x.data().chunks(m).map(|r| r.iter().sum()).collect();
            Tensor::new([n], data)?
        }
        Op::Mean => {
            let x = inputs[0];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        Op::L2NormalizeRows { eps } => {
            let x = inputs[0];
            let (n, d) = dims2(op, x)?;
            let mut norms = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n * d);
            for row in x.data().chunks(d) {
                let norm = libm::sqrt(kernels::dot(row, row));
                norms.push(norm);
                let denom = if norm > *eps { norm } else { *eps };
                y.extend(row.iter().map(|v| v / denom));
            }
            return Ok((Tensor::new([n, d], y)?, Saved::Norms(norms)));
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = dims2(op, a)?;
            let (bk, n) = dims2(op, b)?;
            if k != bk {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            Tensor::new([m, n], kernels::matmul(a.data(), b.data(), m, k, n))?
        }
        Op::Transpose => {
            let (m, n) = dims2(op, inputs[0])?;
            Tensor::new([n, m], kernels::transpose(inputs[0].data(), m, n))?
        }
        Op::SqEuclideanCdist => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, d) = dims2(op, a)?;
            let (m, bd) = dims2(op, b)?;
            if d != bd {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                let ai = a.row(i);
                for j in 0..m {
                    out.push(ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum());
                }
            }
            Tensor::new([n, m], out)?
        }
        Op::Reshape(shape) => {
            let x = inputs[0];
            if checked_numel(shape)? != x.len() {
                return Err(mismatch(op, x.shape(), shape));
            }
            Tensor::new(shape.clone(), x.data().to_vec())?
        }
        Op::SliceRows { start, end } => {
            let x = inputs[0];
            let rows = x.shape()[0];
            if start >= end || *end > rows {
                return Err(mismatch(op, x.shape(), &[*start, *end]));
            }
            let stride = x.len() / rows;
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            Tensor::new(shape, x.data()[start * stride..end * stride].to_vec())?
        }
        Op::LogSumExpRows => {
            let x = inputs[0];
            let (n, m) = dims2(op, x)?;
            let data = x
                .data()
                .chunks(m)
                .map(|row| {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum())
                })
                .collect();
            Tensor::new([n], data)?
        }
    };
    Ok((out, Saved::None))
}

fn batch_norm_forward(op: &Op, eps: f64, training: bool, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let x = inputs[0];
    let (n, c, spatial) = bn_layout(op, x)?;
    for p in &inputs[1..] {
        if p.shape() != [c] {
            return Err(mismatch(op, x.shape(), p.shape()));
        }
    }
    if training && n < 2 {
        return Err(Error::invalid(
            "batch_norm",
            "training mode needs a batch of at least 2",
        ));
    }
    let count = (n * spatial) as f64;
    let (mean, var) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (idx, v) in x.data().iter().enumerate() {
            mean[(idx / spatial) % c] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (idx, v) in x.data().iter().enumerate() {
            let ch = (idx / spatial) % c;
            var[ch] += (v - mean[ch]) * (v - mean[ch]);
        }
        var.iter_mut().for_each(|s| *s /= count);
        (mean, var)
    } else {
        (inputs[3].data().to_vec(), inputs[4].data().to_vec())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
    let (gamma, beta) = (inputs[1].data(), inputs[2].data());
    let mut x_hat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for (idx, v) in x.data().iter().enumerate() {
        let ch = (idx / spatial) % c;
        let xh = (v - mean[ch]) * inv_std[ch];
        x_hat.push(xh);
        y.push(gamma[ch] * xh + beta[ch]);
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        Saved::BatchNorm {
            x_hat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Computes the gradient w.r.t. each input whose `needs` flag is set.
pub(crate) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    grad: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut res: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    match op {
        Op::Affine => {
            let (x, w) = (inputs[0], inputs[1]);
            let (n, i) = x.dims2().unwrap();
            let o = w.shape()[1];
            if needs[0] {
                res[0] = Some(kernels::matmul_nt(grad, w.data(), n, o, i));
            }
            if needs[1] {
                res[1] = Some(kernels::matmul_tn(x.data(), grad, n, i, o));
            }
            if needs[2] {
                res[2] = Some(column_sums(grad, o));
            }
        }
        Op::Conv2d { stride, padding } => {
            let (x, w) = (inputs[0], inputs[1]);
            let g = conv_geometry(op, x, w, *stride, *padding).expect("validated in forward");
            let n = x.shape()[0];
            let o = w.shape()[0];
            let in_len = g.channels * g.height * g.width;
            let out_len = g.out_len();
            let mut dx = if needs[0] { vec![0.0; x.len()] } else { Vec::new() };
            let mut dw = if needs[1] { vec![0.0; w.len()] } else { Vec::new() };
            let mut db = vec![0.0; o];
            for s in 0..n {
                let gs = &grad[s * o * out_len..(s + 1) * o * out_len];
                if needs[1] {
                    let cols = kernels::im2col(&x.data()[s * in_len..(s + 1) * in_len], &g);
                    let part = kernels::matmul_nt(gs, &cols, o, out_len, g.patch_len());
                    dw.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
                }
                if needs[0] {
                    let dcols = kernels::matmul_tn(w.data(), gs, o, g.patch_len(), out_len);
                    kernels::col2im_add(&dcols, &g, &mut dx[s * in_len..(s + 1) * in_len]);
                }
                for (oc, chunk) in gs.chunks(out_len).enumerate() {
                    db[oc] += chunk.iter().sum::<f64>();
                }
            }
            if needs[0] {
                res[0] = Some(dx);
            }
            if needs[1] {
                res[1] = Some(dw);
            }
            if needs[2] {
                res[2] = Some(db);
            }
        }
        Op::Relu => {
            res[0] = Some(
                inputs[0]
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            );
        }
        Op::MaxPool { .. } => {
            let Saved::Argmax(arg) = saved else {
                unreachable!("max_pool saves argmax")
            };
            let mut dx = vec![0.0; inputs[0].len()];
            for (g, &idx) in grad.iter().zip(arg) {
                dx[idx] += g;
            }
            res[0] = Some(dx);
        }
        Op::BatchNorm { eps, training } => {
            let Saved::BatchNorm { x_hat, inv_std, .. } = saved else {
                unreachable!("batch_norm saves statistics")
            };
            let x = inputs[0];
            let (n, c, spatial) = bn_layout(op, x).expect("validated in forward");
            let count = (n * spatial) as f64;
            let gamma = inputs[1].data();
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for (idx, g) in grad.iter().enumerate() {
                let ch = (idx / spatial) % c;
                sum_dy[ch] += g;
                sum_dy_xhat[ch] += g * x_hat[idx];
            }
            if needs[0] {
                let dx = grad
                    .iter()
                    .enumerate()
                    .map(|(idx, g)| {
                        let ch = (idx / spatial) % c;
                        if *training {
                            gamma[ch] * inv_std[ch] / count * (count * g - sum_dy[ch] - x_hat[idx] * sum_dy_xhat[ch])
                        } else {
                            g * gamma[ch] * inv_std[ch]
                        }
                    })
                    .collect();
                res[0] = Some(dx);
            }
            if needs[1] {
                res[1] = Some(sum_dy_xhat.clone());
            }
            if needs[2] {
                res[2] = Some(sum_dy.clone());
            }
            if !*training {
                if needs[3] {
                    res[3] = Some((0..c).map(|ch| -gamma[ch] * inv_std[ch] * sum_dy[ch]).collect());
                }
                if needs[4] {
                    // d x_hat / d var = -0.5 x_hat / (var + eps)
                    let var = inputs[4].data();
                    res[4] = Some(
                        (0..c)
                            .map(|ch| -0.5 * gamma[ch] * sum_dy_xhat[ch] / (var[ch] + eps))
                            .collect(),
                    );
                }
            }
        }
        Op::Add => {
            for k in 0..2 {
                if needs[k] {
                    res[k] = Some(grad.to_vec());
                }
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            if needs[0] {
                res[0] = Some(grad.iter().zip(b).map(|(g, y)| g * y).collect());
            }
            if needs[1] {
                res[1] = Some(grad.iter().zip(a).map(|(g, x)| g * x).collect());
            }
        }
        Op::ScalarDiv(d) => res[0] = Some(grad.iter().map(|g| g / d).collect()),
        Op::Exp => res[0] = Some(grad.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
        Op::Log => res[0] = Some(grad.iter().zip(inputs[0].data()).map(|(g, x)| g / x).collect()),
        Op::Sum(Axis::All) => res[0] = Some(vec![grad[0]; inputs[0].len()]),
        Op::Sum(Axis::Rows) => {
            let (_, m) = inputs[0].dims2().unwrap();
            res[0] = Some(grad.iter().flat_map(|g| core::iter::repeat_n(*g, m)).collect());
        }
        Op::Mean => {
            let len = inputs[0].len();
            res[0] = Some(vec![grad[0] / len as f64; len]);
        }
        Op::L2NormalizeRows { eps } => {
            let Saved::Norms(norms) = saved else {
                unreachable!("normalize saves norms")
            };
            let (_, d) = inputs[0].dims2().unwrap();
            let mut dx = Vec::with_capacity(inputs[0].len());
            for ((g_row, y_row), &norm) in grad.chunks(d).zip(out.data().chunks(d)).zip(norms) {
                if norm > *eps {
                    let proj = kernels::dot(y_row, g_row);
                    dx.extend(g_row.iter().zip(y_row).map(|(g, y)| (g - y * proj) / norm));
                } else {
                    dx.extend(g_row.iter().map(|g| g / eps));
                }
            }
            res[0] = Some(dx);
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.dims2().unwrap();
            let n = b.shape()[1];
            if needs[0] {
                res[0] = Some(kernels::matmul_nt(grad, b.data(), m, n, k));
            }
            if needs[1] {
                res[1] = Some(kernels::matmul_tn(a.data(), grad, m, k, n));
            }
        }
        Op::Transpose => {
            let (m, n) = inputs[0].dims2().unwrap();
            res[0] = Some(kernels::transpose(grad, n, m));
        }
        Op::SqEuclideanCdist => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, d) = a.dims2().unwrap();
            let m = b.shape()[0];
            let mut da = vec![0.0; n * d];
            let mut db = vec![0.0; m * d];
            for i in 0..n {
                let ai = a.row(i);
                for j in 0..m {
                    let g2 = 2.0 * grad[i * m + j];
                    let bj = b.row(j);
                    for t in 0..d {
                        let diff = g2 * (ai[t] - bj[t]);
                        da[i * d + t] += diff;
                        db[j * d + t] -= diff;
                    }
                }
            }
            if needs[0] {
                res[0] = Some(da);
            }
            if needs[1] {
                res[1] = Some(db);
            }
        }
        Op::Reshape(_) => res[0] = Some(grad.to_vec()),
        Op::SliceRows { start, .. } => {
            let x = inputs[0];
            let stride = x.len() / x.shape()[0];
            let mut dx = vec![0.0; x.len()];
            dx[start * stride..start * stride + grad.len()].copy_from_slice(grad);
            res[0] = Some(dx);
        }
        Op::LogSumExpRows => {
            let (_, m) = inputs[0].dims2().unwrap();
            let mut dx = Vec::with_capacity(inputs[0].len());
            for ((row, lse), g) in inputs[0].data().chunks(m).zip(out.data()).zip(grad) {
                dx.extend(row.iter().map(|v| g * libm::exp(v - lse)));
            }
            res[0] = Some(dx);
        }
    }
    for (r, need) in res.iter_mut().zip(needs) {
        if !need {
            *r = None;
        }
    }
    res
}

fn column_sums(grad: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in grad.chunks(cols) {
        out.iter_mut().zip(row).for_each(|(o, g)| *o += g);
    }
    out
}
