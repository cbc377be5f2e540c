//! Differentiable operations: forward methods on [`Tape`] plus the matching
//! vector-Jacobian products in [`backward_node`].

use super::gemm::gemm;
use super::tape::{Node, Tape, Var};
use super::{axis_extents, Tensor};
use crate::error::{Error, Result};

/// Zero padding applied by [`Tape::conv1d`] along the width axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// `K − 1` zeros in total, the extra one (for even `K`) on the right.
    Same,
    Explicit(usize, usize),
}

impl Padding {
    pub fn amounts(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let left = (kernel - 1) / 2;
                (left, kernel - 1 - left)
            }
            Padding::Explicit(l, r) => (l, r),
        }
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Elu(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Abs(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad_left: usize,
    },
    Normalize {
        x: Var,
        axis: usize,
        inv_std: Vec<f64>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    VarAxis {
        x: Var,
        axis: usize,
        mean: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        x: Var,
        axis: usize,
        before: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        w: Var,
    },
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _)
            | Relu(a)
            | Elu(a)
            | Exp(a)
            | Log(a)
            | Tanh(a)
            | Abs(a)
            | Transpose(a)
            | Reshape(a)
            | Sum(a)
            | Mean(a) => vec![*a],
            Softmax { x, .. }
            | Normalize { x, .. }
            | MeanAxis { x, .. }
            | VarAxis { x, .. }
            | Narrow { x, .. }
            | Pad { x, .. }
            | GatherRows { x, .. }
            | AvgPool { x, .. } => vec![*x],
            ScaleRows { x, w } => vec![*x, *w],
            Conv1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Concat { xs, .. } => xs.clone(),
        }
    }
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

/// Output shape for a binary op. The smaller operand may omit (or carry as
/// 1s) leading dimensions of the larger one and is then repeated.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (big, small) = if a.iter().product::<usize>() >= b.iter().product::<usize>() {
        (a, b)
    } else {
        (b, a)
    };
    let s = strip_leading_ones(small);
    if s.len() <= big.len() && big[big.len() - s.len()..] == *s {
        Ok(big.to_vec())
    } else {
        Err(Error::shapes(op, a, b))
    }
}

#[inline]
fn bidx(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        i % n
    }
}

fn axis_of(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        Err(Error::dim(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ))
    } else {
        Ok(())
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

/// im2col for a `[c_in × w]` input: row `c·K + k`, column `t` holds
/// `x[c, t·stride + k − pad_left]` (zero outside the input).
fn im2col(
    x: &[f64],
    c_in: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
    w_out: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c_in * k * w_out];
    for c in 0..c_in {
        let xrow = &x[c * w..(c + 1) * w];
        for kk in 0..k {
            let dst = &mut cols[(c * k + kk) * w_out..(c * k + kk + 1) * w_out];
            for (t, d) in dst.iter_mut().enumerate() {
                let pos = (t * stride + kk) as isize - pad_left as isize;
                if pos >= 0 && (pos as usize) < w {
                    *d = xrow[pos as usize];
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    dx: &mut [f64],
    c_in: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
    w_out: usize,
) {
    for c in 0..c_in {
        for kk in 0..k {
            let src = &cols[(c * k + kk) * w_out..(c * k + kk + 1) * w_out];
            for (t, s) in src.iter().enumerate() {
                let pos = (t * stride + kk) as isize - pad_left as isize;
                if pos >= 0 && (pos as usize) < w {
                    dx[c * w + pos as usize] += s;
                }
            }
        }
    }
}

impl Tape {
    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, av.shape(), bv.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let (na, nb) = (ad.len(), bd.len());
        let data = (0..n)
            .map(|i| f(ad[bidx(i, na)], bd[bidx(i, nb)]))
            .collect();
        Ok(self.push(Tensor::from_parts(shape, data), mk(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record_branches(a);
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.record_branches(a);
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self
            .value(a)
            .data()
            .iter()
            .find(|&&x| x.is_nan() || x <= 0.0)
        {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        axis_of("softmax", xv.shape(), axis)?;
        let (outer, n, inner) = axis_extents(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..n {
                    m = m.max(d[base + j * inner]);
                }
                let mut z = 0.0;
                for j in 0..n {
                    let e = (d[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    z += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= z;
                }
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shapes("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 {
            return Err(Error::dim(
                "transpose",
                format!("needs a matrix, got {:?}", av.shape()),
            ));
        }
        let t = av.transpose();
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let n: usize = shape.iter().product();
        if n != av.numel() || shape.contains(&0) {
            return Err(Error::shapes("reshape", av.shape(), shape));
        }
        let t = Tensor::from_parts(shape.to_vec(), av.data().to_vec());
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// 1-D cross-correlation of `x: [C_in × W]` with `w: [C_out × C_in × K]`,
    /// plus an optional per-output-channel bias `[C_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if stride == 0 {
            return Err(Error::usage("conv1d stride must be at least 1"));
        }
        if xv.ndim() != 2 || wv.ndim() != 3 || wv.shape()[1] != xv.shape()[0] {
            return Err(Error::shapes("conv1d", xv.shape(), wv.shape()));
        }
        let (c_in, width) = (xv.shape()[0], xv.shape()[1]);
        let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
        let (pl, pr) = padding.amounts(k);
        let padded = width + pl + pr;
        if k > padded {
            return Err(Error::dim(
                "conv1d",
                format!(
                    "kernel {k} wider than padded input {padded} (input {:?})",
                    xv.shape()
                ),
            ));
        }
        let w_out = (padded - k) / stride + 1;
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs.iter().product::<usize>() != c_out {
                return Err(Error::shapes("conv1d bias", bs, &[c_out]));
            }
        }
        let cols = im2col(xv.data(), c_in, width, k, stride, pl, w_out);
        let mut out = vec![0.0; c_out * w_out];
        gemm(
            c_out,
            c_in * k,
            w_out,
            wv.data(),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            for (row, &bias) in out.chunks_mut(w_out).zip(self.value(b).data()) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c_out, w_out], out),
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left: pl,
            },
        ))
    }

    /// `(x − mean) / sqrt(var + eps)` along `axis`, population statistics.
    pub fn normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        axis_of("normalize", xv.shape(), axis)?;
        let (outer, n, inner) = axis_extents(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![0.0; d.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mean = (0..n).map(|j| d[base + j * inner]).sum::<f64>() / n as f64;
                let var = (0..n)
                    .map(|j| (d[base + j * inner] - mean).powi(2))
                    .sum::<f64>()
                    / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    out[base + j * inner] = (d[base + j * inner] - mean) * inv;
                }
                inv_std.push(inv);
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Normalize { x, axis, inv_std },
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        axis_of("mean_axis", xv.shape(), axis)?;
        let (outer, n, inner) = axis_extents(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * n + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let shape = reduced_shape(xv.shape(), axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x, axis }))
    }

    /// Population variance along `axis` (divides by the count).
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        axis_of("var_axis", xv.shape(), axis)?;
        let (outer, n, inner) = axis_extents(xv.shape(), axis);
        let d = xv.data();
        let mut mean = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    mean[o * inner + i] += d[(o * n + j) * inner + i];
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] +=
                        (d[(o * n + j) * inner + i] - mean[o * inner + i]).powi(2);
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let shape = reduced_shape(xv.shape(), axis);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::VarAxis { x, axis, mean },
        ))
    }

    /// Mean and population variance along `axis`.
    pub fn moments(&mut self, x: Var, axis: usize) -> Result<(Var, Var)> {
        Ok((self.mean_axis(x, axis)?, self.var_axis(x, axis)?))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        axis_of("concat", &base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_rank = s.len() == base.len();
            if !same_rank
                || s.iter()
                    .enumerate()
                    .any(|(d, &n)| d != axis && n != base[d])
            {
                return Err(Error::shapes("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let vv = self.value(v);
                let n = vv.shape()[axis];
                out.extend_from_slice(&vv.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        axis_of("narrow", xv.shape(), axis)?;
        let (outer, n, inner) = axis_extents(xv.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} outside axis of length {n}", start + len),
            ));
        }
        let d = xv.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&d[s..s + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Narrow { x, axis, start },
        ))
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let xv = self.value(x);
        axis_of("pad", xv.shape(), axis)?;
        let (outer, n, inner) = axis_extents(xv.shape(), axis);
        let m = n + before + after;
        let d = xv.data();
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            out[dst..dst + n * inner].copy_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = m;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Pad { x, axis, before }))
    }

    /// Rows of a matrix selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return Err(Error::dim(
                "gather_rows",
                format!("needs a matrix, got {:?}", xv.shape()),
            ));
        }
        if idx.is_empty() {
            return Err(Error::usage("gather_rows with no indices"));
        }
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim(
                "gather_rows",
                format!("row {bad} out of range for {r} rows"),
            ));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Multiplies row `r` of matrix `x` by `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 2 || wv.numel() != xv.rows() {
            return Err(Error::shapes("scale_rows", xv.shape(), wv.shape()));
        }
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for (row, &s) in out.chunks_mut(c).zip(wv.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::ScaleRows { x, w }))
    }

    /// Average pooling along the last axis of a `[C × W]` matrix.
    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || kernel == 0 || stride == 0 {
            return Err(Error::usage(
                "avg_pool needs a matrix and positive kernel/stride",
            ));
        }
        let (c, w) = (xv.rows(), xv.cols());
        if w < kernel {
            return Err(Error::dim(
                "avg_pool",
                format!("width {w} shorter than kernel {kernel}"),
            ));
        }
        let w_out = (w - kernel) / stride + 1;
        let d = xv.data();
        let mut out = vec![0.0; c * w_out];
        for ch in 0..c {
            for t in 0..w_out {
                let s: f64 = d[ch * w + t * stride..ch * w + t * stride + kernel]
                    .iter()
                    .sum();
                out[ch * w_out + t] = s / kernel as f64;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, w_out], out),
            Op::AvgPool { x, kernel, stride },
        ))
    }
}

fn accum(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(e, x)| *e += x),
        slot @ None => {
            let shape = nodes[v.0].value.shape().to_vec();
            *slot = Some(Tensor::from_parts(shape, g));
        }
    }
}

/// Folds an output-sized gradient down to an operand of length `m` (the
/// identity when the operand was not broadcast).
fn fold(g: impl Iterator<Item = f64>, n: usize, m: usize) -> Vec<f64> {
    if m == n {
        return g.collect();
    }
    let mut out = vec![0.0; m];
    for (i, x) in g.enumerate() {
        out[i % m] += x;
    }
    out
}

pub(crate) fn backward_node(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let need = |v: Var| nodes[v.0].requires_grad;
    let gd = g.data();
    let n = gd.len();
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (na, nb) = (val(*a).numel(), val(*b).numel());
            if need(*a) {
                let ga = fold(gd.iter().copied(), n, na);
                accum(nodes, grads, *a, ga);
            }
            if need(*b) {
                let gb = fold(gd.iter().copied(), n, nb);
                accum(nodes, grads, *b, gb);
            }
        }
        Op::Sub(a, b) => {
            let (na, nb) = (val(*a).numel(), val(*b).numel());
            if need(*a) {
                let ga = fold(gd.iter().copied(), n, na);
                accum(nodes, grads, *a, ga);
            }
            if need(*b) {
                let gb = fold(gd.iter().map(|x| -x), n, nb);
                accum(nodes, grads, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let (na, nb) = (ad.len(), bd.len());
            if need(*a) {
                let ga = fold(
                    gd.iter().enumerate().map(|(i, x)| x * bd[bidx(i, nb)]),
                    n,
                    na,
                );
                accum(nodes, grads, *a, ga);
            }
            if need(*b) {
                let gb = fold(
                    gd.iter().enumerate().map(|(i, x)| x * ad[bidx(i, na)]),
                    n,
                    nb,
                );
                accum(nodes, grads, *b, gb);
            }
        }
        Op::Scale(a, c) => accum(nodes, grads, *a, gd.iter().map(|x| x * c).collect()),
        Op::Relu(a) => {
            let ad = val(*a).data();
            let ga = gd
                .iter()
                .zip(ad)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            accum(nodes, grads, *a, ga);
        }
        Op::Elu(a) => {
            let (ad, od) = (val(*a).data(), out.data());
            let ga = gd
                .iter()
                .zip(ad.iter().zip(od))
                .map(|(g, (&x, &y))| if x > 0.0 { *g } else { g * (y + 1.0) })
                .collect();
            accum(nodes, grads, *a, ga);
        }
        Op::Exp(a) => {
            let ga = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
            accum(nodes, grads, *a, ga);
        }
        Op::Log(a) => {
            let ga = gd.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
            accum(nodes, grads, *a, ga);
        }
        Op::Tanh(a) => {
            let ga = gd
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            accum(nodes, grads, *a, ga);
        }
        Op::Abs(a) => {
            let ga = gd
                .iter()
                .zip(val(*a).data())
                .map(|(g, &x)| {
                    if x > 0.0 {
                        *g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            accum(nodes, grads, *a, ga);
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_extents(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; n];
            for o in 0..outer {
                for ii in 0..inner {
                    let base = o * len * inner + ii;
                    let dot: f64 = (0..len)
                        .map(|j| gd[base + j * inner] * y[base + j * inner])
                        .sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        gx[p] = y[p] * (gd[p] - dot);
                    }
                }
            }
            accum(nodes, grads, *x, gx);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, nn) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if need(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, nn, k, gd, false, bv.data(), true, &mut ga, 0.0);
                accum(nodes, grads, *a, ga);
            }
            if need(*b) {
                let mut gb = vec![0.0; k * nn];
                gemm(k, m, nn, av.data(), true, gd, false, &mut gb, 0.0);
                accum(nodes, grads, *b, gb);
            }
        }
        Op::Transpose(a) => accum(nodes, grads, *a, g.transpose().into_data()),
        Op::Reshape(a) => accum(nodes, grads, *a, gd.to_vec()),
        Op::Conv1d {
            x,
            w,
            b,
            stride,
            pad_left,
        } => {
            let (xv, wv) = (val(*x), val(*w));
            let (c_in, width) = (xv.shape()[0], xv.shape()[1]);
            let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
            let w_out = out.shape()[1];
            if need(*w) {
                let cols = im2col(xv.data(), c_in, width, k, *stride, *pad_left, w_out);
                let mut gw = vec![0.0; c_out * c_in * k];
                gemm(c_out, w_out, c_in * k, gd, false, &cols, true, &mut gw, 0.0);
                accum(nodes, grads, *w, gw);
            }
            if need(*x) {
                let mut gcols = vec![0.0; c_in * k * w_out];
                gemm(
                    c_in * k,
                    c_out,
                    w_out,
                    wv.data(),
                    true,
                    gd,
                    false,
                    &mut gcols,
                    0.0,
                );
                let mut gx = vec![0.0; c_in * width];
                col2im_add(&gcols, &mut gx, c_in, width, k, *stride, *pad_left, w_out);
                accum(nodes, grads, *x, gx);
            }
            if let Some(b) = b {
                if need(*b) {
                    let gb = gd.chunks(w_out).map(|r| r.iter().sum()).collect();
                    accum(nodes, grads, *b, gb);
                }
            }
        }
        Op::Normalize { x, axis, inv_std } => {
            let (outer, len, inner) = axis_extents(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; n];
            for o in 0..outer {
                for ii in 0..inner {
                    let base = o * len * inner + ii;
                    let inv = inv_std[o * inner + ii];
                    let (mut mg, mut mgy) = (0.0, 0.0);
                    for j in 0..len {
                        let p = base + j * inner;
                        mg += gd[p];
                        mgy += gd[p] * y[p];
                    }
                    mg /= len as f64;
                    mgy /= len as f64;
                    for j in 0..len {
                        let p = base + j * inner;
                        gx[p] = inv * (gd[p] - mg - y[p] * mgy);
                    }
                }
            }
            accum(nodes, grads, *x, gx);
        }
        Op::MeanAxis { x, axis } => {
            let xv = val(*x);
            let (outer, len, inner) = axis_extents(xv.shape(), *axis);
            let mut gx = vec![0.0; xv.numel()];
            for o in 0..outer {
                for j in 0..len {
                    for ii in 0..inner {
                        gx[(o * len + j) * inner + ii] = gd[o * inner + ii] / len as f64;
                    }
                }
            }
            accum(nodes, grads, *x, gx);
        }
        Op::VarAxis { x, axis, mean } => {
            let xv = val(*x);
            let (outer, len, inner) = axis_extents(xv.shape(), *axis);
            let d = xv.data();
            let mut gx = vec![0.0; xv.numel()];
            for o in 0..outer {
                for j in 0..len {
                    for ii in 0..inner {
                        let p = (o * len + j) * inner + ii;
                        let q = o * inner + ii;
                        gx[p] = gd[q] * 2.0 * (d[p] - mean[q]) / len as f64;
                    }
                }
            }
            accum(nodes, grads, *x, gx);
        }
        Op::Sum(a) => {
            let na = val(*a).numel();
            accum(nodes, grads, *a, vec![gd[0]; na]);
        }
        Op::Mean(a) => {
            let na = val(*a).numel();
            accum(nodes, grads, *a, vec![gd[0] / na as f64; na]);
        }
        Op::Concat { xs, axis } => {
            let total = out.shape()[*axis];
            let (outer, _, inner) = axis_extents(out.shape(), *axis);
            let mut offset = 0;
            for &v in xs {
                let len = val(v).shape()[*axis];
                if need(v) {
                    let mut gv = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        gv.extend_from_slice(&gd[s..s + len * inner]);
                    }
                    accum(nodes, grads, v, gv);
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xv = val(*x);
            let (outer, full, inner) = axis_extents(xv.shape(), *axis);
            let len = out.shape()[*axis];
            let mut gx = vec![0.0; xv.numel()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                gx[dst..dst + len * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            accum(nodes, grads, *x, gx);
        }
        Op::Pad { x, axis, before } => {
            let xv = val(*x);
            let (outer, len, inner) = axis_extents(xv.shape(), *axis);
            let m = out.shape()[*axis];
            let mut gx = Vec::with_capacity(xv.numel());
            for o in 0..outer {
                let s = (o * m + before) * inner;
                gx.extend_from_slice(&gd[s..s + len * inner]);
            }
            accum(nodes, grads, *x, gx);
        }
        Op::GatherRows { x, idx } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut gx = vec![0.0; xv.numel()];
            for (r, &src) in idx.iter().enumerate() {
                let dst = &mut gx[src * c..(src + 1) * c];
                dst.iter_mut()
                    .zip(&gd[r * c..(r + 1) * c])
                    .for_each(|(d, s)| *d += s);
            }
            accum(nodes, grads, *x, gx);
        }
        Op::ScaleRows { x, w } => {
            let (xv, wv) = (val(*x), val(*w));
            let c = xv.cols();
            if need(*x) {
                let mut gx = gd.to_vec();
                for (row, &s) in gx.chunks_mut(c).zip(wv.data()) {
                    row.iter_mut().for_each(|v| *v *= s);
                }
                accum(nodes, grads, *x, gx);
            }
            if need(*w) {
                let gw = gd
                    .chunks(c)
                    .zip(xv.data().chunks(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                accum(nodes, grads, *w, gw);
            }
        }
        Op::AvgPool { x, kernel, stride } => {
            let xv = val(*x);
            let (c, w) = (xv.rows(), xv.cols());
            let w_out = out.shape()[1];
            let mut gx = vec![0.0; c * w];
            for ch in 0..c {
                for t in 0..w_out {
                    let share = gd[ch * w_out + t] / *kernel as f64;
                    for j in 0..*kernel {
                        gx[ch * w + t * stride + j] += share;
                    }
                }
            }
            accum(nodes, grads, *x, gx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::identity(2));
        let a = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ia = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(ia), t.value(a));
        let ones = t.constant(mat(&[&[1.0], &[1.0]]));
        let r = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(r).data(), &[3.0, 7.0]);
        let z = t.constant(Tensor::zeros(vec![3, 4]));
        let any = t.constant(Tensor::full(vec![4, 2], 1.7));
        let zz = t.matmul(z, any).unwrap();
        assert_eq!(t.value(zz), &Tensor::zeros(vec![3, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn conv1d_hand_examples() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[&[1.0, 2.0, 3.0]]));
        let k = t.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = t.conv1d(x, k, None, 1, Padding::Valid).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0]);

        let x = t.constant(mat(&[&[1.0, 1.0, 1.0, 1.0]]));
        let k = t.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let y = t.conv1d(x, k, None, 2, Padding::Valid).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 2.0]);

        let x = t.constant(Tensor::zeros(vec![1, 8]));
        let k = t.constant(Tensor::zeros(vec![1, 1, 4]));
        let y = t.conv1d(x, k, None, 2, Padding::Valid).unwrap();
        assert_eq!(t.shape(y), &[1, 3]);
    }

    #[test]
    fn conv1d_rejects_wide_kernel_and_zero_stride() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![1, 3]));
        let k = t.constant(Tensor::zeros(vec![1, 1, 4]));
        assert!(matches!(
            t.conv1d(x, k, None, 1, Padding::Valid),
            Err(Error::Dimension { .. })
        ));
        assert!(t.conv1d(x, k, None, 1, Padding::Same).is_ok());
        assert!(matches!(
            t.conv1d(x, k, None, 0, Padding::Same),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn conv1d_is_cross_correlation() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[&[1.0, 2.0, 3.0, 4.0]]));
        let k = t.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 10.0]).unwrap());
        let y = t.conv1d(x, k, None, 1, Padding::Valid).unwrap();
        assert_eq!(t.value(y).data(), &[21.0, 32.0, 43.0]);
    }

    #[test]
    fn elementwise_definitions() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-3.0, 0.0, -30.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data()[0], 0.0);
        let e = t.elu(x);
        assert_eq!(t.value(e).data()[1], 0.0);
        assert!((t.value(e).data()[2] + 1.0).abs() < 1e-9);
        let z = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = t.softmax(z, 0).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain { .. })));
        let x = t.constant(Tensor::vector(vec![-1.0]));
        assert!(matches!(t.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn moments_hand_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let (m, v) = t.moments(x, 0).unwrap();
        assert!((t.value(m).item() - 2.0).abs() < 1e-15);
        assert!((t.value(v).item() - 2.0 / 3.0).abs() < 1e-15);
        let x = t.constant(Tensor::vector(vec![0.0, 2.0]));
        let (m, v) = t.moments(x, 0).unwrap();
        assert_eq!((t.value(m).item(), t.value(v).item()), (1.0, 1.0));
        let x = t.constant(Tensor::vector(vec![4.0; 5]));
        let (_, v) = t.moments(x, 0).unwrap();
        assert_eq!(t.value(v).item(), 0.0);
        assert!(matches!(t.moments(x, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn broadcasting_is_leading_dims_only() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![3, 4]));
        let row = t.constant(Tensor::ones(vec![4]));
        let row1 = t.constant(Tensor::ones(vec![1, 4]));
        let col = t.constant(Tensor::ones(vec![3, 1]));
        let s1 = t.add(a, row).unwrap();
        let s2 = t.add(row1, a).unwrap();
        assert_eq!(t.shape(s1), &[3, 4]);
        assert_eq!(t.shape(s2), &[3, 4]);
        assert!(t.add(a, col).is_err());
    }

    #[test]
    fn gather_and_pool_shapes() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let g = t.gather_rows(x, &[0, 0, 2]).unwrap();
        assert_eq!(t.value(g).data(), &[1.0, 2.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(t.gather_rows(x, &[3]).is_err());
        let p = t.constant(mat(&[&[1.0, 3.0, 5.0, 7.0, 9.0]]));
        let q = t.avg_pool(p, 2, 2).unwrap();
        assert_eq!(t.value(q).data(), &[2.0, 6.0]);
    }
}
