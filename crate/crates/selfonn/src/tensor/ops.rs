//! Differentiable operations recorded on the [`Tape`].
//!
//! Binary ops support suffix broadcasting: the smaller operand's shape must
//! equal a trailing suffix of the larger one's, and is tiled over the leading
//! axes (row-major layout makes that a modulo index).

use crate::error::{Error, Result};
use crate::tensor::{BackFn, Tape, Tensor, Var};

/// Running batch-norm statistics, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// How the operands of a binary op line up.
#[derive(Clone, Copy)]
enum Align {
    Equal,
    /// rhs is the suffix operand (tiled), with the given numel.
    RhsSuffix(usize),
    /// lhs is the suffix operand (tiled), with the given numel.
    LhsSuffix(usize),
}

fn align(a: &[usize], b: &[usize]) -> Result<Align> {
    if a == b {
        return Ok(Align::Equal);
    }
    let mismatch = || Error::ShapeMismatch {
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        Ok(Align::RhsSuffix(b.iter().product()))
    } else if a.len() < b.len() && b[b.len() - a.len()..] == *a {
        Ok(Align::LhsSuffix(a.iter().product()))
    } else {
        Err(mismatch())
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |_x, _y| (1.0, 1.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |_x, _y| (1.0, -1.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |x, y| (y, x))
    }

    /// Shared binary elementwise kernel. `df` returns the pair of local
    /// partial derivatives (d/da, d/db) at the given operand values.
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        df: impl Fn(f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let alignment = align(av.shape(), bv.shape())?;
        let (out, needs) = match alignment {
            Align::Equal => {
                let data = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                (
                    Tensor::new(av.shape().to_vec(), data)?,
                    self.needs_grad(a) || self.needs_grad(b),
                )
            }
            Align::RhsSuffix(bn) => {
                let data = av
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv.data()[i % bn]))
                    .collect();
                (
                    Tensor::new(av.shape().to_vec(), data)?,
                    self.needs_grad(a) || self.needs_grad(b),
                )
            }
            Align::LhsSuffix(an) => {
                let data = bv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(av.data()[i % an], y))
                    .collect();
                (
                    Tensor::new(bv.shape().to_vec(), data)?,
                    self.needs_grad(a) || self.needs_grad(b),
                )
            }
        };
        let tile = match alignment {
            Align::Equal => None,
            Align::RhsSuffix(n) => Some((false, n)),
            Align::LhsSuffix(n) => Some((true, n)),
        };
        let back: BackFn = Box::new(move |ctx, go| {
            let (an, bn) = (ctx.val(a).numel(), ctx.val(b).numel());
            for (i, &g) in go.iter().enumerate() {
                let (ia, ib) = match tile {
                    None => (i, i),
                    Some((false, n)) => (i, i % n),
                    Some((true, n)) => (i % n, i),
                };
                let x = ctx.val(a).data()[ia];
                let y = ctx.val(b).data()[ib];
                let (da, db) = df(x, y);
                if ctx.wants(a) {
                    debug_assert!(ia < an);
                    ctx.buf(a)[ia] += g * da;
                }
                if ctx.wants(b) {
                    debug_assert!(ib < bn);
                    ctx.buf(b)[ib] += g * db;
                }
            }
        });
        let needs_grad = needs;
        Ok(self.push(out, needs_grad, Some(back)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// `a*x + b`, elementwise with scalar constants.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| a * xv.data()[i] + b);
        let needs = self.needs_grad(x);
        let back: BackFn = Box::new(move |ctx, go| {
            if ctx.wants(x) {
                let buf = ctx.buf(x);
                for (bi, &g) in buf.iter_mut().zip(go) {
                    *bi += a * g;
                }
            }
        });
        self.push(out, needs, Some(back))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_x, y| 1.0 - y * y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _y| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Shared unary kernel; `df(x, y)` gets both input and output values.
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| f(xv.data()[i]));
        let needs = self.needs_grad(x);
        let y = Var(self.len()); // output id, assigned by push below
        let back: BackFn = Box::new(move |ctx, go| {
            if !ctx.wants(x) {
                return;
            }
            let xd = ctx.val(x).data();
            let yd = ctx.val(y).data();
            let buf = ctx.buf(x);
            for i in 0..go.len() {
                buf[i] += go[i] * df(xd[i], yd[i]);
            }
        });
        self.push(out, needs, Some(back))
    }

    /// Elementwise integer power, `q >= 1`. The q = 0 constant term is the
    /// bias's job in operational layers, so it is rejected here.
    pub fn pow_int(&mut self, x: Var, q: usize) -> Result<Var> {
        if q == 0 {
            return Err(Error::Shape(
                "power order must be >= 1 (the constant term belongs to the bias)".into(),
            ));
        }
        Ok(self.unary(
            x,
            move |v| v.powi(q as i32),
            move |xv, _y| q as f64 * xv.powi(q as i32 - 1),
        ))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; xv.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..extent {
                    m = m.max(xv.data()[base + k * inner]);
                }
                let mut s = 0.0;
                for k in 0..extent {
                    s += (xv.data()[base + k * inner] - m).exp();
                }
                let lse = m + s.ln();
                for k in 0..extent {
                    out[base + k * inner] = xv.data()[base + k * inner] - lse;
                }
            }
        }
        let needs = self.needs_grad(x);
        let y = Var(self.len());
        let back: BackFn = Box::new(move |ctx, go| {
            if !ctx.wants(x) {
                return;
            }
            let yd = ctx.val(y).data();
            let buf = ctx.buf(x);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * extent * inner + i;
                    let mut gsum = 0.0;
                    for k in 0..extent {
                        gsum += go[base + k * inner];
                    }
                    for k in 0..extent {
                        let idx = base + k * inner;
                        buf[idx] += go[idx] - yd[idx].exp() * gsum;
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(shape, out)?, needs, Some(back)))
    }

    /// Sum of all elements, producing a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let total: f64 = xv.data().iter().sum();
        let needs = self.needs_grad(x);
        let back: BackFn = Box::new(move |ctx, go| {
            if ctx.wants(x) {
                let g = go[0];
                for bi in ctx.buf(x) {
                    *bi += g;
                }
            }
        });
        self.push(Tensor::scalar(total), needs, Some(back))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != xv.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {:?}",
                xv.shape(),
                shape
            )));
        }
        let out = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        let needs = self.needs_grad(x);
        let back: BackFn = Box::new(move |ctx, go| {
            if ctx.wants(x) {
                let buf = ctx.buf(x);
                for (bi, &g) in buf.iter_mut().zip(go) {
                    *bi += g;
                }
            }
        });
        Ok(self.push(out, needs, Some(back)))
    }

    /// Axis permutation (generalized transpose).
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.ndim();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!(
                "invalid permutation {perm:?} for rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xv.shape()[p]).collect();
        let in_strides = xv.strides();
        // flat mapping: out flat index -> in flat index
        let mut map = vec![0usize; xv.numel()];
        let out_strides = {
            let mut s = vec![1; rank];
            for i in (0..rank.saturating_sub(1)).rev() {
                s[i] = s[i + 1] * out_shape[i + 1];
            }
            s
        };
        for (flat, m) in map.iter_mut().enumerate() {
            let mut rem = flat;
            let mut src = 0;
            for d in 0..rank {
                let od = rem / out_strides[d];
                rem %= out_strides[d];
                src += od * in_strides[perm[d]];
            }
            *m = src;
        }
        let data: Vec<f64> = map.iter().map(|&s| xv.data()[s]).collect();
        let needs = self.needs_grad(x);
        let back: BackFn = Box::new(move |ctx, go| {
            if ctx.wants(x) {
                let buf = ctx.buf(x);
                for (flat, &src) in map.iter().enumerate() {
                    buf[src] += go[flat];
                }
            }
        });
        Ok(self.push(Tensor::new(out_shape, data)?, needs, Some(back)))
    }

    /// Select one index along `axis`, dropping that axis.
    pub fn index_axis(&mut self, x: Var, axis: usize, idx: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if idx >= shape[axis] {
            return Err(Error::Shape(format!(
                "index {idx} out of range for axis {axis} of {shape:?}"
            )));
        }
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * extent + idx) * inner;
            data.extend_from_slice(&xv.data()[base..base + inner]);
        }
        let needs = self.needs_grad(x);
        let back: BackFn = Box::new(move |ctx, go| {
            if ctx.wants(x) {
                let buf = ctx.buf(x);
                for o in 0..outer {
                    let base = (o * extent + idx) * inner;
                    for i in 0..inner {
                        buf[base + i] += go[o * inner + i];
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(out_shape, data)?, needs, Some(back)))
    }

    /// Add a per-channel bias along `axis` (bias is rank-1).
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if bv.ndim() != 1 || bv.numel() != shape[axis] {
            return Err(Error::ShapeMismatch {
                lhs: shape,
                rhs: bv.shape().to_vec(),
            });
        }
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = xv.data().to_vec();
        for o in 0..outer {
            for c in 0..extent {
                let base = (o * extent + c) * inner;
                let b = bv.data()[c];
                for v in &mut data[base..base + inner] {
                    *v += b;
                }
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(bias);
        let back: BackFn = Box::new(move |ctx, go| {
            if ctx.wants(x) {
                let buf = ctx.buf(x);
                for (bi, &g) in buf.iter_mut().zip(go) {
                    *bi += g;
                }
            }
            if ctx.wants(bias) {
                let buf = ctx.buf(bias);
                for o in 0..outer {
                    for c in 0..extent {
                        let base = (o * extent + c) * inner;
                        buf[c] += go[base..base + inner].iter().sum::<f64>();
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(xv.shape().to_vec(), data)?, needs, Some(back)))
    }

    /// Batch normalization over channel axis 1 of a rank >= 2 tensor.
    ///
    /// Training mode normalizes by batch statistics (epsilon in the formula)
    /// and returns the updated running stats; eval mode normalizes by the
    /// running stats and returns `None`. The caller owns the running-stat
    /// state and applies the update, which keeps eval passes `&self`-clean.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &BnRunning,
        training: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<(Var, Option<BnRunning>)> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "batch norm needs rank >= 2, got {shape:?}"
            )));
        }
        let channels = shape[1];
        if self.value(gamma).numel() != channels
            || self.value(beta).numel() != channels
            || running.mean.len() != channels
        {
            return Err(Error::ChannelMismatch {
                expected: channels,
                got: self.value(gamma).numel(),
            });
        }
        let inner: usize = shape[2..].iter().product();
        let batch = shape[0];
        let m = (batch * inner) as f64; // reduction size per channel

        let (mean, var, updated) = if training {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut s = 0.0;
                for n in 0..batch {
                    let base = (n * channels + c) * inner;
                    s += xv.data()[base..base + inner].iter().sum::<f64>();
                }
                mean[c] = s / m;
                let mut v = 0.0;
                for n in 0..batch {
                    let base = (n * channels + c) * inner;
                    for &val in &xv.data()[base..base + inner] {
                        let d = val - mean[c];
                        v += d * d;
                    }
                }
                var[c] = v / m;
            }
            let mut upd = running.clone();
            for c in 0..channels {
                // unbiased variance for the running estimate when possible
                let rv = if m > 1.0 { var[c] * m / (m - 1.0) } else { var[c] };
                upd.mean[c] = (1.0 - momentum) * upd.mean[c] + momentum * mean[c];
                upd.var[c] = (1.0 - momentum) * upd.var[c] + momentum * rv;
            }
            (mean, var, Some(upd))
        } else {
            (running.mean.clone(), running.var.clone(), None)
        };

        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let ivar: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; xv.numel()];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * inner;
                for i in 0..inner {
                    let xhat = (xv.data()[base + i] - mean[c]) * ivar[c];
                    out[base + i] = gv[c] * xhat + bv[c];
                }
            }
        }

        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let back: BackFn = Box::new(move |ctx, go| {
            let xd = ctx.val(x).data();
            let gd = ctx.val(gamma).data();
            // per-channel reductions of go and go*xhat
            let mut sum_g = vec![0.0; channels];
            let mut sum_gx = vec![0.0; channels];
            for n in 0..batch {
                for c in 0..channels {
                    let base = (n * channels + c) * inner;
                    for i in 0..inner {
                        let xhat = (xd[base + i] - mean[c]) * ivar[c];
                        sum_g[c] += go[base + i];
                        sum_gx[c] += go[base + i] * xhat;
                    }
                }
            }
            if ctx.wants(beta) {
                let buf = ctx.buf(beta);
                for c in 0..channels {
                    buf[c] += sum_g[c];
                }
            }
            if ctx.wants(gamma) {
                let buf = ctx.buf(gamma);
                for c in 0..channels {
                    buf[c] += sum_gx[c];
                }
            }
            if ctx.wants(x) {
                let buf = ctx.buf(x);
                for n in 0..batch {
                    for c in 0..channels {
                        let base = (n * channels + c) * inner;
                        for i in 0..inner {
                            let g = go[base + i];
                            let d = if training {
                                let xhat = (xd[base + i] - mean[c]) * ivar[c];
                                gd[c] * ivar[c] * (g - sum_g[c] / m - xhat * sum_gx[c] / m)
                            } else {
                                gd[c] * ivar[c] * g
                            };
                            buf[base + i] += d;
                        }
                    }
                }
            }
        });
        let out_var = self.push(Tensor::new(shape, out)?, needs, Some(back));
        Ok((out_var, updated))
    }

    /// Max pooling over the two trailing spatial axes of an NCHW tensor.
    /// Gradient routes to the argmax; first occurrence wins on ties.
    pub fn max_pool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "max_pool2d needs NCHW input, got {shape:?}"
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (wh, ww) = window;
        let (sh, sw) = stride;
        if wh == 0 || ww == 0 || sh == 0 || sw == 0 {
            return Err(Error::Geometry("zero pooling window or stride".into()));
        }
        if wh > h || ww > w {
            return Err(Error::Geometry(format!(
                "pool window {window:?} larger than input {h}x{w}"
            )));
        }
        let oh = (h - wh) / sh + 1;
        let ow = (w - ww) / sw + 1;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for ni in 0..n {
            for ci in 0..c {
                let plane = (ni * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for ky in 0..wh {
                            for kx in 0..ww {
                                let idx = plane + (oy * sh + ky) * w + (ox * sw + kx);
                                let v = xv.data()[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((ni * c + ci) * oh + oy) * ow + ox;
                        out[o] = best;
                        arg[o] = best_idx;
                    }
                }
            }
        }
        let needs = self.needs_grad(x);
        let back: BackFn = Box::new(move |ctx, go| {
            if ctx.wants(x) {
                let buf = ctx.buf(x);
                for (o, &src) in arg.iter().enumerate() {
                    buf[src] += go[o];
                }
            }
        });
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, needs, Some(back)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_grad;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), false);
        let b = tape.leaf(t(&[2], &[3.0, 4.0]), false);
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let x = tape.leaf(t(&[2], &[-1.0, 2.0]), false);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);

        let z = tape.leaf(t(&[1], &[0.0]), false);
        let th = tape.tanh(z);
        assert_eq!(tape.value(th).data(), &[0.0]);
    }

    #[test]
    fn binary_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 2]), false);
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn suffix_broadcast_add() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), true);
        let b = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]), true);
        let s = tape.add(a, b).unwrap();
        assert_eq!(
            tape.value(s).data(),
            &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]
        );
        let total = tape.sum(s);
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn pow_rejects_constant_term() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.5]), false);
        assert!(tape.pow_int(x, 0).is_err());
        let p = tape.pow_int(x, 2).unwrap();
        assert!((tape.value(p).data()[0] - 0.25).abs() < 1e-15);
        let one = tape.pow_int(x, 1).unwrap();
        assert_eq!(tape.value(one).data(), tape.value(x).data());
    }

    #[test]
    fn pow_gradient_matches_finite_difference() {
        // d/dx x^3 at 0.3 = 0.27
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.3]), true);
        let p = tape.pow_int(x, 3).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        let g = grads.get(x).unwrap()[0];
        assert!((g - 0.27).abs() < 1e-12);

        let fd = finite_difference_grad(
            &mut |v: &Tensor| v.data()[0].powi(3),
            &t(&[1], &[0.3]),
            1e-6,
        );
        assert!((g - fd.data()[0]).abs() < 1e-8);
    }

    #[test]
    fn log_softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, 0.0, 0.0]), false);
        let y = tape.log_softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }

        let big = tape.leaf(t(&[2], &[1000.0, 0.0]), false);
        let yb = tape.log_softmax(big, 0).unwrap();
        let d = tape.value(yb).data();
        assert!(d[0].abs() < 1e-12);
        assert!((d[1] + 1000.0).abs() < 1e-9);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_fn(&[4, 5], |i| ((i * 37) % 11) as f64 * 0.7 - 3.0),
            false,
        );
        let y = tape.log_softmax(x, 1).unwrap();
        let yd = tape.value(y).data();
        for r in 0..4 {
            let s: f64 = (0..5).map(|k| yd[r * 5 + k].exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = tape.max_pool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);

        // constant input: first occurrence wins ties
        let c = tape.leaf(Tensor::full(&[1, 1, 2, 2], 7.0), true);
        let yc = tape.max_pool2d(c, (2, 2), (2, 2)).unwrap();
        assert_eq!(tape.value(yc).data(), &[7.0]);
        let sc = tape.sum(yc);
        let g = tape.backward(sc).unwrap();
        assert_eq!(g.get(c).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_oversized_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        assert!(matches!(
            tape.max_pool2d(x, (3, 3), (1, 1)),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn batch_norm_training_moments() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_fn(&[4, 2, 3, 3], |i| ((i * 17) % 23) as f64 * 0.3 - 2.0),
            false,
        );
        let gamma = tape.leaf(t(&[2], &[1.5, 0.5]), false);
        let beta = tape.leaf(t(&[2], &[0.25, -0.75]), false);
        let running = BnRunning::new(2);
        let (y, upd) = tape
            .batch_norm(x, gamma, beta, &running, true, 1e-5, 0.1)
            .unwrap();
        assert!(upd.is_some());
        // per-channel mean ~= beta, std ~= gamma
        let yd = tape.value(y).data();
        for c in 0..2 {
            let mut vals = Vec::new();
            for n in 0..4 {
                let base = (n * 2 + c) * 9;
                vals.extend_from_slice(&yd[base..base + 9]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 =
                vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            let (want_m, want_s) = if c == 0 { (0.25, 1.5) } else { (-0.75, 0.5) };
            assert!((m - want_m).abs() < 1e-9, "mean {m} vs {want_m}");
            assert!((v.sqrt() - want_s).abs() < 1e-3, "std {} vs {want_s}", v.sqrt());
        }
    }

    #[test]
    fn batch_norm_constant_channel_is_zero_pre_affine() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3, 1, 2, 2], 4.2), false);
        let gamma = tape.leaf(t(&[1], &[1.0]), false);
        let beta = tape.leaf(t(&[1], &[0.0]), false);
        let running = BnRunning::new(1);
        let (y, _) = tape
            .batch_norm(x, gamma, beta, &running, true, 1e-5, 0.1)
            .unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn permute_and_index_axis_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64), true);
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p).shape(), &[4, 2, 3]);
        assert_eq!(tape.value(p).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());

        let row = tape.index_axis(x, 1, 2).unwrap();
        assert_eq!(tape.value(row).shape(), &[2, 4]);
        assert_eq!(tape.value(row).at(&[1, 3]), tape.value(x).at(&[1, 2, 3]));
    }
}
