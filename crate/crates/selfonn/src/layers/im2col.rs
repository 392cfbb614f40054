//! Patch-matrix convolution: im2col + gemm forward, col2im scatter backward.

use super::gemm::gemm;
use crate::error::{Error, Result};
use crate::tensor::{BackFn, Tape, Tensor, Var};

/// Spatial geometry of a 2D convolution. Defaults to the 3x3 kernel with
/// unit stride, padding, and dilation used throughout the backbone blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for Conv2dGeom {
    fn default() -> Self {
        Self {
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
            dilation: (1, 1),
        }
    }
}

impl Conv2dGeom {
    pub fn kernel(kh: usize, kw: usize) -> Self {
        Self {
            kernel: (kh, kw),
            ..Self::default()
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            out_extent(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            out_extent(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }
}

pub fn out_extent(input: usize, k: usize, s: usize, p: usize, d: usize) -> Result<usize> {
    if k == 0 || s == 0 || d == 0 {
        return Err(Error::Geometry("zero kernel, stride, or dilation".into()));
    }
    let span = d * (k - 1) + 1;
    let padded = input + 2 * p;
    if padded < span {
        return Err(Error::Geometry(format!(
            "output size would be non-positive: input {input}, kernel {k}, stride {s}, padding {p}, dilation {d}"
        )));
    }
    Ok((padded - span) / s + 1)
}

/// Gather one sample's patches into `cols` with shape `[c*kh*kw, oh*ow]`
/// (row index `c*kh*kw + ky*kw + kx`, zero padding outside the input).
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    geom: &Conv2dGeom,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (dh, dw) = geom.dilation;
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * sh + ky * dh) as isize - ph as isize;
                    let base = oy * ow;
                    if iy < 0 || iy >= h as isize {
                        dst[base..base + ow].fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * sw + kx * dw) as isize - pw as isize;
                        dst[base + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of [`im2col`]: accumulate patch-matrix
/// gradients back onto the input gradient plane.
pub fn col2im_accumulate(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    geom: &Conv2dGeom,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (dh, dw) = geom.dilation;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * sh + ky * dh) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * sw + kx * dw) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Raw 2D convolution (no bias): `x[N,C_in,H,W] * w[C_out,C_in,kh,kw]`.
///
/// The backward rule re-derives the patch matrix from the saved input
/// instead of capturing it, trading a little compute for memory.
pub fn conv2d_raw(tape: &mut Tape, x: Var, w: Var, geom: Conv2dGeom) -> Result<Var> {
    let xv = tape.value(x);
    let wv = tape.value(w);
    if xv.ndim() != 4 || wv.ndim() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects NCHW input and OIHW weights, got {:?} and {:?}",
            xv.shape(),
            wv.shape()
        )));
    }
    let (n, c_in, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (c_out, wc_in, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    if wc_in != c_in {
        return Err(Error::ChannelMismatch {
            expected: wc_in,
            got: c_in,
        });
    }
    if (kh, kw) != geom.kernel {
        return Err(Error::Geometry(format!(
            "weight kernel {kh}x{kw} disagrees with geometry {:?}",
            geom.kernel
        )));
    }
    let (oh, ow) = geom.out_hw(h, wd)?;
    let k = c_in * kh * kw;
    let p = oh * ow;

    let mut out = vec![0.0; n * c_out * p];
    let mut cols = vec![0.0; k * p];
    let x_plane = c_in * h * wd;
    for ni in 0..n {
        im2col(&xv.data()[ni * x_plane..(ni + 1) * x_plane], c_in, h, wd, &geom, oh, ow, &mut cols);
        gemm(
            c_out,
            k,
            p,
            wv.data(),
            false,
            &cols,
            false,
            0.0,
            &mut out[ni * c_out * p..(ni + 1) * c_out * p],
        );
    }

    let needs = tape.needs_grad(x) || tape.needs_grad(w);
    let back: BackFn = Box::new(move |ctx, go| {
        let xd = ctx.val(x);
        let wd_t = ctx.val(w);
        let mut cols = vec![0.0; k * p];
        let mut dcols = vec![0.0; k * p];
        for ni in 0..n {
            let go_n = &go[ni * c_out * p..(ni + 1) * c_out * p];
            if ctx.wants(w) {
                im2col(
                    &xd.data()[ni * x_plane..(ni + 1) * x_plane],
                    c_in,
                    h,
                    wd,
                    &geom,
                    oh,
                    ow,
                    &mut cols,
                );
                // dW[c_out,k] += dY[c_out,p] * M^T[p,k]
                gemm(c_out, p, k, go_n, false, &cols, true, 1.0, ctx.buf(w));
            }
            if ctx.wants(x) {
                // dM[k,p] = W^T[k,c_out] * dY[c_out,p]
                gemm(k, c_out, p, wd_t.data(), true, go_n, false, 0.0, &mut dcols);
                col2im_accumulate(
                    &dcols,
                    c_in,
                    h,
                    wd,
                    &geom,
                    oh,
                    ow,
                    &mut ctx.buf(x)[ni * x_plane..(ni + 1) * x_plane],
                );
            }
        }
    });
    Ok(tape.push(Tensor::new(vec![n, c_out, oh, ow], out)?, needs, Some(back)))
}
