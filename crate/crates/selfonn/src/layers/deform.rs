//! Deformable convolution: each kernel tap samples the input at its
//! canonical grid position plus a learned (dy, dx) offset, evaluated by
//! bilinear interpolation with zero padding outside the input.

use super::gemm::gemm;
use super::im2col::Conv2dGeom;
use crate::error::{Error, Result};
use crate::tensor::{BackFn, Tape, Tensor, Var};

/// Bilinear interpolation of one plane at (y, x). Points at or beyond the
/// [-1, h] x [-1, w] box contribute zero, matching conv zero padding.
fn sample_plane(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if !(y > -1.0 && y < h as f64 && x > -1.0 && x < w as f64) {
        return 0.0;
    }
    let yl = y.floor();
    let xl = x.floor();
    let ly = y - yl;
    let lx = x - xl;
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let (yl, xl) = (yl as isize, xl as isize);
    let v00 = at(yl, xl);
    let v01 = at(yl, xl + 1);
    let v10 = at(yl + 1, xl);
    let v11 = at(yl + 1, xl + 1);
    (1.0 - ly) * (1.0 - lx) * v00
        + (1.0 - ly) * lx * v01
        + ly * (1.0 - lx) * v10
        + ly * lx * v11
}

/// Spatial derivatives (d/dy, d/dx) of [`sample_plane`]. At exact integer
/// coordinates the interpolant has a kink; the left/lower one-sided
/// derivative is used, deterministically.
fn sample_plane_grad_yx(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> (f64, f64) {
    if !(y > -1.0 && y < h as f64 && x > -1.0 && x < w as f64) {
        return (0.0, 0.0);
    }
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    // derivative cell along y: [floor(y), floor(y)+1), shifted down one
    // cell when y is exactly integral (left/lower derivative)
    let (y0, ly) = {
        let f = y.floor();
        if f == y {
            (f as isize - 1, 1.0)
        } else {
            (f as isize, y - f)
        }
    };
    let (x0, lx) = {
        let f = x.floor();
        if f == x {
            (f as isize - 1, 1.0)
        } else {
            (f as isize, x - f)
        }
    };
    let dy = (1.0 - lx) * (at(y0 + 1, x0) - at(y0, x0)) + lx * (at(y0 + 1, x0 + 1) - at(y0, x0 + 1));
    let dx = (1.0 - ly) * (at(y0, x0 + 1) - at(y0, x0)) + ly * (at(y0 + 1, x0 + 1) - at(y0 + 1, x0));
    (dy, dx)
}

/// Scatter `g` onto the four corner pixels around (y, x) with bilinear
/// weights; the zero-padding region absorbs out-of-bounds corners.
fn scatter_plane(dplane: &mut [f64], h: usize, w: usize, y: f64, x: f64, g: f64) {
    if !(y > -1.0 && y < h as f64 && x > -1.0 && x < w as f64) {
        return;
    }
    let yl = y.floor();
    let xl = x.floor();
    let ly = y - yl;
    let lx = x - xl;
    let (yl, xl) = (yl as isize, xl as isize);
    let mut add = |yy: isize, xx: isize, wgt: f64| {
        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
            dplane[yy as usize * w + xx as usize] += g * wgt;
        }
    };
    add(yl, xl, (1.0 - ly) * (1.0 - lx));
    add(yl, xl + 1, (1.0 - ly) * lx);
    add(yl + 1, xl, ly * (1.0 - lx));
    add(yl + 1, xl + 1, ly * lx);
}

/// Bilinear sample of every channel of a `[C,H,W]` feature map at (y, x).
pub fn bilinear_sample(feature: &Tensor, y: f64, x: f64) -> Result<Tensor> {
    if feature.ndim() != 3 {
        return Err(Error::Shape(format!(
            "bilinear_sample expects CHW, got {:?}",
            feature.shape()
        )));
    }
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let data = (0..c)
        .map(|ci| sample_plane(&feature.data()[ci * h * w..(ci + 1) * h * w], h, w, y, x))
        .collect();
    Tensor::new(vec![c], data)
}

/// Fill the deformed patch matrix for one sample: row `c*kh*kw + t`,
/// column `p`, sampled at the tap's canonical position plus its offset.
#[allow(clippy::too_many_arguments)]
fn deform_cols(
    x: &[f64],
    offs: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    geom: &Conv2dGeom,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let (kh, kw) = geom.kernel;
    let taps = kh * kw;
    let p = oh * ow;
    for ci in 0..c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for t in 0..taps {
            let (ky, kx) = (t / kw, t % kw);
            let row = ci * taps + t;
            for oy in 0..oh {
                for ox in 0..ow {
                    let pos = oy * ow + ox;
                    let dy = offs[(2 * t) * p + pos];
                    let dx = offs[(2 * t + 1) * p + pos];
                    let sy = (oy * geom.stride.0 + ky * geom.dilation.0) as f64
                        - geom.padding.0 as f64
                        + dy;
                    let sx = (ox * geom.stride.1 + kx * geom.dilation.1) as f64
                        - geom.padding.1 as f64
                        + dx;
                    cols[row * p + pos] = sample_plane(plane, h, w, sy, sx);
                }
            }
        }
    }
}

/// Deformable 2D convolution (no bias).
///
/// `offsets` has shape `[N, 2*kh*kw, OH, OW]`: one (dy, dx) pair per kernel
/// tap per output position, shared across input channels.
pub fn deform_conv2d_raw(
    tape: &mut Tape,
    x: Var,
    offsets: Var,
    w: Var,
    geom: Conv2dGeom,
) -> Result<Var> {
    let xv = tape.value(x);
    let ov = tape.value(offsets);
    let wv = tape.value(w);
    if xv.ndim() != 4 || wv.ndim() != 4 || ov.ndim() != 4 {
        return Err(Error::Shape(format!(
            "deform_conv2d expects rank-4 input/offsets/weights, got {:?}/{:?}/{:?}",
            xv.shape(),
            ov.shape(),
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
    let taps = kh * kw;
    if ov.shape() != [n, 2 * taps, oh, ow] {
        return Err(Error::Shape(format!(
            "offsets must be [{n}, {}, {oh}, {ow}], got {:?}",
            2 * taps,
            ov.shape()
        )));
    }
    let k = c_in * taps;
    let p = oh * ow;

    let mut out = vec![0.0; n * c_out * p];
    let mut cols = vec![0.0; k * p];
    let x_plane = c_in * h * wd;
    let o_plane = 2 * taps * p;
    for ni in 0..n {
        deform_cols(
            &xv.data()[ni * x_plane..(ni + 1) * x_plane],
            &ov.data()[ni * o_plane..(ni + 1) * o_plane],
            c_in,
            h,
            wd,
            &geom,
            oh,
            ow,
            &mut cols,
        );
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

    let needs = tape.needs_grad(x) || tape.needs_grad(offsets) || tape.needs_grad(w);
    let back: BackFn = Box::new(move |ctx, go| {
        let xd = ctx.val(x);
        let od = ctx.val(offsets);
        let wv_t = ctx.val(w);
        let mut cols = vec![0.0; k * p];
        let mut dcols = vec![0.0; k * p];
        for ni in 0..n {
            let go_n = &go[ni * c_out * p..(ni + 1) * c_out * p];
            let x_n = &xd.data()[ni * x_plane..(ni + 1) * x_plane];
            let o_n = &od.data()[ni * o_plane..(ni + 1) * o_plane];
            if ctx.wants(w) {
                deform_cols(x_n, o_n, c_in, h, wd, &geom, oh, ow, &mut cols);
                gemm(c_out, p, k, go_n, false, &cols, true, 1.0, ctx.buf(w));
            }
            let route_inputs = ctx.wants(x) || ctx.wants(offsets);
            if !route_inputs {
                continue;
            }
            // dM[k,p] = W^T * dY
            gemm(k, c_out, p, wv_t.data(), true, go_n, false, 0.0, &mut dcols);
            for ci in 0..c_in {
                let plane = &x_n[ci * h * wd..(ci + 1) * h * wd];
                for t in 0..taps {
                    let (ky, kx) = (t / kw, t % kw);
                    let row = ci * taps + t;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let pos = oy * ow + ox;
                            let g = dcols[row * p + pos];
                            if g == 0.0 {
                                continue;
                            }
                            let dy = o_n[(2 * t) * p + pos];
                            let dx = o_n[(2 * t + 1) * p + pos];
                            let sy = (oy * geom.stride.0 + ky * geom.dilation.0) as f64
                                - geom.padding.0 as f64
                                + dy;
                            let sx = (ox * geom.stride.1 + kx * geom.dilation.1) as f64
                                - geom.padding.1 as f64
                                + dx;
                            if ctx.wants(x) {
                                let base = ni * x_plane + ci * h * wd;
                                scatter_plane(
                                    &mut ctx.buf(x)[base..base + h * wd],
                                    h,
                                    wd,
                                    sy,
                                    sx,
                                    g,
                                );
                            }
                            if ctx.wants(offsets) {
                                let (gy, gx) = sample_plane_grad_yx(plane, h, wd, sy, sx);
                                let base = ni * o_plane;
                                let buf = ctx.buf(offsets);
                                buf[base + (2 * t) * p + pos] += g * gy;
                                buf[base + (2 * t + 1) * p + pos] += g * gx;
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(tape.push(Tensor::new(vec![n, c_out, oh, ow], out)?, needs, Some(back)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_coordinates_hit_exact_pixels() {
        let f = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        for y in 0..3 {
            for x in 0..4 {
                let s = bilinear_sample(&f, y as f64, x as f64).unwrap();
                assert_eq!(s.data()[0], f.at(&[0, y, x]));
                assert_eq!(s.data()[1], f.at(&[1, y, x]));
            }
        }
    }

    #[test]
    fn midpoint_interpolates_halfway() {
        let f = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let s = bilinear_sample(&f, 0.0, 0.5).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn far_outside_is_zero() {
        let f = Tensor::full(&[3, 4, 4], 9.0);
        for (y, x) in [(-5.0, 2.0), (2.0, -5.0), (100.0, 2.0), (4.0, 0.0), (-1.0, 0.0)] {
            let s = bilinear_sample(&f, y, x).unwrap();
            assert_eq!(s.data(), &[0.0, 0.0, 0.0], "at ({y},{x})");
        }
    }

    #[test]
    fn border_fade_matches_zero_padding() {
        // between the edge pixel and the padding the value fades linearly
        let f = Tensor::full(&[1, 2, 2], 4.0);
        let s = bilinear_sample(&f, 0.0, -0.25).unwrap();
        assert!((s.data()[0] - 3.0).abs() < 1e-15);
    }
}
