//! Convolutional, operational (generative-neuron), and deformable layers.
//!
//! An operational layer generalizes convolution by learning, per output
//! channel, Q weight banks that act on elementwise powers of the input
//! window: `y = sum_{q=1..Q} w_q . x^q + b`. Q = 1 is exactly a standard
//! convolution, which doubles as the degeneracy check for the whole stack.

mod deform;
mod gemm;
mod im2col;

pub use deform::{bilinear_sample, deform_conv2d_raw};
pub use im2col::{col2im_accumulate, conv2d_raw, im2col, out_extent, Conv2dGeom};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

/// Spatial geometry of a 1D convolution along the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv1dGeom {
    fn default() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            padding: 1,
            dilation: 1,
        }
    }
}

impl Conv1dGeom {
    fn as_2d(&self) -> Conv2dGeom {
        Conv2dGeom {
            kernel: (1, self.kernel),
            stride: (1, self.stride),
            padding: (0, self.padding),
            dilation: (1, self.dilation),
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Fill per-order weight banks with fan-in-scaled uniform draws.
///
/// The q = 1 bank uses bound `sqrt(1 / fan_in)`; higher banks divide that
/// bound by q! so the series starts dominated by its linear term. Biases
/// stay zero.
fn init_banks(weights: &mut Tensor, q_order: usize, fan_in: usize, rng: &mut impl Rng) {
    let bound1 = (1.0 / fan_in as f64).sqrt();
    let bank = weights.numel() / q_order;
    for q in 1..=q_order {
        let bound = bound1 / factorial(q);
        let start = (q - 1) * bank;
        for v in &mut weights.data_mut()[start..start + bank] {
            *v = rng.random_range(-bound..bound);
        }
    }
}

/// Parameters of a 2D operational convolution (Q weight banks + bias).
#[derive(Debug, Clone, PartialEq)]
pub struct OperationalConv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub q_order: usize,
    pub geom: Conv2dGeom,
    /// Shape `[Q, c_out, c_in, kh, kw]`; bank q-1 multiplies `x^q` windows.
    pub weights: Tensor,
    /// Shape `[c_out]`.
    pub bias: Tensor,
}

impl OperationalConv2d {
    pub fn new(c_in: usize, c_out: usize, q_order: usize, geom: Conv2dGeom) -> Result<Self> {
        if q_order == 0 {
            return Err(Error::Shape("q_order must be >= 1".into()));
        }
        let (kh, kw) = geom.kernel;
        let mut weights = Tensor::zeros(&[q_order, c_out, c_in, kh, kw]);
        weights.requires_grad = true;
        let mut bias = Tensor::zeros(&[c_out]);
        bias.requires_grad = true;
        Ok(Self {
            c_in,
            c_out,
            q_order,
            geom,
            weights,
            bias,
        })
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        let (kh, kw) = self.geom.kernel;
        init_banks(&mut self.weights, self.q_order, self.c_in * kh * kw, rng);
    }

    /// Trainable scalar count: `Q * c_out * c_in * kh * kw + c_out`.
    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.bias.numel()
    }

    /// Forward through already-bound weight/bias vars.
    pub fn forward(&self, tape: &mut Tape, x: Var, weights: Var, bias: Var) -> Result<Var> {
        selfonn_conv2d(tape, x, weights, bias, self.geom)
    }
}

/// Parameters of a 1D operational convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct OperationalConv1d {
    pub c_in: usize,
    pub c_out: usize,
    pub q_order: usize,
    pub geom: Conv1dGeom,
    /// Shape `[Q, c_out, c_in, k]`.
    pub weights: Tensor,
    /// Shape `[c_out]`.
    pub bias: Tensor,
}

impl OperationalConv1d {
    pub fn new(c_in: usize, c_out: usize, q_order: usize, geom: Conv1dGeom) -> Result<Self> {
        if q_order == 0 {
            return Err(Error::Shape("q_order must be >= 1".into()));
        }
        let mut weights = Tensor::zeros(&[q_order, c_out, c_in, geom.kernel]);
        weights.requires_grad = true;
        let mut bias = Tensor::zeros(&[c_out]);
        bias.requires_grad = true;
        Ok(Self {
            c_in,
            c_out,
            q_order,
            geom,
            weights,
            bias,
        })
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        init_banks(&mut self.weights, self.q_order, self.c_in * self.geom.kernel, rng);
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.bias.numel()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, weights: Var, bias: Var) -> Result<Var> {
        selfonn_conv1d(tape, x, weights, bias, self.geom)
    }
}

/// Deformable convolution: a Q=1 base kernel whose sampling grid is
/// displaced by a zero-initialized offset predictor, so the initial
/// behavior is exactly a standard convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformableConv2d {
    pub base: OperationalConv2d,
    pub offset_predictor: OperationalConv2d,
}

impl DeformableConv2d {
    pub fn new(c_in: usize, c_out: usize, geom: Conv2dGeom) -> Result<Self> {
        let (kh, kw) = geom.kernel;
        let base = OperationalConv2d::new(c_in, c_out, 1, geom)?;
        let offset_predictor = OperationalConv2d::new(c_in, 2 * kh * kw, 1, geom)?;
        Ok(Self {
            base,
            offset_predictor,
        })
    }

    /// Base kernel gets the standard init; the offset predictor stays zero.
    pub fn init(&mut self, rng: &mut impl Rng) {
        self.base.init(rng);
    }

    pub fn param_count(&self) -> usize {
        self.base.param_count() + self.offset_predictor.param_count()
    }

    /// Forward with bound vars for (base w, base b, offset w, offset b).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        base_w: Var,
        base_b: Var,
        off_w: Var,
        off_b: Var,
    ) -> Result<Var> {
        let offsets = selfonn_conv2d(tape, x, off_w, off_b, self.offset_predictor.geom)?;
        deformable_conv2d(tape, x, offsets, base_w, base_b, self.base.geom)
    }
}

/// Standard 2D convolution, the Q = 1 degenerate case of the operational
/// layer. `weights` keeps the `[1, c_out, c_in, kh, kw]` bank layout.
pub fn conv2d_forward(
    tape: &mut Tape,
    x: Var,
    weights: Var,
    bias: Var,
    geom: Conv2dGeom,
) -> Result<Var> {
    let q = tape.value(weights).shape()[0];
    if q != 1 {
        return Err(Error::Shape(format!(
            "conv2d_forward expects a single weight bank, got Q = {q}"
        )));
    }
    selfonn_conv2d(tape, x, weights, bias, geom)
}

/// Operational 2D convolution: Q standard convolutions over x, x^2, ...,
/// x^Q summed, plus bias.
pub fn selfonn_conv2d(
    tape: &mut Tape,
    x: Var,
    weights: Var,
    bias: Var,
    geom: Conv2dGeom,
) -> Result<Var> {
    let wshape = tape.value(weights).shape().to_vec();
    if wshape.len() != 5 {
        return Err(Error::Shape(format!(
            "operational weights must be [Q, c_out, c_in, kh, kw], got {wshape:?}"
        )));
    }
    let q_order = wshape[0];
    let mut acc = None;
    for q in 1..=q_order {
        let xq = if q == 1 { x } else { tape.pow_int(x, q)? };
        let wq = tape.index_axis(weights, 0, q - 1)?;
        let term = conv2d_raw(tape, xq, wq, geom)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    tape.add_bias(acc.expect("q_order >= 1"), bias, 1)
}

/// Operational 1D convolution over `[N, C, T]`, expressed through the 2D
/// routine with a 1-row kernel.
pub fn selfonn_conv1d(
    tape: &mut Tape,
    x: Var,
    weights: Var,
    bias: Var,
    geom: Conv1dGeom,
) -> Result<Var> {
    let xshape = tape.value(x).shape().to_vec();
    if xshape.len() != 3 {
        return Err(Error::Shape(format!(
            "conv1d expects [N, C, T], got {xshape:?}"
        )));
    }
    let wshape = tape.value(weights).shape().to_vec();
    if wshape.len() != 4 {
        return Err(Error::Shape(format!(
            "operational 1d weights must be [Q, c_out, c_in, k], got {wshape:?}"
        )));
    }
    let (n, c, t) = (xshape[0], xshape[1], xshape[2]);
    let x4 = tape.reshape(x, &[n, c, 1, t])?;
    let w4 = tape.reshape(weights, &[wshape[0], wshape[1], wshape[2], 1, wshape[3]])?;
    let y4 = selfonn_conv2d(tape, x4, w4, bias, geom.as_2d())?;
    let yshape = tape.value(y4).shape().to_vec();
    tape.reshape(y4, &[yshape[0], yshape[1], yshape[3]])
}

/// Deformable 2D convolution with precomputed offsets plus bias.
pub fn deformable_conv2d(
    tape: &mut Tape,
    x: Var,
    offsets: Var,
    weights: Var,
    bias: Var,
    geom: Conv2dGeom,
) -> Result<Var> {
    let wshape = tape.value(weights).shape().to_vec();
    let w = if wshape.len() == 5 {
        if wshape[0] != 1 {
            return Err(Error::Shape(format!(
                "deformable convolution is built on Q=1 kernels, got Q = {}",
                wshape[0]
            )));
        }
        tape.index_axis(weights, 0, 0)?
    } else {
        weights
    };
    let y = deform_conv2d_raw(tape, x, offsets, w, geom)?;
    tape.add_bias(y, bias, 1)
}
