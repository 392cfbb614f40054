//! Dense f64 tensors with a reverse-mode autodiff tape.
//!
//! Storage is a flat row-major `Vec<f64>` plus an explicit shape. There are
//! no views or strides; convolution gets its fast path from im2col instead.
//! Gradients are accumulated additively by [`Tape::backward`]; callers zero
//! leaf grads between optimizer steps.

mod fdcheck;
mod ops;
mod tape;

pub use fdcheck::{finite_difference_grad, max_rel_err, rel_err};
pub use ops::BnRunning;
pub use tape::{BackCtx, BackFn, Grads, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

/// N-dimensional real-valued array, the universal value type.
///
/// `data` is row-major; `grad`, when present, has the same length as `data`.
/// All stored values are finite: NaN/Inf are rejected at construction, and in
/// debug builds every backward pass re-checks the gradients it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {numel} elements, data has {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-1 scalar wrapper (`shape == [1]`).
    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform draw in `[lo, hi)`, one rng call per element in flat order.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizer updates between passes.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    /// Flat offset of a multi-index (debug-checked bounds).
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for i in (0..idx.len()).rev() {
            debug_assert!(idx[i] < self.shape[i]);
            off += idx[i] * stride;
            stride *= self.shape[i];
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    /// Sum of the element-wise product of `grad` contributions; used by the
    /// trainer to accumulate tape gradients onto leaf tensors.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::new(vec![0], vec![]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn construction_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn strides_and_indexing() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 3.0, 4.0][..]));
        t.zero_grad();
        assert!(t.grad.is_none());
    }
}
