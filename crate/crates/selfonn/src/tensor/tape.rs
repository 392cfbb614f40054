//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every operation appends one entry holding the forward value and a boxed
//! backward rule. Entries only ever reference earlier entries, so a single
//! reverse sweep visits each node exactly once and accumulates gradients
//! additively across fan-out.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule: receives the output gradient and scatters contributions
/// into the input buffers through [`BackCtx`].
pub type BackFn = Box<dyn Fn(&mut BackCtx<'_>, &[f64])>;

pub(crate) struct Entry {
    value: Tensor,
    needs_grad: bool,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Record a leaf value. Gradient flows into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// Record a parameter tensor, honoring its own `requires_grad` flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Append an operation result. `needs_grad` should be the OR of the
    /// inputs' flags; when false the backward rule is dropped.
    pub fn push(&mut self, value: Tensor, needs_grad: bool, back: Option<BackFn>) -> Var {
        let id = self.entries.len();
        self.entries.push(Entry {
            value,
            needs_grad,
            back: if needs_grad { back } else { None },
        });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.entries[v.0].needs_grad
    }

    /// Reverse sweep from a scalar loss. Returns one gradient buffer per
    /// reachable node; leaves that do not require grad receive none.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let loss_entry = &self.entries[loss.0];
        if loss_entry.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_entry.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.entries.len()];
        if !loss_entry.needs_grad {
            return Ok(Grads { bufs: grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.entries[i].back {
                let mut ctx = BackCtx {
                    entries: &self.entries,
                    grads: &mut grads,
                };
                back(&mut ctx, &g);
            }
            grads[i] = Some(g);
        }
        #[cfg(debug_assertions)]
        for (i, buf) in grads.iter().enumerate() {
            if let Some(b) = buf {
                if !b.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of tape node {i}")));
                }
            }
        }
        Ok(Grads { bufs: grads })
    }
}

/// Context handed to backward rules during the reverse sweep.
pub struct BackCtx<'a> {
    entries: &'a [Entry],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> BackCtx<'a> {
    /// Forward value of any earlier node.
    pub fn val(&self, v: Var) -> &'a Tensor {
        &self.entries[v.0].value
    }

    /// Whether gradient should be propagated into `v` at all.
    pub fn wants(&self, v: Var) -> bool {
        self.entries[v.0].needs_grad
    }

    /// Gradient buffer of `v`, allocated on first touch.
    pub fn buf(&mut self, v: Var) -> &mut [f64] {
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.entries[v.0].value.numel()]);
        }
        slot.as_mut().unwrap()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.bufs.get_mut(v.0).and_then(|b| b.take())
    }
}
