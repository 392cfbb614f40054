//! Operational neural-network layers with generative neurons, deformable
//! convolution, CTC sequence loss, and handwriting-recognition metrics,
//! built on a small f64 reverse-mode autodiff core.
//!
//! The crate is organized around one capability per module:
//!
//! - [`tensor`]: dense tensors, the autodiff tape, and the finite-difference
//!   oracle every gradient in the crate is checked against.
//! - [`layers`]: standard, operational (Maclaurin-series), and deformable
//!   convolutions in 1D and 2D.
//! - [`ctc`]: connectionist temporal classification loss, gradient, and
//!   greedy decoding, with a brute-force path-enumeration oracle.
//! - [`metrics`]: Levenshtein-based CER/WER and the Wilcoxon signed-rank
//!   test for paired model comparison.
//! - [`model`]: declarative backbone+head assembly producing per-frame
//!   log-probabilities, plus binary checkpoints.
//! - [`data`]: synthetic text-line rendering, PGM images, and TSV manifests.
//! - [`trainer`]: Adam optimization loop, evaluation, and best-model
//!   tracking.
//! - [`cli`]: the `selfonn` command-line front end.
//!
//! See the crate `examples/` directory for one runnable example per
//! capability, and `tests/acceptance.rs` for the verification suite.

pub mod ctc;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};
