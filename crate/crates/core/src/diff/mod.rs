//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records primitives as they are applied to [`Var`] handles and
//! replays them backwards in one sweep. Tapes are cheap and meant to be
//! rebuilt for every optimization step.

mod tape;
mod tensor;

pub use tape::{Gradients, Primitive, Tape, Var};
pub(crate) use tape::is_permutation;
pub use tensor::Tensor;

use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {reason}")]
    Invalid {
        op: &'static str,
        reason: &'static str,
    },
}
