//! Dense tensors and reverse-mode differentiation.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{BnState, ReduceMode, Tape, Var, BN_EPS, BN_MOMENTUM};
pub(crate) use tape::softmax_rows;
pub use tensor::Tensor;
