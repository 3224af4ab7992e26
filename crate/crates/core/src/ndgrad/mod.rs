//! Dense tensors with define-by-run reverse-mode differentiation.

mod check;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use tape::{
    BatchMoments, BatchNormState, Gradients, Mode, Tape, BN_EPS, BN_MOMENTUM, NORM_EPS,
};
pub use tensor::{NodeId, Tensor};
