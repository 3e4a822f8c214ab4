//! Dense tensors and the reverse-mode tape that differentiates them.

mod array;
pub(crate) mod kernels;
mod tape;

pub use array::Tensor;
pub use tape::{BatchStats, BnMode, KinkPattern, PoolMode, Tape, Var, BN_EPS};
