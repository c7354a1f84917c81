// `!(x > 0.0)` is used on purpose so NaN fails validation; kernels index by position.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attack;
pub mod baselines;
pub mod certify;
pub mod datasets;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{CenterAxes, ConvGeom, GramSide, LiftFn, PoolGeom, Tape, Unary, Var};
pub use tensor::{Tensor, TensorError, TensorResult};
