//! Nonexpansive layer constructions.
//!
//! Each function here is a value-level wrapper over the matching tape
//! primitive; the model builder uses the tape forms directly.

mod conv;
mod nonlin;
mod norm;
mod pool;
mod residual;
mod weight;

pub use conv::{conv_forward, ConvSpec, Padding};
pub use nonlin::{scaled_sigmoid, two_sided_lift, two_sided_relu, SigmoidParam};
pub use norm::{clip_scale, mean_center};
pub use pool::{max_pool, norm_pool, PoolSpec};
pub use residual::{reconverge_add, split_copy, SplitParam};
pub use weight::{effective_weight, linear_forward, normalize_weight, weight_bound_b, weight_penalty, WeightMatrix, WeightMode};

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorResult};

/// Evaluates a one-input tape expression without recording gradients.
pub(crate) fn eval(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> TensorResult<Var>) -> TensorResult<Tensor> {
    let mut tape = Tape::without_grad();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}
