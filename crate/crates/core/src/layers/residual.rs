use crate::tape::Unary;
use crate::tensor::{Tensor, TensorResult};

/// Mixing coefficient shared by a split and its reconvergence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitParam {
    pub raw: f64,
}

impl SplitParam {
    /// `clamp(raw, 0, 1)`.
    pub fn t(&self) -> f64 {
        Unary::Clamp01.apply_scalar(self.raw)
    }

    /// `sqrt(1 - t^2)`.
    pub fn complement(&self) -> f64 {
        Unary::SqrtOneMinusSq.apply_scalar(self.t())
    }
}

/// `(t x, sqrt(1 - t^2) x)`.
pub fn split_copy(x: &Tensor, p: SplitParam) -> (Tensor, Tensor) {
    let (t, s) = (p.t(), p.complement());
    (x.map(|v| t * v), x.map(|v| s * v))
}

/// `t x1 + sqrt(1 - t^2) fx2` on the channels of `x1`; any extra channels of
/// `fx2` (axis 1) pass through unchanged.
pub fn reconverge_add(x1: &Tensor, fx2: &Tensor, p: SplitParam) -> TensorResult<Tensor> {
    super::eval(x1, |tape, a| {
        let b = tape.leaf(fx2.clone());
        let t = tape.leaf(Tensor::scalar(p.t()));
        let s = tape.leaf(Tensor::scalar(p.complement()));
        tape.reconverge(a, b, t, s)
    })
}
