use crate::tape::{LiftFn, Unary};
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Per-neuron slope parameter of the scaled sigmoid, stored as `ln t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmoidParam {
    pub raw: Tensor,
}

impl SigmoidParam {
    pub fn ones(channels: usize) -> Self {
        Self {
            raw: Tensor::zeros(&[channels]),
        }
    }

    pub fn t(&self) -> Tensor {
        self.raw.map(f64::exp)
    }
}

/// `[max(x, 0), max(-x, 0)]` along axis 1 of a batch `[N, C, ...]`.
pub fn two_sided_relu(x: &Tensor) -> TensorResult<Tensor> {
    super::eval(x, |t, v| t.two_sided_relu(v))
}

/// `[f(x), f(x) - x]` along axis 1. `t` is needed only for the scaled sigmoid.
pub fn two_sided_lift(x: &Tensor, f: LiftFn, t: Option<&SigmoidParam>) -> TensorResult<Tensor> {
    super::eval(x, |tape, v| {
        let tv = t.map(|p| tape.leaf(p.t()));
        tape.two_sided_lift(v, f, tv)
    })
}

/// `t * sigmoid(4x / t)` per channel.
pub fn scaled_sigmoid(x: &Tensor, t: &SigmoidParam) -> TensorResult<Tensor> {
    if t.raw.data().iter().any(|r| !r.is_finite()) {
        return Err(TensorError::Invalid {
            op: "scaled_sigmoid",
            msg: "t must be finite and positive".into(),
        });
    }
    super::eval(x, |tape, v| {
        let raw = tape.leaf(t.raw.clone());
        let tv = tape.unary(raw, Unary::Exp);
        tape.scaled_sigmoid(v, tv)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use proptest::prelude::*;

    fn col(v: f64) -> Tensor {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    #[test]
    fn two_sided_relu_examples() {
        assert_eq!(two_sided_relu(&col(2.0)).unwrap().data(), &[2.0, 0.0]);
        assert_eq!(two_sided_relu(&col(-3.0)).unwrap().data(), &[0.0, 3.0]);
        assert_eq!(two_sided_relu(&col(0.0)).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn lift_examples() {
        assert_eq!(two_sided_lift(&col(2.0), LiftFn::Relu, None).unwrap().data(), &[2.0, 0.0]);
        assert_eq!(two_sided_lift(&col(0.0), LiftFn::Tanh, None).unwrap().data(), &[0.0, 0.0]);
        // Positive branch first across a multi-channel input.
        let x = Tensor::new(vec![1, 2], vec![1.5, -0.5]).unwrap();
        assert_eq!(two_sided_relu(&x).unwrap().data(), &[1.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn scaled_sigmoid_examples() {
        let one = SigmoidParam::ones(1);
        assert_eq!(scaled_sigmoid(&col(0.0), &one).unwrap().data(), &[0.5]);
        let big = SigmoidParam {
            raw: Tensor::vector(vec![3.0f64.ln()]),
        };
        let y = scaled_sigmoid(&col(1e4), &big).unwrap().item();
        assert!((y - 3.0).abs() < 1e-12);
        for raw in [-2.0, 0.0, 1.7] {
            let mut tape = Tape::new();
            let x = tape.leaf(col(0.0));
            let r = tape.leaf(Tensor::vector(vec![raw]));
            let t = tape.unary(r, Unary::Exp);
            let y = tape.scaled_sigmoid(x, t).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            assert!((tape.grad(x).item() - 1.0).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn relu_lift_equals_two_sided_relu(v in -10.0f64..10.0) {
            // relu(x) - x == relu(-x)
            let a = two_sided_lift(&col(v), LiftFn::Relu, None).unwrap();
            let b = two_sided_relu(&col(v)).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }

        #[test]
        fn scaled_sigmoid_slope_at_most_one(x in -20.0f64..20.0, raw in -3.0f64..3.0) {
            let mut tape = Tape::new();
            let xv = tape.leaf(col(x));
            let r = tape.leaf(Tensor::vector(vec![raw]));
            let t = tape.unary(r, Unary::Exp);
            let y = tape.scaled_sigmoid(xv, t).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            let d = tape.grad(xv).item();
            prop_assert!((0.0..=1.0 + 1e-15).contains(&d));
        }
    }
}
