use crate::tape::{gram_row_sums, GramSide, Tape, Unary, Var};
use crate::tensor::{Tensor, TensorError, TensorResult};

/// How a weight matrix is kept nonexpansive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WeightMode {
    /// Forward uses `W / sqrt(b(W))`.
    Rescale,
    /// Forward uses `W`; a hinge penalty on `b(W)` is added to the loss.
    Penalty,
    /// Unconstrained (baselines and ablations).
    Free,
}

fn dims(w: &Tensor) -> (usize, usize) {
    match w.shape() {
        [r, c] => (*r, *c),
        s => panic!("expected a matrix, got shape {s:?}"),
    }
}

/// `min(r(W^T W), r(W W^T))`, an upper bound on the largest eigenvalue of `W^T W`.
pub fn weight_bound_b(w: &Tensor) -> f64 {
    let (r, c) = dims(w);
    let max = |v: Vec<f64>| v.into_iter().fold(0.0f64, f64::max);
    let inner = max(gram_row_sums(w.data(), r, c, GramSide::Inner).0);
    let outer = max(gram_row_sums(w.data(), r, c, GramSide::Outer).0);
    inner.min(outer)
}

/// `W / sqrt(b(W))`; an all-zero `W` is returned unchanged.
pub fn normalize_weight(w: &Tensor) -> Tensor {
    let b = weight_bound_b(w);
    if b > 0.0 {
        let k = 1.0 / b.sqrt();
        w.map(|v| v * k)
    } else {
        w.clone()
    }
}

/// `min(l(W^T W), l(W W^T))` with `l(M) = sum_i max(sum_j |M_ij| - 1, 0)`.
pub fn weight_penalty(w: &Tensor) -> f64 {
    let (r, c) = dims(w);
    let l = |side| {
        gram_row_sums(w.data(), r, c, side)
            .0
            .iter()
            .map(|s| (s - 1.0).max(0.0))
            .sum::<f64>()
    };
    l(GramSide::Inner).min(l(GramSide::Outer))
}

/// Records the weight actually used in the forward pass.
///
/// With `stop_bound_grad` the rescaling factor is treated as a constant.
pub fn effective_weight(tape: &mut Tape, w: Var, mode: WeightMode, stop_bound_grad: bool) -> TensorResult<Var> {
    match mode {
        WeightMode::Rescale => {
            let src = if stop_bound_grad { tape.detach(w) } else { w };
            let b = tape.weight_bound(src)?;
            let k = tape.unary(b, Unary::RsqrtGuarded);
            tape.mul_scalar(w, k)
        }
        WeightMode::Penalty | WeightMode::Free => Ok(w),
    }
}

/// A dense layer `y = W'x + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    /// `out_features x in_features`.
    pub w: Tensor,
    pub bias: Tensor,
    pub mode: WeightMode,
}

impl WeightMatrix {
    pub fn new(w: Tensor, bias: Tensor, mode: WeightMode) -> TensorResult<Self> {
        let (r, _) = match w.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(TensorError::Invalid {
                    op: "weight_matrix",
                    msg: format!("expected a matrix, got shape {s:?}"),
                })
            }
        };
        if bias.shape() != [r] {
            return Err(TensorError::ShapeMismatch {
                op: "weight_matrix",
                lhs: w.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { w, bias, mode })
    }

    /// The matrix used in the forward pass.
    pub fn effective(&self) -> Tensor {
        match self.mode {
            WeightMode::Rescale => normalize_weight(&self.w),
            WeightMode::Penalty | WeightMode::Free => self.w.clone(),
        }
    }
}

pub fn linear_forward(x: &[f64], layer: &WeightMatrix) -> TensorResult<Vec<f64>> {
    let (r, c) = dims(&layer.w);
    if x.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "linear_forward",
            lhs: layer.w.shape().to_vec(),
            rhs: vec![x.len()],
        });
    }
    let w = layer.effective();
    Ok((0..r)
        .map(|i| {
            let row = &w.data()[i * c..(i + 1) * c];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + layer.bias.data()[i]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::l2_distance;
    use proptest::prelude::*;

    fn m(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn bound_examples() {
        assert_eq!(weight_bound_b(&Tensor::identity(3)), 1.0);
        assert_eq!(weight_bound_b(&m(2, 2, &[1.0, 1.0, 0.0, 0.0])), 2.0);
        // Orthonormal rows.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let q = m(2, 3, &[s, s, 0.0, -s, s, 0.0]);
        assert!((weight_bound_b(&q) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_examples() {
        let w = normalize_weight(&m(2, 2, &[2.0, 0.0, 0.0, 2.0]));
        assert_eq!(w, Tensor::identity(2));
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(normalize_weight(&z), z);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(weight_penalty(&Tensor::identity(3)), 0.0);
        assert_eq!(weight_penalty(&m(2, 2, &[1.0, 1.0, 0.0, 0.0])), 1.0);
        assert_eq!(weight_penalty(&m(2, 2, &[0.5, 0.5, 0.0, 0.0])), 0.0);
    }

    #[test]
    fn linear_examples() {
        let id = WeightMatrix::new(Tensor::identity(2), Tensor::zeros(&[2]), WeightMode::Rescale).unwrap();
        assert_eq!(linear_forward(&[0.3, -0.4], &id).unwrap(), vec![0.3, -0.4]);
        let two = WeightMatrix::new(m(2, 2, &[2.0, 0.0, 0.0, 2.0]), Tensor::zeros(&[2]), WeightMode::Rescale).unwrap();
        assert_eq!(linear_forward(&[1.0, 1.0], &two).unwrap(), vec![1.0, 1.0]);
        assert!(linear_forward(&[1.0], &two).is_err());
    }

    #[test]
    fn tape_rescale_matches_value_rescale() {
        let w = m(2, 3, &[0.5, -1.5, 2.0, 0.1, 0.3, -0.7]);
        let mut tape = Tape::new();
        let v = tape.leaf(w.clone());
        let e = effective_weight(&mut tape, v, WeightMode::Rescale, false).unwrap();
        assert_eq!(tape.value(e), &normalize_weight(&w));
    }

    fn matrix_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..9, 1usize..9)
            .prop_flat_map(|(r, c)| prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap()))
    }

    proptest! {
        #[test]
        fn normalized_bound_is_one(w in matrix_strategy()) {
            prop_assume!(w.data().iter().any(|v| v.abs() > 1e-3));
            let b = weight_bound_b(&normalize_weight(&w));
            prop_assert!((b - 1.0).abs() <= 1e-9, "b = {b}");
        }

        #[test]
        fn zero_penalty_means_nonexpansive(w in matrix_strategy(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let w = normalize_weight(&w).map(|v| v * 0.999);
            prop_assert_eq!(weight_penalty(&w), 0.0);
            let layer = WeightMatrix::new(w.clone(), Tensor::zeros(&[w.shape()[0]]), WeightMode::Penalty).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c = w.shape()[1];
            let a: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (ya, yb) = (linear_forward(&a, &layer).unwrap(), linear_forward(&b, &layer).unwrap());
            prop_assert!(l2_distance(&ya, &yb) <= l2_distance(&a, &b) + 1e-12);
        }
    }
}
