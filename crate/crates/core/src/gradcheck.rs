//! Central-difference gradient checking.

use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / (|analytic| + 1e-8)`,
/// where `numeric` is the central difference of `f` at `x` with step `h`.
pub fn finite_diff_check(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor, h: f64) -> f64 {
    assert!(h > 0.0, "step must be positive");
    assert_eq!(x.shape(), analytic.shape(), "gradient shape");
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    worst
}

/// Relative error of the gradient of `f` as computed by a tape, where `f`
/// records its computation on the tape from a leaf holding `x`.
pub fn tape_gradient_error(f: impl Fn(&mut crate::Tape, crate::Var) -> crate::Var, x: &Tensor, h: f64) -> f64 {
    let mut tape = crate::Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf);
    tape.backward(out).expect("scalar output");
    let analytic = tape.grad(leaf);
    let eval = |p: &Tensor| {
        let mut t = crate::Tape::without_grad();
        let l = t.leaf(p.clone());
        let o = f(&mut t, l);
        t.value(o).item()
    };
    finite_diff_check(eval, x, &analytic, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    /// Values bounded away from zero so no draw sits within 10h of a kink.
    fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.05..1.5);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Reduces `y` to a scalar through a fixed random projection.
    fn project(tape: &mut Tape, y: Var) -> Var {
        let shape = tape.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let r: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.618).sin() + 0.3).collect();
        let r = tape.leaf(Tensor::new(shape, r).unwrap());
        let p = tape.mul(y, r).unwrap();
        tape.sum(p)
    }

    fn check(name: &str, points: usize, shape: &[usize], f: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
        for _ in 0..points {
            let x = away_from_zero(&mut rng, shape);
            let err = tape_gradient_error(
                |t, v| {
                    let y = f(t, v);
                    project(t, y)
                },
                &x,
                H,
            );
            assert!(err < TOL, "{name}: relative error {err} at {x:?}");
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let err = finite_diff_check(|p| p.item() * p.item(), &x, &Tensor::scalar(6.0), H);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![1.0, -2.0]);
        let err = finite_diff_check(|_| 4.0, &x, &Tensor::zeros(&[2]), H);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn two_sided_relu_sum_at_one() {
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let err = tape_gradient_error(
            |t, v| {
                let y = t.two_sided_relu(v).unwrap();
                t.sum(y)
            },
            &x,
            H,
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn norm_of_matrix_vector_product() {
        let w = Tensor::matrix(3, 2, vec![0.3, -1.2, 2.0, 0.5, -0.7, 0.9]).unwrap();
        let err = tape_gradient_error(
            |t, wv| {
                let x = t.leaf(Tensor::matrix(2, 1, vec![0.4, -1.1]).unwrap());
                let y = t.matmul(wv, x).unwrap();
                t.sum_sq(y)
            },
            &w,
            H,
        );
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn elementwise_and_unary_primitives() {
        for f in [Unary::Relu, Unary::Neg, Unary::Tanh, Unary::Sigmoid, Unary::Exp, Unary::Abs] {
            check("unary", 100, &[2, 3], move |t, v| t.unary(v, f));
        }
        // Positive-domain functions.
        check("ln", 100, &[5], |t, v| {
            let a = t.unary(v, Unary::Abs);
            t.unary(a, Unary::Ln)
        });
        check("sqrt", 100, &[5], |t, v| {
            let a = t.unary(v, Unary::Abs);
            t.unary(a, Unary::Sqrt)
        });
        check("rsqrt", 100, &[5], |t, v| {
            let a = t.unary(v, Unary::Abs);
            t.unary(a, Unary::RsqrtGuarded)
        });
        check("clamp01", 100, &[5], |t, v| {
            let a = t.scale(v, 0.5);
            t.unary(a, Unary::Clamp01)
        });
        check("sqrt_one_minus_sq", 100, &[5], |t, v| {
            let a = t.scale(v, 0.6);
            t.unary(a, Unary::SqrtOneMinusSq)
        });
        check("binary", 100, &[4], |t, v| {
            let c = t.leaf(Tensor::vector(vec![0.5, -1.0, 2.0, 0.1]));
            let a = t.add(v, c).unwrap();
            let b = t.sub(a, v).unwrap();
            let m = t.mul(v, a).unwrap();
            let s = t.add(m, b).unwrap();
            t.scale(s, -1.5)
        });
        check("reductions", 100, &[2, 2], |t, v| {
            let a = t.sum(v);
            let b = t.mean(v);
            let c = t.sum_sq(v);
            let ab = t.mul(a, b).unwrap();
            t.add(ab, c).unwrap()
        });
    }

    #[test]
    fn broadcast_and_scalar_primitives() {
        let x = Tensor::new(vec![2, 3, 2], (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        check("bias", 50, &[3], |t, b| {
            let xv = t.leaf(x.clone());
            t.add_bias(xv, b).unwrap()
        });
        check("channel_scale_wrt_scale", 50, &[3], |t, s| {
            let xv = t.leaf(x.clone());
            t.mul_channel(xv, s).unwrap()
        });
        check("channel_scale_wrt_input", 50, &[2, 3, 2], |t, xv| {
            let s = t.leaf(Tensor::vector(vec![0.5, -2.0, 1.5]));
            t.mul_channel(xv, s).unwrap()
        });
        check("mul_scalar", 50, &[1], |t, s| {
            let xv = t.leaf(x.clone());
            let s = t.reshape(s, &[]).unwrap();
            t.mul_scalar(xv, s).unwrap()
        });
        check("clip_scale", 100, &[5], |t, s| t.clip_scale(s));
    }

    #[test]
    fn matrix_primitives() {
        let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        check("linear_wrt_w", 50, &[2, 4], |t, w| {
            let xv = t.leaf(x.clone());
            t.linear(xv, w).unwrap()
        });
        check("linear_wrt_x", 50, &[3, 4], |t, xv| {
            let w = t.leaf(Tensor::matrix(2, 4, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.25]).unwrap());
            t.linear(xv, w).unwrap()
        });
        check("matmul_both", 50, &[3, 3], |t, a| t.matmul(a, a).unwrap());
        check("weight_bound", 100, &[4, 3], |t, w| t.weight_bound(w).unwrap());
        check("weight_bound_wide", 100, &[2, 5], |t, w| t.weight_bound(w).unwrap());
        check("weight_penalty", 100, &[4, 3], |t, w| t.weight_penalty(w).unwrap());
        check("weight_penalty_wide", 100, &[2, 5], |t, w| t.weight_penalty(w).unwrap());
        check("row_normalize", 100, &[3, 4], |t, w| t.row_normalize(w).unwrap());
        check("row_penalty", 100, &[3, 4], |t, w| t.row_penalty(w).unwrap());
        check("rescale", 50, &[3, 3], |t, w| {
            // W / sqrt(b(W)), the full rescaling path.
            let b = t.weight_bound(w).unwrap();
            let r = t.unary(b, Unary::RsqrtGuarded);
            t.mul_scalar(w, r).unwrap()
        });
    }

    #[test]
    fn layer_primitives() {
        let geom = ConvGeom {
            channels: 2,
            height: 5,
            width: 5,
            kernel: [3, 3],
            stride: [2, 2],
            pad: [1, 1],
            out_height: 3,
            out_width: 3,
        };
        let x = Tensor::new(vec![2, 2, 5, 5], (0..100).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        check("conv_wrt_w", 20, &[3, 18], |t, w| {
            let xv = t.leaf(x.clone());
            t.conv2d(xv, w, geom).unwrap()
        });
        check("conv_wrt_x", 20, &[2, 2, 5, 5], |t, xv| {
            let w = t.leaf(Tensor::matrix(3, 18, (0..54).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap());
            t.conv2d(xv, w, geom).unwrap()
        });
        check("two_sided_relu", 100, &[2, 3, 2], |t, v| t.two_sided_relu(v).unwrap());
        for f in [LiftFn::Relu, LiftFn::Tanh, LiftFn::Sigmoid] {
            check("lift", 100, &[2, 3], move |t, v| t.two_sided_lift(v, f, None).unwrap());
        }
        let tvec = Tensor::vector(vec![0.5, 1.0, 2.5]);
        let tv = tvec.clone();
        check("lift_scaled_wrt_x", 100, &[2, 3, 2], move |t, v| {
            let tt = t.leaf(tv.clone());
            t.two_sided_lift(v, LiftFn::ScaledSigmoid, Some(tt)).unwrap()
        });
        check("lift_scaled_wrt_t", 100, &[3], |t, raw| {
            let xv = t.leaf(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.05, 0.7, -0.4]).unwrap());
            let tt = t.unary(raw, Unary::Exp);
            t.two_sided_lift(xv, LiftFn::ScaledSigmoid, Some(tt)).unwrap()
        });
        check("scaled_sigmoid", 100, &[3], |t, raw| {
            let xv = t.leaf(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.05, 0.7, -0.4]).unwrap());
            let tt = t.unary(raw, Unary::Exp);
            let y = t.scaled_sigmoid(xv, tt).unwrap();
            let y2 = t.scaled_sigmoid(y, tt).unwrap();
            t.add(y, y2).unwrap()
        });
        let pool = PoolGeom {
            channels: 2,
            height: 4,
            width: 4,
            window: [2, 2],
            stride: [1, 1],
            out_height: 3,
            out_width: 3,
        };
        check("norm_pool", 100, &[1, 2, 4, 4], |t, v| t.norm_pool(v, pool).unwrap());
        check("max_pool", 100, &[1, 2, 4, 4], |t, v| t.max_pool(v, pool).unwrap());
        for axes in [CenterAxes::All, CenterAxes::Channels, CenterAxes::Spatial] {
            check("center", 50, &[2, 3, 4], move |t, v| t.mean_center(v, axes).unwrap());
        }
    }

    #[test]
    fn reconverge_primitive() {
        let x1 = Tensor::new(vec![2, 2, 3], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let fx2 = Tensor::new(vec![2, 4, 3], (0..24).map(|i| (i as f64 * 0.5).cos()).collect()).unwrap();
        let (a, b) = (x1.clone(), fx2.clone());
        check("reconverge_wrt_t", 100, &[], move |t, raw| {
            let xa = t.leaf(a.clone());
            let xb = t.leaf(b.clone());
            let half = t.scale(raw, 0.4);
            let tt = t.unary(half, Unary::Clamp01);
            let s = t.unary(tt, Unary::SqrtOneMinusSq);
            t.reconverge(xa, xb, tt, s).unwrap()
        });
        let b = fx2.clone();
        check("reconverge_wrt_x1", 50, &[2, 2, 3], move |t, xa| {
            let xb = t.leaf(b.clone());
            let tt = t.leaf(Tensor::scalar(0.6));
            let s = t.leaf(Tensor::scalar(0.8));
            t.reconverge(xa, xb, tt, s).unwrap()
        });
        let a = x1.clone();
        check("reconverge_wrt_fx2", 50, &[2, 4, 3], move |t, xb| {
            let xa = t.leaf(a.clone());
            let tt = t.leaf(Tensor::scalar(0.6));
            let s = t.leaf(Tensor::scalar(0.8));
            t.reconverge(xa, xb, tt, s).unwrap()
        });
    }

    #[test]
    fn loss_primitives() {
        let labels = [2usize, 0, 1];
        check("softmax_ce", 100, &[3, 4], |t, z| {
            let l = t.softmax_ce(z, &labels).unwrap();
            t.scale(l, 1.0)
        });
        check("log_one_minus_softmax", 100, &[3, 4], |t, z| {
            let l = t.log_one_minus_softmax(z, &labels).unwrap();
            t.scale(l, 1.0)
        });
    }
}
