//! Confidence gaps, certified L2 radii, Jacobian norms and empirical
//! Lipschitz audits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{argmax, CertMode, Classifier, Model};
use crate::tensor::{l2_distance, l2_norm, Tensor, TensorError};

/// Slack for nonexpansiveness checks in 64-bit arithmetic.
pub const LIPSCHITZ_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CertifyError {
    #[error("confidence gap needs at least 2 logits, got {0}")]
    TooFewClasses(usize),
    #[error("negative confidence gap {0}")]
    NegativeGap(f64),
    #[error("gap bound check needs different labels, both are {0}")]
    SameLabel(usize),
    #[error("power iteration did not converge in {iterations} iterations (last estimate {estimate})")]
    NoConvergence { iterations: usize, estimate: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub id: usize,
    pub logits: Vec<f64>,
    pub predicted: usize,
    pub gap: f64,
    pub radius: f64,
    pub mode: CertMode,
}

/// Largest minus second-largest entry.
pub fn confidence_gap(logits: &[f64]) -> Result<f64, CertifyError> {
    if logits.len() < 2 {
        return Err(CertifyError::TooFewClasses(logits.len()));
    }
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in logits {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    Ok(a - b)
}

/// L2 radius within which the predicted label cannot change.
pub fn certified_radius(gap: f64, mode: CertMode) -> Result<f64, CertifyError> {
    if gap < 0.0 || gap.is_nan() {
        return Err(CertifyError::NegativeGap(gap));
    }
    Ok(match mode {
        CertMode::Single => gap / std::f64::consts::SQRT_2,
        CertMode::Multi => gap / 2.0,
    })
}

impl Certificate {
    pub fn from_logits(id: usize, logits: Vec<f64>, mode: CertMode) -> Result<Self, CertifyError> {
        let gap = confidence_gap(&logits)?;
        Ok(Self {
            id,
            predicted: argmax(&logits),
            radius: certified_radius(gap, mode)?,
            gap,
            logits,
            mode,
        })
    }
}

/// Certificates for every row of a batch; ids start at `first_id`.
pub fn certify_batch<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    mode: CertMode,
    first_id: usize,
) -> Result<Vec<Certificate>, CertifyError> {
    let logits = model.logits(x)?;
    (0..logits.rows())
        .map(|i| Certificate::from_logits(first_id + i, logits.row(i).to_vec(), mode))
        .collect()
}

/// `g(x1) + g(x2) <= sqrt(2) * distance` for two inputs predicted as
/// different labels.
///
/// With `distance = |y(x1) - y(x2)|` this holds for any logit vectors; with
/// the input distance `|x1 - x2|` it holds for every single-output
/// nonexpansive model.
pub fn pairwise_gap_bound_check(a: &Certificate, b: &Certificate, distance: f64) -> Result<bool, CertifyError> {
    if a.predicted == b.predicted {
        return Err(CertifyError::SameLabel(a.predicted));
    }
    Ok(a.gap + b.gap <= std::f64::consts::SQRT_2 * distance + LIPSCHITZ_TOL)
}

/// Logit-space form of [`pairwise_gap_bound_check`].
pub fn logit_gap_bound_check(a: &Certificate, b: &Certificate) -> Result<bool, CertifyError> {
    pairwise_gap_bound_check(a, b, l2_distance(&a.logits, &b.logits))
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianNorm {
    pub value: f64,
    pub iterations: usize,
    /// Largest L2 norm of a single Jacobian row (one logit's gradient).
    pub max_row_norm: f64,
}

pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITERS: usize = 500;

/// Largest singular value of the logits-to-input Jacobian at one input
/// (`x` has the per-sample shape).
///
/// The K rows come from one batched backward pass; power iteration then runs
/// on `J^T J`. A stalled iterate is restarted from a fresh random vector.
pub fn jacobian_l2_norm<C: Classifier + ?Sized>(model: &C, x: &Tensor, seed: u64) -> Result<JacobianNorm, CertifyError> {
    let k = model.num_classes();
    let n = x.len();
    let mut shape = vec![k];
    shape.extend_from_slice(x.shape());
    let mut data = Vec::with_capacity(k * n);
    for _ in 0..k {
        data.extend_from_slice(x.data());
    }
    let batch = Tensor::new(shape, data)?;
    let (_, grad) = model.logits_and_input_grad(&batch, &|l: &Tensor| {
        let kk = l.row_len();
        let mut s = Tensor::zeros(l.shape());
        for i in 0..l.rows() {
            s.data_mut()[i * kk + i] = 1.0;
        }
        s
    })?;
    let jac: Vec<&[f64]> = (0..k).map(|i| grad.row(i)).collect();
    let max_row_norm = jac.iter().map(|r| l2_norm(r)).fold(0.0, f64::max);
    if max_row_norm == 0.0 {
        return Ok(JacobianNorm {
            value: 0.0,
            iterations: 0,
            max_row_norm,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = l2_norm(&v);
        v.into_iter().map(|a| a / norm).collect::<Vec<f64>>()
    };
    let mut v = random_unit(&mut rng);
    let mut est = 0.0;
    let mut stalled = 0;
    for it in 1..=POWER_MAX_ITERS {
        // w = J^T J v
        let jv: Vec<f64> = jac.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let mut w = vec![0.0; n];
        for (r, c) in jac.iter().zip(&jv) {
            for (wi, ri) in w.iter_mut().zip(r.iter()) {
                *wi += c * ri;
            }
        }
        let lambda = l2_norm(&w);
        if lambda == 0.0 {
            // v fell into the null space; retry from another direction.
            v = random_unit(&mut rng);
            continue;
        }
        let next = lambda.sqrt();
        let change = (next - est).abs();
        est = next;
        v = w.into_iter().map(|a| a / lambda).collect();
        if change <= POWER_TOL * est.max(1.0) {
            stalled += 1;
            if stalled >= 2 {
                return Ok(JacobianNorm {
                    value: est,
                    iterations: it,
                    max_row_norm,
                });
            }
        } else {
            stalled = 0;
        }
    }
    Err(CertifyError::NoConvergence {
        iterations: POWER_MAX_ITERS,
        estimate: est,
    })
}

/// Distance growth across one top-level layer for a violating pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStep {
    pub layer: String,
    pub input_distance: f64,
    pub output_distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub pair: usize,
    /// Offending logit in multi mode; `None` for the whole vector.
    pub logit: Option<usize>,
    pub input_distance: f64,
    pub output_distance: f64,
    pub trace: Vec<LayerStep>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzReport {
    pub mode: CertMode,
    pub pairs: usize,
    /// Largest observed output/input distance ratio.
    pub max_ratio: f64,
    pub violations: Vec<Violation>,
}

/// Checks `|y(a) - y(b)| <= |a - b|` (per logit in multi mode) on input pairs
/// given with the per-sample shape.
pub fn model_lipschitz_audit(model: &Model, pairs: &[(Tensor, Tensor)]) -> Result<LipschitzReport, CertifyError> {
    let mode = model.cert_mode();
    let frozen = model.frozen();
    let mut report = LipschitzReport {
        mode,
        pairs: pairs.len(),
        max_ratio: 0.0,
        violations: Vec::new(),
    };
    for (p, (a, b)) in pairs.iter().enumerate() {
        let batch = stack(&[a, b])?;
        let y = frozen.logits(&batch)?;
        let (ya, yb) = (y.row(0), y.row(1));
        let din = l2_distance(a.data(), b.data());
        let mut bad: Vec<(Option<usize>, f64)> = Vec::new();
        match mode {
            CertMode::Single => {
                let dout = l2_distance(ya, yb);
                report.max_ratio = report.max_ratio.max(ratio(dout, din));
                if dout > din + LIPSCHITZ_TOL {
                    bad.push((None, dout));
                }
            }
            CertMode::Multi => {
                for (k, (u, v)) in ya.iter().zip(yb).enumerate() {
                    let dout = (u - v).abs();
                    report.max_ratio = report.max_ratio.max(ratio(dout, din));
                    if dout > din + LIPSCHITZ_TOL {
                        bad.push((Some(k), dout));
                    }
                }
            }
        }
        if bad.is_empty() {
            continue;
        }
        let trace = layer_trace(&frozen, &batch)?;
        for (logit, dout) in bad {
            report.violations.push(Violation {
                pair: p,
                logit,
                input_distance: din,
                output_distance: dout,
                trace: trace.clone(),
            });
        }
    }
    Ok(report)
}

fn ratio(dout: f64, din: f64) -> f64 {
    if din > 0.0 {
        dout / din
    } else if dout > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

fn stack(rows: &[&Tensor]) -> Result<Tensor, TensorError> {
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(rows[0].shape());
    let data = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

fn layer_trace(model: &Model, batch: &Tensor) -> Result<Vec<LayerStep>, TensorError> {
    let acts = model.trace(batch)?;
    let dist = |t: &Tensor| l2_distance(t.row(0), t.row(1));
    Ok(model
        .spec()
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerStep {
            layer: format!("{i}:{l}"),
            input_distance: dist(&acts[i]),
            output_distance: dist(&acts[i + 1]),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::WeightMode;
    use crate::model::{ModelSpec, Param};
    use proptest::prelude::*;

    #[test]
    fn gap_examples() {
        assert_eq!(confidence_gap(&[3.0, 1.0, 0.0]).unwrap(), 2.0);
        assert_eq!(confidence_gap(&[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(confidence_gap(&[-1.0, -4.0]).unwrap(), 3.0);
        assert_eq!(confidence_gap(&[1.0]), Err(CertifyError::TooFewClasses(1)));
    }

    #[test]
    fn radius_examples() {
        assert!((certified_radius(2.8, CertMode::Multi).unwrap() - 1.4).abs() < 1e-15);
        assert_eq!(certified_radius(0.0, CertMode::Single).unwrap(), 0.0);
        assert!((certified_radius(2.0, CertMode::Single).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(certified_radius(-0.1, CertMode::Multi).is_err());
    }

    #[test]
    fn gap_bound_equality_case() {
        let a = Certificate::from_logits(0, vec![1.0, 0.0], CertMode::Single).unwrap();
        let b = Certificate::from_logits(1, vec![0.0, 1.0], CertMode::Single).unwrap();
        assert!(logit_gap_bound_check(&a, &b).unwrap());
        assert!(pairwise_gap_bound_check(&a, &b, 2f64.sqrt()).unwrap());
        assert!(!pairwise_gap_bound_check(&a, &b, 1.0).unwrap());
        let c = Certificate::from_logits(2, vec![2.0, 0.0], CertMode::Single).unwrap();
        assert_eq!(logit_gap_bound_check(&a, &c), Err(CertifyError::SameLabel(0)));
    }

    proptest! {
        #[test]
        fn logit_gap_bound_always_holds(u in prop::collection::vec(-5.0f64..5.0, 4), v in prop::collection::vec(-5.0f64..5.0, 4)) {
            let a = Certificate::from_logits(0, u, CertMode::Single).unwrap();
            let b = Certificate::from_logits(1, v, CertMode::Single).unwrap();
            prop_assume!(a.predicted != b.predicted);
            prop_assert!(logit_gap_bound_check(&a, &b).unwrap());
        }
    }

    fn linear_model(w: Vec<f64>, rows: usize, cols: usize, mode: WeightMode) -> Model {
        let spec: ModelSpec = format!("input({cols}) linear({rows})").parse().unwrap();
        let params = vec![
            Param {
                name: "0.w".into(),
                value: Tensor::matrix(rows, cols, w).unwrap(),
            },
            Param {
                name: "0.b".into(),
                value: Tensor::zeros(&[rows]),
            },
        ];
        Model::from_params(spec, mode, params).unwrap()
    }

    /// Largest singular value by dense Jacobi eigenvalues of `W^T W`.
    fn sigma_max(w: &Tensor) -> f64 {
        let mut a = w.transpose().matmul(w).unwrap();
        let n = a.rows();
        for _ in 0..100 {
            for p in 0..n {
                for q in p + 1..n {
                    let d = a.data().to_vec();
                    let apq = d[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (d[q * n + q] - d[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    let m = a.data_mut();
                    for k in 0..n {
                        let (akp, akq) = (d[k * n + p], d[k * n + q]);
                        m[k * n + p] = c * akp - s * akq;
                        m[k * n + q] = s * akp + c * akq;
                    }
                    let d2 = m.to_vec();
                    for k in 0..n {
                        let (apk, aqk) = (d2[p * n + k], d2[q * n + k]);
                        m[p * n + k] = c * apk - s * aqk;
                        m[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a.data()[i * n + i]).fold(0.0, f64::max).sqrt()
    }

    #[test]
    fn jacobian_of_rescaled_linear_is_sigma_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..4 * 6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = linear_model(w, 4, 6, WeightMode::Rescale);
        let eff = m.frozen().param("0.w").unwrap().clone();
        let x = Tensor::vector(vec![0.3; 6]);
        let j = jacobian_l2_norm(&m, &x, 0).unwrap();
        assert!((j.value - sigma_max(&eff)).abs() < 1e-6, "{} vs {}", j.value, sigma_max(&eff));
        assert!(j.value <= 1.0 + 1e-9);
    }

    #[test]
    fn jacobian_of_identity_is_one() {
        let m = linear_model(Tensor::identity(3).into_data(), 3, 3, WeightMode::Free);
        let j = jacobian_l2_norm(&m, &Tensor::vector(vec![0.1, 0.2, 0.3]), 1).unwrap();
        assert!((j.value - 1.0).abs() < 1e-9);
        assert!((j.max_row_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multi_model_rows_are_unit_bounded() {
        let spec: ModelSpec = "input(6) linear(8) tsrelu heads(4)".parse().unwrap();
        let m = Model::new(spec, WeightMode::Rescale, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = Tensor::vector((0..6).map(|_| StandardNormal.sample(&mut rng)).collect());
            let j = jacobian_l2_norm(&m, &x, 2).unwrap();
            assert!(j.max_row_norm <= 1.0 + 1e-9);
            assert!(j.value <= 2.0 + 1e-9, "at most sqrt(K)");
        }
    }

    #[test]
    fn audit_identity_and_counterexample() {
        let id = linear_model(Tensor::identity(3).into_data(), 3, 3, WeightMode::Free);
        let a = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let b = Tensor::vector(vec![1.0, 2.0, 2.0]);
        let r = model_lipschitz_audit(&id, &[(a.clone(), b.clone())]).unwrap();
        assert!((r.max_ratio - 1.0).abs() < 1e-15);
        assert!(r.violations.is_empty());

        let mut w = Tensor::identity(3);
        w.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let twice = linear_model(w.into_data(), 3, 3, WeightMode::Free);
        let r = model_lipschitz_audit(&twice, &[(a, b)]).unwrap();
        assert_eq!(r.violations.len(), 1);
        assert!((r.max_ratio - 2.0).abs() < 1e-12);
        let v = &r.violations[0];
        assert_eq!(v.trace.len(), 1);
        assert!((v.trace[0].output_distance - 6.0).abs() < 1e-12);
    }

    #[test]
    fn audit_rescaled_model_has_no_violations() {
        let spec: ModelSpec = "input(1x6x6) conv(3,3x3,1x1,same) tsrelu normpool(2x2,1x1) flatten linear(5) tsrelu heads(3)"
            .parse()
            .unwrap();
        let m = Model::new(spec, WeightMode::Rescale, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sample = || Tensor::new(vec![1, 6, 6], (0..36).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
        let pairs: Vec<_> = (0..200).map(|_| (sample(), sample())).collect();
        let r = model_lipschitz_audit(&m, &pairs).unwrap();
        assert!(r.violations.is_empty(), "{:?}", r.violations.first());
        assert!(r.max_ratio <= 1.0);
    }

    proptest! {
        #[test]
        fn gap_is_nonnegative_and_radius_consistent(v in prop::collection::vec(-10.0f64..10.0, 2..12)) {
            let c = Certificate::from_logits(0, v, CertMode::Multi).unwrap();
            prop_assert!(c.gap >= 0.0);
            prop_assert_eq!(c.radius, c.gap / 2.0);
        }
    }
}
