//! Three-term training loss: scaled cross-entropy `L_a`, label-preserving
//! cross-entropy `L_b`, and the soft confidence-gap term `L_c`.

use rand_chacha::ChaCha8Rng;

use crate::attack::{pgd_l2_batch, AttackConfig, AttackError};
use crate::model::{ForwardPass, Model};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError, TensorResult};

/// PGD settings used to distort the inputs of `L_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialConfig {
    pub epsilon: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub omega: f64,
    pub z: f64,
    /// Per-class logit multipliers of `L_a` (trainable).
    pub u: Vec<f64>,
    /// Common logit multiplier of `L_b`.
    pub v: f64,
    pub train_v: bool,
    /// Weight of the summed weight penalties (penalty mode only).
    pub penalty_weight: f64,
    pub adversarial: Option<AdversarialConfig>,
}

impl LossConfig {
    pub const DEFAULT_V: f64 = 8.0;
    pub const DEFAULT_Z: f64 = 4.0;

    /// Defaults for `classes` outputs: `u = 1`, `v = 8` (trainable), `z = 4`.
    pub fn new(classes: usize) -> Self {
        Self {
            gamma: 0.5,
            omega: 0.5,
            z: Self::DEFAULT_Z,
            u: vec![1.0; classes],
            v: Self::DEFAULT_V,
            train_v: true,
            penalty_weight: 1.0,
            adversarial: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.z > 0.0) {
            return Err(format!("z must be positive, got {}", self.z));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("omega", self.omega),
            ("penalty_weight", self.penalty_weight),
        ] {
            if !(v >= 0.0) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.u.len() < 2 {
            return Err("u needs one entry per class (at least 2)".into());
        }
        if let Some(a) = &self.adversarial {
            if !(a.epsilon > 0.0) || a.steps == 0 {
                return Err("adversarial epsilon and steps must be positive".into());
            }
        }
        Ok(())
    }
}

/// Cross-entropy of `u * logits` (per class).
pub fn loss_a(tape: &mut Tape, logits: Var, labels: &[usize], u: Var) -> TensorResult<Var> {
    let scaled = tape.mul_channel(logits, u)?;
    tape.softmax_ce(scaled, labels)
}

/// Cross-entropy of `v * logits`.
pub fn loss_b(tape: &mut Tape, logits: Var, labels: &[usize], v: Var) -> TensorResult<Var> {
    let scaled = tape.mul_scalar(logits, v)?;
    tape.softmax_ce(scaled, labels)
}

/// Batch mean of `log(1 - softmax(z * logits)_label) / z`.
pub fn loss_c(tape: &mut Tape, logits: Var, labels: &[usize], z: f64) -> TensorResult<Var> {
    if !(z > 0.0) {
        return Err(TensorError::Invalid {
            op: "loss_c",
            msg: format!("z must be positive, got {z}"),
        });
    }
    let scaled = tape.scale(logits, z);
    let l = tape.log_one_minus_softmax(scaled, labels)?;
    Ok(tape.scale(l, 1.0 / z))
}

fn eval(logits: &Tensor, f: impl FnOnce(&mut Tape, Var) -> TensorResult<Var>) -> TensorResult<f64> {
    let mut tape = Tape::without_grad();
    let l = tape.leaf(logits.clone());
    let out = f(&mut tape, l)?;
    Ok(tape.value(out).item())
}

/// `L_a` on a `[N, K]` logit batch.
pub fn loss_a_value(logits: &Tensor, labels: &[usize], u: &[f64]) -> TensorResult<f64> {
    eval(logits, |t, l| {
        let u = t.leaf(Tensor::vector(u.to_vec()));
        loss_a(t, l, labels, u)
    })
}

pub fn loss_b_value(logits: &Tensor, labels: &[usize], v: f64) -> TensorResult<f64> {
    eval(logits, |t, l| {
        let v = t.leaf(Tensor::scalar(v));
        loss_b(t, l, labels, v)
    })
}

pub fn loss_c_value(logits: &Tensor, labels: &[usize], z: f64) -> TensorResult<f64> {
    eval(logits, |t, l| loss_c(t, l, labels, z))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// Tape handles and scalar values of one loss evaluation.
pub struct LossTerms {
    pub total: Var,
    /// Forward pass on the clean inputs.
    pub pass: ForwardPass,
    pub u: Var,
    pub v: Var,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub penalty: f64,
}

/// `L_a + gamma L_b + omega L_c` (+ `penalty_weight * sum L_W` in penalty mode).
///
/// With `cfg.adversarial` set, `L_a` is evaluated on PGD-distorted inputs
/// (attacking the current model) while `L_b` and `L_c` use the originals.
/// `rng` seeds the attack's random starts.
pub fn total_loss(
    tape: &mut Tape,
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms, LossError> {
    cfg.validate().map_err(LossError::Config)?;
    if cfg.u.len() != model.num_classes() {
        return Err(LossError::Config(format!(
            "u has {} entries for {} classes",
            cfg.u.len(),
            model.num_classes()
        )));
    }
    let xv = tape.leaf(x.clone());
    let pass = model.forward(tape, xv)?;
    let u = tape.leaf(Tensor::vector(cfg.u.clone()));
    let v = tape.leaf(Tensor::scalar(cfg.v));

    let a_logits = match &cfg.adversarial {
        None => pass.logits,
        Some(adv) => {
            use rand::Rng;
            let attack = AttackConfig::new(adv.epsilon, adv.steps)?.with_restarts(1).with_seed(rng.random());
            let frozen = model.frozen();
            let eps = vec![adv.epsilon; x.rows()];
            let res = pgd_l2_batch(&frozen, x, labels, &eps, &attack)?;
            // Failed attacks fall back to the clean input.
            let mut data = Vec::with_capacity(x.len());
            for r in &res {
                data.extend_from_slice(r.adversarial.data());
            }
            let xa = tape.leaf(Tensor::new(x.shape().to_vec(), data)?);
            model.forward_shared(tape, xa, pass.params.clone(), None)?.logits
        }
    };

    let la = loss_a(tape, a_logits, labels, u)?;
    let lb = loss_b(tape, pass.logits, labels, v)?;
    let lc = loss_c(tape, pass.logits, labels, cfg.z)?;
    let gb = tape.scale(lb, cfg.gamma);
    let oc = tape.scale(lc, cfg.omega);
    let ab = tape.add(la, gb)?;
    let mut total = tape.add(ab, oc)?;
    let mut penalty = 0.0;
    if let Some(p) = pass.penalty {
        penalty = tape.value(p).item();
        let wp = tape.scale(p, cfg.penalty_weight);
        total = tape.add(total, wp)?;
    }
    Ok(LossTerms {
        total,
        a: tape.value(la).item(),
        b: tape.value(lb).item(),
        c: tape.value(lc).item(),
        penalty,
        pass,
        u,
        v,
    })
}
