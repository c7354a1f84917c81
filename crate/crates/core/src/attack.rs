//! White-box L2-bounded untargeted attacks.
//!
//! All attacks run on a batch with one budget per sample. Every sample draws
//! its random starts from its own ChaCha8 stream (seeded by the config seed,
//! stream = position in the batch), so results do not depend on how other
//! samples behave.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::model::{argmax, Classifier};
use crate::tensor::{l2_norm, Tensor, TensorResult};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttackError {
    #[error("attack config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// L2 budget (the upper end of the search for [`min_distortion_search`]).
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    /// Valid per-coordinate input range.
    pub bounds: (f64, f64),
    pub seed: u64,
}

impl AttackConfig {
    /// Step size `2 eps / sqrt(steps)`, 3 restarts, inputs in `[0, 1]`.
    pub fn new(epsilon: f64, steps: usize) -> Result<Self, AttackError> {
        let cfg = Self {
            epsilon,
            steps,
            step_size: if steps > 0 { 2.0 * epsilon / (steps as f64).sqrt() } else { 0.0 },
            restarts: 3,
            bounds: (0.0, 1.0),
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::Config(m.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive and finite");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if !(self.bounds.0 < self.bounds.1) {
            return bad("bounds must be an increasing pair");
        }
        Ok(())
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = (lo, hi);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    /// Perturbed input (per-sample shape).
    pub adversarial: Tensor,
    /// `|adversarial - x|_2`.
    pub distortion: f64,
    /// The predicted label differs from the attacked label.
    pub success: bool,
    /// Gradient steps taken before success (`steps` on failure).
    pub iterations: usize,
}

/// First success of one random start.
#[derive(Clone, Debug)]
struct Hit {
    iteration: usize,
    distortion: f64,
    adversarial: Vec<f64>,
}

struct Engine<'a, C: Classifier + ?Sized> {
    model: &'a C,
    x: &'a Tensor,
    labels: &'a [usize],
    eps: &'a [f64],
    steps: usize,
    /// Per-sample step length.
    step: Vec<f64>,
    bounds: (f64, f64),
}

fn margin_seed(labels: &[usize]) -> impl Fn(&Tensor) -> Tensor + '_ {
    move |logits: &Tensor| {
        let k = logits.row_len();
        let mut seed = Tensor::zeros(logits.shape());
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let runner = (0..k)
                .filter(|&j| j != y)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if row[b] >= row[j] => Some(b),
                    _ => Some(j),
                })
                .expect("at least two classes");
            seed.data_mut()[i * k + runner] = 1.0;
            seed.data_mut()[i * k + y] = -1.0;
        }
        seed
    }
}

fn clip_and_project(x: &[f64], delta: &mut [f64], eps: f64, bounds: (f64, f64)) {
    for (d, &xi) in delta.iter_mut().zip(x) {
        *d = (xi + *d).clamp(bounds.0, bounds.1) - xi;
    }
    let n = l2_norm(delta);
    if n > eps {
        let k = eps / n;
        delta.iter_mut().for_each(|d| *d *= k);
        // Guard against the rescaled norm rounding just above eps.
        while l2_norm(delta) > eps {
            delta.iter_mut().for_each(|d| *d *= 1.0 - 1e-12);
        }
    }
}

impl<C: Classifier + ?Sized> Engine<'_, C> {
    /// One random start for every sample; returns each sample's first success.
    fn run(&self, rngs: &mut [ChaCha8Rng], skip: &[bool]) -> TensorResult<Vec<Option<Hit>>> {
        let n = self.x.rows();
        let d = self.x.row_len();
        let mut delta = vec![0.0; n * d];
        for i in 0..n {
            if skip[i] || self.eps[i] <= 0.0 {
                continue;
            }
            let rng = &mut rngs[i];
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = l2_norm(&dir);
            let u: f64 = Uniform::new(0.0, 1.0).expect("unit interval").sample(rng);
            let r = self.eps[i] * u.powf(1.0 / d as f64) / norm.max(f64::MIN_POSITIVE);
            let di = &mut delta[i * d..(i + 1) * d];
            for (a, b) in di.iter_mut().zip(&dir) {
                *a = r * b;
            }
            clip_and_project(self.x.row(i), di, self.eps[i], self.bounds);
        }
        let mut hits: Vec<Option<Hit>> = vec![None; n];
        let mut active: Vec<usize> = (0..n).filter(|&i| !skip[i]).collect();
        for it in 0..=self.steps {
            if active.is_empty() {
                break;
            }
            let mut adv = self.x.select_rows(&active);
            for (r, &i) in active.iter().enumerate() {
                for (a, dd) in adv.data_mut()[r * d..(r + 1) * d].iter_mut().zip(&delta[i * d..(i + 1) * d]) {
                    *a += dd;
                }
            }
            let labels: Vec<usize> = active.iter().map(|&i| self.labels[i]).collect();
            let last = it == self.steps;
            let (logits, grad) = if last {
                let l = self.model.logits(&adv)?;
                let z = Tensor::zeros(adv.shape());
                (l, z)
            } else {
                self.model.logits_and_input_grad(&adv, &margin_seed(&labels))?
            };
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                if argmax(logits.row(r)) != self.labels[i] {
                    let di = &delta[i * d..(i + 1) * d];
                    hits[i] = Some(Hit {
                        iteration: it,
                        distortion: l2_norm(di),
                        adversarial: adv.row(r).to_vec(),
                    });
                    continue;
                }
                if last {
                    continue;
                }
                still.push(i);
                let g = grad.row(r);
                let gn = l2_norm(g);
                if gn > 0.0 {
                    let k = self.step[i] / gn;
                    let di = &mut delta[i * d..(i + 1) * d];
                    for (a, b) in di.iter_mut().zip(g) {
                        *a += k * b;
                    }
                    clip_and_project(self.x.row(i), di, self.eps[i], self.bounds);
                }
            }
            active = still;
        }
        Ok(hits)
    }

    fn rngs(&self, seed: u64) -> Vec<ChaCha8Rng> {
        (0..self.x.rows())
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64);
                r
            })
            .collect()
    }
}

fn check_batch(x: &Tensor, labels: &[usize], eps: &[f64]) -> Result<(), AttackError> {
    if x.shape().len() < 2 || labels.len() != x.rows() || eps.len() != x.rows() {
        return Err(AttackError::Config(format!(
            "batch of {} inputs with {} labels and {} budgets",
            x.shape().first().copied().unwrap_or(0),
            labels.len(),
            eps.len()
        )));
    }
    Ok(())
}

/// Margin PGD on a batch with per-sample budgets `eps`. `cfg.epsilon` is
/// ignored; the step length is `cfg.step_size * eps_i / cfg.epsilon`.
pub fn pgd_l2_batch<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[usize],
    eps: &[f64],
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>, AttackError> {
    cfg.validate()?;
    check_batch(x, labels, eps)?;
    let engine = Engine {
        model,
        x,
        labels,
        eps,
        steps: cfg.steps,
        step: eps.iter().map(|e| cfg.step_size * e / cfg.epsilon).collect(),
        bounds: cfg.bounds,
    };
    let n = x.rows();
    let mut rngs = engine.rngs(cfg.seed);
    let mut best: Vec<Option<Hit>> = vec![None; n];
    let none = vec![false; n];
    for _ in 0..cfg.restarts {
        for (i, h) in engine.run(&mut rngs, &none)?.into_iter().enumerate() {
            if let Some(h) = h {
                if best[i].as_ref().is_none_or(|b| h.distortion < b.distortion) {
                    best[i] = Some(h);
                }
            }
        }
    }
    let shape = x.shape()[1..].to_vec();
    Ok(best
        .into_iter()
        .enumerate()
        .map(|(i, h)| match h {
            Some(h) => AttackResult {
                adversarial: Tensor::new(shape.clone(), h.adversarial).expect("row shape"),
                distortion: h.distortion,
                success: true,
                iterations: h.iteration,
            },
            None => AttackResult {
                adversarial: Tensor::new(shape.clone(), x.row(i).to_vec()).expect("row shape"),
                distortion: 0.0,
                success: false,
                iterations: cfg.steps,
            },
        })
        .collect())
}

/// Single-input margin PGD. On failure the returned input is `x` itself.
pub fn pgd_l2<C: Classifier + ?Sized>(model: &C, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<AttackResult, AttackError> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = Tensor::new(shape, x.data().to_vec())?;
    Ok(pgd_l2_batch(model, &batch, &[label], &[cfg.epsilon], cfg)?.remove(0))
}

/// Whether any random start succeeds, per sample, stopping at the first one.
fn any_success<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[usize],
    eps: &[f64],
    cfg: &AttackConfig,
) -> Result<Vec<bool>, AttackError> {
    let engine = Engine {
        model,
        x,
        labels,
        eps,
        steps: cfg.steps,
        step: eps.iter().map(|e| cfg.step_size * e / cfg.epsilon).collect(),
        bounds: cfg.bounds,
    };
    let mut rngs = engine.rngs(cfg.seed);
    let mut done = vec![false; x.rows()];
    for _ in 0..cfg.restarts {
        for (i, h) in engine.run(&mut rngs, &done)?.into_iter().enumerate() {
            done[i] |= h.is_some();
        }
    }
    Ok(done)
}

/// Number of bisection steps in [`min_distortion_search`].
pub const SEARCH_HALVINGS: usize = 12;

/// Smallest budget in `(0, cfg.epsilon]` at which PGD flips each input,
/// located by bisection; `f64::INFINITY` if the full budget fails.
pub fn min_distortion_batch<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<f64>, AttackError> {
    cfg.validate()?;
    let n = x.rows();
    check_batch(x, labels, &vec![0.0; n])?;
    let top = any_success(model, x, labels, &vec![cfg.epsilon; n], cfg)?;
    let mut lo = vec![0.0; n];
    let mut hi: Vec<f64> = top.iter().map(|&s| if s { cfg.epsilon } else { f64::INFINITY }).collect();
    let live: Vec<usize> = (0..n).filter(|&i| top[i]).collect();
    if live.is_empty() {
        return Ok(hi);
    }
    let xs = x.select_rows(&live);
    let ls: Vec<usize> = live.iter().map(|&i| labels[i]).collect();
    for _ in 0..SEARCH_HALVINGS {
        let mid: Vec<f64> = live.iter().map(|&i| 0.5 * (lo[i] + hi[i])).collect();
        let ok = any_success(model, &xs, &ls, &mid, cfg)?;
        for (k, &i) in live.iter().enumerate() {
            if ok[k] {
                hi[i] = mid[k];
            } else {
                lo[i] = mid[k];
            }
        }
    }
    Ok(hi)
}

pub fn min_distortion_search<C: Classifier + ?Sized>(model: &C, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<f64, AttackError> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = Tensor::new(shape, x.data().to_vec())?;
    Ok(min_distortion_batch(model, &batch, &[label], cfg)?[0])
}

/// Robust accuracy per iteration budget.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub epsilon: f64,
    /// `(iteration budget, fraction correct and unbroken)`, ascending budgets.
    pub rows: Vec<(usize, f64)>,
}

/// Robust accuracy at each budget of `ladder`. One attack run with
/// `max(ladder)` steps and the fixed `cfg.step_size` serves every rung: a
/// sample counts as broken at budget `m` if some start succeeded within `m`
/// steps, so the attack set only grows along the ladder. Budget 0 is the
/// natural accuracy; a random start that lands on a wrong label counts as one
/// step.
pub fn iteration_sweep<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    ladder: &[usize],
    cfg: &AttackConfig,
) -> Result<SweepTable, AttackError> {
    if ladder.is_empty() || ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AttackError::Config("ladder must be non-empty and strictly ascending".into()));
    }
    let n = x.rows();
    check_batch(x, labels, &vec![0.0; n])?;
    let max = *ladder.last().expect("non-empty");
    // Natural mistakes are broken at every budget; a random start that
    // already flips the label counts from budget 1 on.
    let mut first: Vec<usize> = model
        .predict(x)?
        .into_iter()
        .zip(labels)
        .map(|(p, &y)| if p != y { 0 } else { usize::MAX })
        .collect();
    if eps > 0.0 && max > 0 {
        let cfg = AttackConfig {
            epsilon: eps,
            steps: max,
            ..cfg.clone()
        };
        cfg.validate()?;
        let engine = Engine {
            model,
            x,
            labels,
            eps: &vec![eps; n],
            steps: max,
            step: vec![cfg.step_size; n],
            bounds: cfg.bounds,
        };
        let mut rngs = engine.rngs(cfg.seed);
        let skip = vec![false; n];
        for _ in 0..cfg.restarts {
            for (i, h) in engine.run(&mut rngs, &skip)?.into_iter().enumerate() {
                if let Some(h) = h {
                    first[i] = first[i].min(h.iteration.max(1));
                }
            }
        }
    }
    let rows = ladder
        .iter()
        .map(|&m| {
            let ok = first.iter().filter(|&&f| f > m).count();
            (m, ok as f64 / n as f64)
        })
        .collect();
    Ok(SweepTable { epsilon: eps, rows })
}

/// Fraction of samples classified correctly and not broken by PGD at `cfg.epsilon`.
pub fn robust_accuracy<C: Classifier + ?Sized>(model: &C, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<f64, AttackError> {
    cfg.validate()?;
    let n = x.rows();
    let broken = any_success(model, x, labels, &vec![cfg.epsilon; n], cfg)?;
    Ok(broken.iter().filter(|&&b| !b).count() as f64 / n as f64)
}

/// Basic sign-gradient PGD under an L-infinity budget `cfg.epsilon` (step
/// `cfg.step_size`, one random start per restart). `distortion` in the result
/// is the L-infinity norm of the perturbation.
pub fn pgd_linf<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>, AttackError> {
    cfg.validate()?;
    let n = x.rows();
    check_batch(x, labels, &vec![0.0; n])?;
    let d = x.row_len();
    let shape = x.shape()[1..].to_vec();
    let mut out: Vec<Option<AttackResult>> = vec![None; n];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.bounds;
    let e = cfg.epsilon;
    for _ in 0..cfg.restarts {
        let todo: Vec<usize> = (0..n).filter(|&i| out[i].is_none()).collect();
        if todo.is_empty() {
            break;
        }
        let x0 = x.select_rows(&todo);
        let labels: Vec<usize> = todo.iter().map(|&i| labels[i]).collect();
        let unif = Uniform::new_inclusive(-e, e).expect("range");
        let mut adv = x0.map(|v| v);
        for (a, o) in adv.data_mut().iter_mut().zip(x0.data()) {
            *a = (o + unif.sample(&mut rng)).clamp(lo, hi);
        }
        for it in 0..=cfg.steps {
            let (logits, grad) = adv_grad(model, &adv, &labels, it == cfg.steps)?;
            for (r, &i) in todo.iter().enumerate() {
                if out[i].is_none() && argmax(logits.row(r)) != labels[r] {
                    let dist = adv.row(r).iter().zip(x0.row(r)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    out[i] = Some(AttackResult {
                        adversarial: Tensor::new(shape.clone(), adv.row(r).to_vec())?,
                        distortion: dist,
                        success: true,
                        iterations: it,
                    });
                }
            }
            if it == cfg.steps {
                break;
            }
            let ad = adv.data_mut();
            for r in 0..todo.len() {
                for j in r * d..(r + 1) * d {
                    let step = cfg.step_size * grad.data()[j].signum() * (grad.data()[j] != 0.0) as u8 as f64;
                    let o = x0.data()[j];
                    ad[j] = (ad[j] + step).clamp(o - e, o + e).clamp(lo, hi);
                }
            }
        }
    }
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.unwrap_or_else(|| AttackResult {
                adversarial: Tensor::new(shape.clone(), x.row(i).to_vec()).expect("row shape"),
                distortion: 0.0,
                success: false,
                iterations: cfg.steps,
            })
        })
        .collect())
}

fn adv_grad<C: Classifier + ?Sized>(model: &C, x: &Tensor, labels: &[usize], value_only: bool) -> TensorResult<(Tensor, Tensor)> {
    if value_only {
        Ok((model.logits(x)?, Tensor::zeros(x.shape())))
    } else {
        model.logits_and_input_grad(x, &margin_seed(labels))
    }
}
