//! Minibatch SGD with momentum for constrained and unconstrained models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::certify::confidence_gap;
use crate::datasets::Dataset;
use crate::layers::WeightMode;
use crate::losses::{total_loss, LossConfig, LossError};
use crate::model::{argmax, Classifier, Dropout, Model};
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

/// Training objective.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// Three-term loss with trainable `u` (and optionally `v`).
    L2nnn(LossConfig),
    /// Plain softmax cross-entropy.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Epoch at which penalty mode hands over to rescale mode. Only used when
    /// the model starts in penalty mode.
    pub switch_epoch: usize,
    /// L2 coefficient on weight matrices (not biases).
    pub weight_decay: f64,
    /// Inverted dropout on the input of the final layer.
    pub dropout: f64,
    /// Rescales the joint gradient (parameters, `u`, `v`) to this L2 norm
    /// when it is larger; `0` disables clipping.
    pub grad_clip: f64,
    /// Evaluate at most this many samples per split for epoch metrics.
    pub eval_limit: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_decay: 1.0,
            switch_epoch: 0,
            weight_decay: 0.0,
            dropout: 0.0,
            grad_clip: 0.0,
            eval_limit: usize::MAX,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_decay > 0.0) {
            return Err("weight_decay must be >= 0 and lr_decay > 0".into());
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(format!("grad_clip must be finite and >= 0, got {}", self.grad_clip));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: WeightMode,
    pub learning_rate: f64,
    pub loss: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub loss_c: f64,
    pub penalty: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Average confidence gap on the training set.
    pub train_gap: f64,
    pub test_gap: f64,
}

impl EpochMetrics {
    pub const HEADER: [&'static str; 12] = [
        "epoch",
        "mode",
        "lr",
        "loss",
        "loss_a",
        "loss_b",
        "loss_c",
        "penalty",
        "train_acc",
        "test_acc",
        "train_gap",
        "test_gap",
    ];

    pub fn fields(&self) -> Vec<String> {
        let mode = match self.mode {
            WeightMode::Rescale => "rescale",
            WeightMode::Penalty => "penalty",
            WeightMode::Free => "free",
        };
        let mut out = vec![self.epoch.to_string(), mode.to_string()];
        for v in [
            self.learning_rate,
            self.loss,
            self.loss_a,
            self.loss_b,
            self.loss_c,
            self.penalty,
            self.train_accuracy,
            self.test_accuracy,
            self.train_gap,
            self.test_gap,
        ] {
            out.push(format!("{v:.6}"));
        }
        out
    }
}

/// Accuracy and mean confidence gap of a model on a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_gap: f64,
    /// Mean softmax cross-entropy of the raw logits.
    pub loss: f64,
}

pub fn evaluate<C: Classifier + ?Sized>(model: &C, ds: &Dataset, limit: usize) -> Result<Evaluation, TensorError> {
    let n = ds.len().min(limit);
    let mut correct = 0usize;
    let mut gap = 0.0;
    let mut loss = 0.0;
    for start in (0..n).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
        let logits = model.logits(&ds.images.select_rows(&idx))?;
        for (r, &i) in idx.iter().enumerate() {
            let row = logits.row(r);
            correct += usize::from(argmax(row) == ds.labels[i]);
            gap += confidence_gap(row).unwrap_or(0.0);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[ds.labels[i]];
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        mean_gap: gap / n as f64,
        loss: loss / n as f64,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
}

/// Momentum buffers, aligned with the model parameters followed by `u` and `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Momentum {
    pub velocity: Vec<Tensor>,
}

/// Model, objective and optimizer state for resumable training.
pub struct Trainer {
    pub model: Model,
    pub objective: Objective,
    pub config: TrainConfig,
    pub momentum: Momentum,
    /// Completed epochs.
    pub epoch: usize,
    /// Mode the model is switched to at `switch_epoch`.
    final_mode: WeightMode,
}

impl Trainer {
    pub fn new(model: Model, objective: Objective, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        if let Objective::L2nnn(cfg) = &objective {
            cfg.validate().map_err(TrainError::Config)?;
        }
        let mut velocity: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        if let Objective::L2nnn(cfg) = &objective {
            velocity.push(Tensor::zeros(&[cfg.u.len()]));
            velocity.push(Tensor::scalar(0.0));
        }
        let final_mode = match model.mode {
            WeightMode::Penalty => WeightMode::Rescale,
            m => m,
        };
        let mut model = model;
        if config.switch_epoch == 0 {
            model.mode = final_mode;
        }
        Ok(Self {
            model,
            objective,
            config,
            momentum: Momentum { velocity },
            epoch: 0,
            final_mode,
        })
    }

    /// Restores optimizer state saved from an earlier run.
    pub fn resume(&mut self, epoch: usize, momentum: Momentum) -> Result<(), TrainError> {
        if momentum.velocity.len() != self.momentum.velocity.len()
            || momentum
                .velocity
                .iter()
                .zip(&self.momentum.velocity)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(TrainError::Config("optimizer state does not match the model".into()));
        }
        self.momentum = momentum;
        self.epoch = epoch;
        if epoch >= self.config.switch_epoch {
            self.model.mode = self.final_mode;
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.config.learning_rate * self.config.lr_decay.powi(self.epoch as i32)
    }

    /// Runs one epoch over `train` and evaluates on `train` and `test`.
    pub fn epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochMetrics, TrainError> {
        if self.epoch >= self.config.switch_epoch {
            self.model.mode = self.final_mode;
        }
        let lr = self.learning_rate();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64);
        let batches = train.batches(self.config.batch_size, &mut rng);
        let mut sums = [0.0; 5];
        for idx in &batches {
            let x = train.images.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let parts = self.step(&x, &labels, lr, &mut rng)?;
            if !parts[0].is_finite() {
                return Err(TrainError::Diverged { epoch: self.epoch });
            }
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p * idx.len() as f64;
            }
        }
        self.epoch += 1;
        let n = train.len() as f64;
        let frozen = self.model.frozen();
        let tr = evaluate(&frozen, train, self.config.eval_limit)?;
        let te = evaluate(&frozen, test, self.config.eval_limit)?;
        Ok(EpochMetrics {
            epoch: self.epoch,
            mode: self.model.mode,
            learning_rate: lr,
            loss: sums[0] / n,
            loss_a: sums[1] / n,
            loss_b: sums[2] / n,
            loss_c: sums[3] / n,
            penalty: sums[4] / n,
            train_accuracy: tr.accuracy,
            test_accuracy: te.accuracy,
            train_gap: tr.mean_gap,
            test_gap: te.mean_gap,
        })
    }

    /// Trains for the configured number of epochs; `log` sees every epoch.
    pub fn fit(&mut self, train: &Dataset, test: &Dataset, mut log: impl FnMut(&EpochMetrics)) -> Result<Vec<EpochMetrics>, TrainError> {
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            let m = self.epoch(train, test)?;
            log(&m);
            out.push(m);
        }
        Ok(out)
    }

    /// One SGD step; returns `[total, a, b, c, penalty]`.
    fn step(&mut self, x: &Tensor, labels: &[usize], lr: f64, rng: &mut ChaCha8Rng) -> Result<[f64; 5], TrainError> {
        let mut tape = Tape::new();
        let (total, params, uv, parts) = match &self.objective {
            Objective::L2nnn(cfg) => {
                let t = total_loss(&mut tape, &self.model, x, labels, cfg, rng)?;
                let total = tape.value(t.total).item();
                (t.total, t.pass.params, Some((t.u, t.v)), [total, t.a, t.b, t.c, t.penalty])
            }
            Objective::CrossEntropy => {
                let xv = tape.leaf(x.clone());
                let dropout = (self.config.dropout > 0.0).then_some(Dropout {
                    rate: self.config.dropout,
                    rng: &mut *rng,
                });
                let pass = self.model.forward_with(&mut tape, xv, dropout)?;
                let ce = tape.softmax_ce(pass.logits, labels)?;
                let v = tape.value(ce).item();
                (ce, pass.params, None, [v, v, 0.0, 0.0, 0.0])
            }
        };
        tape.backward(total)?;

        let mut grads: Vec<Tensor> = params.iter().map(|&h| tape.grad(h)).collect();
        if let Some((u, v)) = uv {
            grads.push(tape.grad(u));
            grads.push(tape.grad(v));
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            let k = self.config.grad_clip / norm;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= k));
        }

        let mu = self.config.momentum;
        let wd = self.config.weight_decay;
        let update = |p: &mut Tensor, vel: &mut Tensor, g: &Tensor, decay: f64| {
            for ((w, v), g) in p.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
                *v = mu * *v + g + decay * *w;
                *w -= lr * *v;
            }
        };
        let n = self.model.params().len();
        for (i, p) in self.model.params_mut().iter_mut().enumerate() {
            let decay = if p.name.ends_with(".w") { wd } else { 0.0 };
            update(&mut p.value, &mut self.momentum.velocity[i], &grads[i], decay);
        }
        if let Objective::L2nnn(cfg) = &mut self.objective {
            let mut ut = Tensor::vector(cfg.u.clone());
            update(&mut ut, &mut self.momentum.velocity[n], &grads[n], 0.0);
            cfg.u = ut.into_data();
            if cfg.train_v {
                let mut vt = Tensor::scalar(cfg.v);
                update(&mut vt, &mut self.momentum.velocity[n + 1], &grads[n + 1], 0.0);
                cfg.v = vt.item();
            }
        }
        Ok(parts)
    }
}
