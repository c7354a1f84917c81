//! Unconstrained counterparts, regularized baselines and single-technique
//! ablations.

use std::fmt;
use std::str::FromStr;

use crate::datasets::{Dataset, DatasetError};
use crate::layers::WeightMode;
use crate::losses::LossConfig;
use crate::model::{LayerSpec, Model, ModelSpec};
use crate::tape::LiftFn;
use crate::train::{evaluate, EpochMetrics, Objective, TrainConfig, TrainError, Trainer};

/// One technique removed from the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Train without any weight constraint.
    WeightReg,
    /// Drop the confidence-gap loss term (`omega = 0`).
    LossC,
    /// Max-pooling instead of norm-pooling, window for window.
    NormPooling,
    /// One-sided ReLU instead of the two-sided ReLU.
    TwoSidedRelu,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::WeightReg, Ablation::LossC, Ablation::NormPooling, Ablation::TwoSidedRelu];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::WeightReg => "weight_reg",
            Ablation::LossC => "loss_c",
            Ablation::NormPooling => "norm_pooling",
            Ablation::TwoSidedRelu => "two_sided_relu",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown ablation `{0}` (expected weight_reg, loss_c, norm_pooling or two_sided_relu)")]
pub struct UnknownAblation(pub String);

impl FromStr for Ablation {
    type Err = UnknownAblation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| UnknownAblation(s.to_string()))
    }
}

/// Everything that defines one trainable variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSpec {
    pub model: ModelSpec,
    pub mode: WeightMode,
    pub loss: LossConfig,
}

impl VariantSpec {
    /// Gaps of an unconstrained model carry no robustness meaning.
    pub fn gap_is_meaningful(&self) -> bool {
        self.mode != WeightMode::Free
    }

    /// Names of the dimensions in which `other` differs from `self`.
    pub fn diff(&self, other: &VariantSpec) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.mode != other.mode {
            out.push("weight_reg");
        }
        if self.loss != other.loss {
            out.push("loss");
        }
        let (mut pool, mut act, mut other_layers) = (false, false, false);
        diff_layers(&self.model.layers, &other.model.layers, &mut pool, &mut act, &mut other_layers);
        if self.model.input != other.model.input {
            other_layers = true;
        }
        if pool {
            out.push("pooling");
        }
        if act {
            out.push("activation");
        }
        if other_layers {
            out.push("architecture");
        }
        out
    }
}

fn diff_layers(a: &[LayerSpec], b: &[LayerSpec], pool: &mut bool, act: &mut bool, other: &mut bool) {
    if a.len() != b.len() {
        *other = true;
        return;
    }
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            _ if x == y => {}
            (LayerSpec::NormPool(p), LayerSpec::MaxPool(q)) | (LayerSpec::MaxPool(p), LayerSpec::NormPool(q)) if p == q => *pool = true,
            (LayerSpec::TwoSidedRelu, LayerSpec::Act(LiftFn::Relu)) | (LayerSpec::Act(LiftFn::Relu), LayerSpec::TwoSidedRelu) => {
                *act = true
            }
            (LayerSpec::Residual(p), LayerSpec::Residual(q)) => diff_layers(p, q, pool, act, other),
            _ => *other = true,
        }
    }
}

fn map_layers(layers: &[LayerSpec], f: &impl Fn(&LayerSpec) -> Option<LayerSpec>) -> Vec<LayerSpec> {
    layers
        .iter()
        .map(|l| match (f(l), l) {
            (Some(r), _) => r,
            (None, LayerSpec::Residual(inner)) => LayerSpec::Residual(map_layers(inner, f)),
            (None, l) => l.clone(),
        })
        .collect()
}

/// The base variant with exactly one technique removed.
pub fn ablation_variant(base: &VariantSpec, disable: Ablation) -> VariantSpec {
    let mut out = base.clone();
    match disable {
        Ablation::WeightReg => out.mode = WeightMode::Free,
        Ablation::LossC => out.loss.omega = 0.0,
        Ablation::NormPooling => {
            out.model.layers = map_layers(&base.model.layers, &|l| match l {
                LayerSpec::NormPool(p) => Some(LayerSpec::MaxPool(*p)),
                _ => None,
            })
        }
        Ablation::TwoSidedRelu => {
            out.model.layers = map_layers(&base.model.layers, &|l| match l {
                LayerSpec::TwoSidedRelu => Some(LayerSpec::Act(LiftFn::Relu)),
                _ => None,
            })
        }
    }
    out
}

/// Ordinary network mirroring an L2NNN architecture: every two-sided ReLU
/// becomes a ReLU with the preceding conv/linear layer twice as wide (so the
/// activation count is unchanged), and the per-class heads become a plain
/// linear output layer.
pub fn baseline_architecture(spec: &ModelSpec) -> ModelSpec {
    ModelSpec {
        input: spec.input.clone(),
        layers: convert(&spec.layers),
    }
}

fn convert(layers: &[LayerSpec]) -> Vec<LayerSpec> {
    let mut out: Vec<LayerSpec> = Vec::with_capacity(layers.len());
    for l in layers {
        match l {
            LayerSpec::TwoSidedRelu => {
                match out.last_mut() {
                    Some(LayerSpec::Conv { filters, .. }) => *filters *= 2,
                    Some(LayerSpec::Linear { units }) => *units *= 2,
                    _ => {}
                }
                out.push(LayerSpec::Act(LiftFn::Relu));
            }
            LayerSpec::Heads { classes } => out.push(LayerSpec::Linear { units: *classes }),
            LayerSpec::Residual(inner) => out.push(LayerSpec::Residual(convert(inner))),
            l => out.push(l.clone()),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub arch: ModelSpec,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    /// Patience in epochs; `None` trains for the full budget.
    pub early_stopping: Option<usize>,
    /// Held-out samples taken from the training set for early stopping.
    pub validation_size: usize,
    pub validation_seed: u64,
    pub train: TrainConfig,
    pub init_seed: u64,
}

impl BaselineConfig {
    /// Plain cross-entropy training with no regularizer.
    pub fn vanilla(arch: ModelSpec, train: TrainConfig) -> Self {
        Self {
            arch,
            weight_decay: 0.0,
            dropout_rate: 0.0,
            early_stopping: None,
            validation_size: 1000,
            validation_seed: 0,
            train,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.early_stopping == Some(0) {
            return Err("early stopping patience must be positive".into());
        }
        Ok(())
    }

    /// Short tag such as `WD=0.0001 DR=0.3 ES=3` for reports.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.weight_decay > 0.0 {
            parts.push(format!("WD={}", self.weight_decay));
        }
        if self.dropout_rate > 0.0 {
            parts.push(format!("DR={}", self.dropout_rate));
        }
        if let Some(p) = self.early_stopping {
            parts.push(format!("ES={p}"));
        }
        if parts.is_empty() {
            "vanilla".into()
        } else {
            parts.join(" ")
        }
    }
}

/// Weight-decay and dropout values tried by [`baseline_grid`].
pub const WEIGHT_DECAY_GRID: [f64; 2] = [1e-4, 1e-3];
pub const DROPOUT_GRID: [f64; 2] = [0.3, 0.5];

/// Regularized variants of `base`: each weight decay, each dropout rate, and
/// early stopping with patience 3.
pub fn baseline_grid(base: &BaselineConfig) -> Vec<BaselineConfig> {
    let mut out = Vec::new();
    for wd in WEIGHT_DECAY_GRID {
        out.push(BaselineConfig {
            weight_decay: wd,
            ..base.clone()
        });
    }
    for dr in DROPOUT_GRID {
        out.push(BaselineConfig {
            dropout_rate: dr,
            ..base.clone()
        });
    }
    out.push(BaselineConfig {
        early_stopping: Some(3),
        ..base.clone()
    });
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum EarlyStopping {
    Disabled,
    /// Every training label is random, so a held-out split cannot signal
    /// overfitting.
    NotApplicable,
    /// Weights restored from `best_epoch` (1-based); training stopped after
    /// `stopped_epoch`.
    Applied {
        best_epoch: usize,
        stopped_epoch: usize,
    },
}

pub struct BaselineOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub early_stopping: EarlyStopping,
    pub test_accuracy: f64,
    pub test_gap: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("baseline config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Cross-entropy training of an unconstrained model with the requested
/// regularizers. Early stopping monitors held-out cross-entropy.
pub fn train_baseline(
    cfg: &BaselineConfig,
    train: &Dataset,
    test: &Dataset,
    mut log: impl FnMut(&EpochMetrics),
) -> Result<BaselineOutcome, BaselineError> {
    cfg.validate().map_err(BaselineError::Config)?;
    let model = Model::new(cfg.arch.clone(), WeightMode::Free, cfg.init_seed);
    let tc = TrainConfig {
        weight_decay: cfg.weight_decay,
        dropout: cfg.dropout_rate,
        ..cfg.train.clone()
    };
    let mut trainer = Trainer::new(model, Objective::CrossEntropy, tc)?;

    let patience = match cfg.early_stopping {
        Some(_) if train.scrambled >= 1.0 => None,
        p => p,
    };
    let (fit_set, held) = match patience {
        Some(_) => {
            let (rest, held) = train.split(cfg.validation_size, cfg.validation_seed)?;
            (rest, Some(held))
        }
        None => (train.clone(), None),
    };

    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stopped = None;
    while trainer.epoch < trainer.config.epochs {
        let m = trainer.epoch(&fit_set, test)?;
        log(&m);
        metrics.push(m);
        if let (Some(p), Some(held)) = (patience, &held) {
            let loss = evaluate(&trainer.model, held, usize::MAX)?.loss;
            if best.as_ref().is_none_or(|b| loss < b.0) {
                best = Some((loss, trainer.epoch, trainer.model.clone()));
            } else if trainer.epoch - best.as_ref().map_or(0, |b| b.1) >= p {
                stopped = Some(trainer.epoch);
                break;
            }
        }
    }

    let early_stopping = match (cfg.early_stopping, patience, best) {
        (None, _, _) => EarlyStopping::Disabled,
        (Some(_), None, _) => EarlyStopping::NotApplicable,
        (Some(_), Some(_), Some((_, epoch, model))) => {
            trainer.model = model;
            EarlyStopping::Applied {
                best_epoch: epoch,
                stopped_epoch: stopped.unwrap_or(trainer.epoch),
            }
        }
        (Some(_), Some(_), None) => EarlyStopping::Disabled,
    };
    let ev = evaluate(&trainer.model, test, usize::MAX)?;
    Ok(BaselineOutcome {
        model: trainer.model,
        metrics,
        early_stopping,
        test_accuracy: ev.accuracy,
        test_gap: ev.mean_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{scramble_labels, synthetic_blobs};

    fn base() -> VariantSpec {
        VariantSpec {
            model: ModelSpec::default_mnist(),
            mode: WeightMode::Rescale,
            loss: LossConfig::new(10),
        }
    }

    #[test]
    fn each_ablation_changes_one_dimension() {
        let b = base();
        let expect = [
            (Ablation::WeightReg, "weight_reg"),
            (Ablation::LossC, "loss"),
            (Ablation::NormPooling, "pooling"),
            (Ablation::TwoSidedRelu, "activation"),
        ];
        for (a, dim) in expect {
            let v = ablation_variant(&b, a);
            assert_eq!(b.diff(&v), vec![dim], "{a}");
            assert!(v.model.shapes().is_ok());
        }
        assert!(!ablation_variant(&b, Ablation::WeightReg).gap_is_meaningful());
        let lc = ablation_variant(&b, Ablation::LossC);
        assert_eq!((lc.loss.omega, lc.loss.gamma), (0.0, b.loss.gamma));
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("dropout".parse::<Ablation>().is_err());
    }

    #[test]
    fn baseline_architecture_doubles_widths() {
        let b = baseline_architecture(&ModelSpec::default_mnist());
        assert_eq!(
            b.to_string(),
            "input(1x28x28) conv(32,3x3,2x2,same) relu conv(64,3x3,2x2,same) relu normpool(2x2,2x2) flatten linear(256) relu linear(10)"
        );
        let a = ModelSpec::default_mnist().shapes().unwrap();
        let c = b.shapes().unwrap();
        // Activation sizes after each (two-sided) ReLU agree.
        assert_eq!(a[2], c[2]);
        assert_eq!(a[4], c[4]);
    }

    fn blobs() -> (Dataset, Dataset) {
        let ds = synthetic_blobs(3, 200, 4, 4.0, 3).unwrap();
        (ds.range(0, 450), ds.range(450, 600))
    }

    fn cfg(epochs: usize) -> BaselineConfig {
        let arch: ModelSpec = "input(4) linear(16) relu linear(3)".parse().unwrap();
        BaselineConfig {
            validation_size: 100,
            ..BaselineConfig::vanilla(
                arch,
                TrainConfig {
                    epochs,
                    batch_size: 32,
                    ..TrainConfig::default()
                },
            )
        }
    }

    #[test]
    fn vanilla_baseline_learns_blobs() {
        let (train, test) = blobs();
        let out = train_baseline(&cfg(5), &train, &test, |_| {}).unwrap();
        assert!(out.test_accuracy > 0.9);
        assert_eq!(out.early_stopping, EarlyStopping::Disabled);
    }

    #[test]
    fn early_stopping_applies_and_is_na_on_random_labels() {
        let (train, test) = blobs();
        let es = BaselineConfig {
            early_stopping: Some(2),
            ..cfg(30)
        };
        let out = train_baseline(&es, &train, &test, |_| {}).unwrap();
        match out.early_stopping {
            EarlyStopping::Applied { best_epoch, stopped_epoch } => assert!(best_epoch <= stopped_epoch),
            e => panic!("{e:?}"),
        }
        let noisy = scramble_labels(&train, 1.0, 1).unwrap();
        let out = train_baseline(
            &BaselineConfig {
                train: TrainConfig {
                    epochs: 2,
                    ..es.train.clone()
                },
                ..es
            },
            &noisy,
            &test,
            |_| {},
        )
        .unwrap();
        assert_eq!(out.early_stopping, EarlyStopping::NotApplicable);
    }

    #[test]
    fn grid_covers_each_regularizer() {
        let g = baseline_grid(&cfg(1));
        assert_eq!(g.len(), 5);
        assert!(g.iter().all(|c| c.validate().is_ok()));
        assert_eq!(g[4].tag(), "ES=3");
        assert_eq!(cfg(1).tag(), "vanilla");
    }
}
