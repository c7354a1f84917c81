//! Run configuration: one flat TOML file, every key optional, unknown keys
//! rejected. `--set key=value` overrides are applied before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use l2nnn::attack::AttackConfig;
use l2nnn::layers::WeightMode;
use l2nnn::losses::{AdversarialConfig, LossConfig};
use l2nnn::model::ModelSpec;
use l2nnn::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("config key `{key}`: {msg}")]
    Field { key: &'static str, msg: String },
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out: PathBuf,

    // model
    pub arch: String,
    /// Starting weight mode: `penalty`, `rescale` or `free`.
    pub mode: String,
    pub stop_bound_grad: bool,

    // loss
    pub gamma: f64,
    pub omega: f64,
    pub z: f64,
    /// Starting value of every per-class logit scale in `L_a`.
    pub u_init: f64,
    pub v: f64,
    pub train_v: bool,
    pub penalty_weight: f64,
    /// `0` disables adversarial `L_a`.
    pub adversarial_epsilon: f64,
    pub adversarial_steps: usize,

    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    /// Joint gradient norm cap per step; `0` disables clipping.
    pub grad_clip: f64,
    /// Penalty-to-rescale switch; defaults to half of `epochs`.
    pub switch_epoch: Option<usize>,

    // baselines
    /// Epoch budget of unconstrained baselines; defaults to `epochs`.
    pub baseline_epochs: Option<usize>,
    /// Also train the weight-decay, dropout and early-stopping grid.
    pub baseline_grid: bool,

    // data
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub train_limit: usize,
    pub test_limit: usize,
    pub scramble_fraction: f64,
    pub scramble_seed: u64,
    pub validation_size: usize,
    pub validation_seed: u64,

    // attack and analysis
    pub attack_epsilon: f64,
    /// Iteration budgets of the sweep; the largest is the attack length.
    pub attack_ladder: Vec<usize>,
    pub attack_restarts: usize,
    /// `0` selects `2 * epsilon / sqrt(steps)`.
    pub attack_step_size: f64,
    pub attack_samples: usize,
    pub bins: usize,
    pub scramble_fractions: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out: PathBuf::from("runs"),
            arch: ModelSpec::default_mnist().to_string(),
            mode: "rescale".into(),
            stop_bound_grad: false,
            gamma: 0.5,
            omega: 0.5,
            z: LossConfig::DEFAULT_Z,
            u_init: 8.0,
            v: LossConfig::DEFAULT_V,
            train_v: true,
            penalty_weight: 1.0,
            adversarial_epsilon: 0.0,
            adversarial_steps: 10,
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.005,
            momentum: 0.9,
            lr_decay: 0.95,
            grad_clip: 20.0,
            switch_epoch: None,
            baseline_epochs: None,
            baseline_grid: false,
            train_images: PathBuf::from("data/mnist/train-images-idx3-ubyte"),
            train_labels: PathBuf::from("data/mnist/train-labels-idx1-ubyte"),
            test_images: PathBuf::from("data/mnist/t10k-images-idx3-ubyte"),
            test_labels: PathBuf::from("data/mnist/t10k-labels-idx1-ubyte"),
            train_limit: 10_000,
            test_limit: 2_000,
            scramble_fraction: 0.0,
            scramble_seed: 0,
            validation_size: 1_000,
            validation_seed: 0,
            attack_epsilon: 1.5,
            attack_ladder: vec![10, 100, 1000],
            attack_restarts: 1,
            attack_step_size: 0.0,
            attack_samples: 200,
            bins: 10,
            scramble_fractions: vec![0.0, 0.5, 1.0],
        }
    }
}

/// Parses `key=value`; the value is read as a TOML literal when possible and
/// as a bare string otherwise.
fn parse_override(s: &str) -> Result<(String, toml::Value), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Override(s.to_string()))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(ConfigError::Override(s.to_string()));
    }
    let probe = format!("x = {v}");
    let value = match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").expect("probe key"),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((k.to_string(), value))
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Field {
                key: "version",
                msg: format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            });
        }
        self.model_spec()?;
        self.weight_mode()?;
        if !(self.u_init > 0.0 && self.u_init.is_finite()) {
            return Err(ConfigError::Field {
                key: "u_init",
                msg: format!("{} must be positive", self.u_init),
            });
        }
        self.loss_config(10).validate().map_err(|msg| ConfigError::Field {
            key: "gamma/omega/z/penalty_weight",
            msg,
        })?;
        self.train_config()
            .validate()
            .map_err(|msg| ConfigError::Field { key: "training", msg })?;
        if !(0.0..=1.0).contains(&self.scramble_fraction) {
            return Err(ConfigError::Field {
                key: "scramble_fraction",
                msg: format!("{} is outside [0, 1]", self.scramble_fraction),
            });
        }
        if let Some(f) = self.scramble_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(ConfigError::Field {
                key: "scramble_fractions",
                msg: format!("{f} is outside [0, 1]"),
            });
        }
        if self.attack_ladder.is_empty() || self.attack_ladder.contains(&0) {
            return Err(ConfigError::Field {
                key: "attack_ladder",
                msg: "needs at least one positive iteration budget".into(),
            });
        }
        if self.attack_epsilon.is_nan() || self.attack_epsilon < 0.0 {
            return Err(ConfigError::Field {
                key: "attack_epsilon",
                msg: format!("{} must be non-negative", self.attack_epsilon),
            });
        }
        if self.attack_restarts == 0 {
            return Err(ConfigError::Field {
                key: "attack_restarts",
                msg: "must be positive".into(),
            });
        }
        if self.bins < 2 {
            return Err(ConfigError::Field {
                key: "bins",
                msg: format!("need at least 2 bins, got {}", self.bins),
            });
        }
        if self.train_limit == 0 || self.test_limit == 0 {
            return Err(ConfigError::Field {
                key: "train_limit/test_limit",
                msg: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec, ConfigError> {
        self.arch.parse().map_err(|e: l2nnn::model::SpecError| ConfigError::Field {
            key: "arch",
            msg: e.to_string(),
        })
    }

    pub fn weight_mode(&self) -> Result<WeightMode, ConfigError> {
        match self.mode.as_str() {
            "penalty" => Ok(WeightMode::Penalty),
            "rescale" => Ok(WeightMode::Rescale),
            "free" => Ok(WeightMode::Free),
            m => Err(ConfigError::Field {
                key: "mode",
                msg: format!("unknown mode `{m}` (expected penalty, rescale or free)"),
            }),
        }
    }

    pub fn loss_config(&self, classes: usize) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            omega: self.omega,
            z: self.z,
            u: vec![self.u_init; classes],
            v: self.v,
            train_v: self.train_v,
            penalty_weight: self.penalty_weight,
            adversarial: (self.adversarial_epsilon > 0.0).then_some(AdversarialConfig {
                epsilon: self.adversarial_epsilon,
                steps: self.adversarial_steps,
            }),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            lr_decay: self.lr_decay,
            switch_epoch: self.switch_epoch.unwrap_or(self.epochs / 2),
            weight_decay: 0.0,
            dropout: 0.0,
            grad_clip: self.grad_clip,
            eval_limit: usize::MAX,
            seed: self.seed,
        }
    }

    /// Schedule of the unconstrained baselines (regularizers come from
    /// [`l2nnn::baselines::BaselineConfig`]).
    pub fn baseline_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.baseline_epochs.unwrap_or(self.epochs),
            switch_epoch: 0,
            ..self.train_config()
        }
    }

    /// Attack settings at `epsilon` with the largest ladder budget.
    pub fn attack_config(&self, epsilon: f64) -> Result<AttackConfig, ConfigError> {
        let steps = *self.attack_ladder.iter().max().expect("validated ladder");
        let mut cfg = AttackConfig::new(epsilon.max(f64::MIN_POSITIVE), steps)
            .map_err(|e| ConfigError::Field {
                key: "attack",
                msg: e.to_string(),
            })?
            .with_restarts(self.attack_restarts)
            .with_seed(self.seed);
        if self.attack_step_size > 0.0 {
            cfg = cfg.with_step_size(self.attack_step_size);
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig {
            switch_epoch: Some(3),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let e = RunConfig::from_toml("omgea = 0.3", &[]).unwrap_err();
        assert!(e.to_string().contains("omgea"), "{e}");
        let e = RunConfig::from_toml("", &["learning_rat=0.1".into()]).unwrap_err();
        assert!(e.to_string().contains("learning_rat"), "{e}");
    }

    #[test]
    fn overrides_beat_file_values() {
        let c = RunConfig::from_toml(
            "epochs = 3\nmode = \"rescale\"",
            &["epochs=7".into(), "mode=free".into(), "attack_ladder=[1, 5]".into()],
        )
        .unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.mode, "free");
        assert_eq!(c.attack_ladder, vec![1, 5]);
    }

    #[test]
    fn invalid_values_name_the_field() {
        for (text, key) in [
            ("version = 2", "version"),
            ("mode = \"loose\"", "mode"),
            ("arch = \"input(1x28x28) frobnicate\"", "arch"),
            ("bins = 1", "bins"),
            ("z = 0.0", "gamma/omega/z"),
            ("batch_size = 0", "training"),
        ] {
            let e = RunConfig::from_toml(text, &[]).unwrap_err();
            assert!(e.to_string().contains(key), "{text}: {e}");
        }
        assert!(matches!(
            RunConfig::from_toml("", &["novalue".into()]),
            Err(ConfigError::Override(_))
        ));
    }
}
