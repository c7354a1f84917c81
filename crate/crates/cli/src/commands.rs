//! Subcommands. Each writes its tables under `cfg.out` and returns a summary
//! for the terminal.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use l2nnn::attack::{iteration_sweep, pgd_l2_batch, robust_accuracy, AttackConfig, AttackError, SweepTable};
use l2nnn::baselines::{
    ablation_variant, baseline_architecture, baseline_grid, train_baseline, Ablation, BaselineConfig, BaselineError, EarlyStopping,
    VariantSpec,
};
use l2nnn::certify::{certify_batch, Certificate, CertifyError, LipschitzReport};
use l2nnn::datasets::{load_idx, scramble_labels, Dataset, DatasetError};
use l2nnn::layers::WeightMode;
use l2nnn::model::{Classifier, Model};
use l2nnn::train::{evaluate, EpochMetrics, Objective, TrainError, Trainer};
use l2nnn::{Tensor, TensorError};

use crate::checkpoint::{self, Checkpoint, CheckpointError, LossState};
use crate::config::{ConfigError, RunConfig};
use crate::report::{num, Table};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Mismatch(String),
    #[error("{count} certificate violation(s); details in {dump}")]
    Violation { count: usize, dump: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Violation { .. } => 3,
            CliError::Io { .. } | CliError::Checkpoint(CheckpointError::Io { .. }) | CliError::Data(DatasetError::Io { .. }) => 4,
            _ => 1,
        }
    }
}

/// Progress sink for long-running commands.
pub type Log<'a> = &'a mut dyn FnMut(&str);

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn out_dir(cfg: &RunConfig, sub: &str) -> Result<PathBuf, CliError> {
    let dir = if sub.is_empty() { cfg.out.clone() } else { cfg.out.join(sub) };
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn write_table(t: &Table, path: &Path) -> Result<(), CliError> {
    t.write(path).map_err(io_err(path))
}

/// Training subset (scrambled if configured) and test subset.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let train = load_idx(&cfg.train_images, &cfg.train_labels)?.take(cfg.train_limit);
    let test = load_idx(&cfg.test_images, &cfg.test_labels)?.take(cfg.test_limit);
    let train = if cfg.scramble_fraction > 0.0 {
        scramble_labels(&train, cfg.scramble_fraction, cfg.scramble_seed)?
    } else {
        train
    };
    Ok((train, test))
}

/// The configured model, weight mode and loss.
pub fn base_variant(cfg: &RunConfig) -> Result<VariantSpec, CliError> {
    let model = cfg.model_spec()?;
    let classes = model.num_classes();
    Ok(VariantSpec {
        model,
        mode: cfg.weight_mode()?,
        loss: cfg.loss_config(classes),
    })
}

/// Trains `variant` from scratch with the configured schedule.
pub fn train_variant(cfg: &RunConfig, variant: &VariantSpec, train: &Dataset, test: &Dataset, log: Log) -> Result<Trainer, CliError> {
    let mut model = Model::new(variant.model.clone(), variant.mode, cfg.seed);
    model.stop_bound_grad = cfg.stop_bound_grad;
    let mut trainer = Trainer::new(model, Objective::L2nnn(variant.loss.clone()), cfg.train_config())?;
    trainer.fit(train, test, |m| log(&metrics_line(m)))?;
    Ok(trainer)
}

fn metrics_line(m: &EpochMetrics) -> String {
    format!(
        "epoch {:>3} {:<7} loss {:.4} train {:.4} test {:.4} gap {:.4}/{:.4}",
        m.epoch,
        m.fields()[1],
        m.loss,
        m.train_accuracy,
        m.test_accuracy,
        m.train_gap,
        m.test_gap
    )
}

fn metrics_table(rows: &[EpochMetrics]) -> Table {
    let mut t = Table::new(&EpochMetrics::HEADER);
    for m in rows {
        t.push(m.fields());
    }
    t
}

fn checkpoint_of(trainer: &Trainer) -> Checkpoint {
    Checkpoint {
        model: trainer.model.clone(),
        epoch: trainer.epoch as u64,
        momentum: Some(trainer.momentum.clone()),
        loss: match &trainer.objective {
            Objective::L2nnn(l) => Some(LossState { u: l.u.clone(), v: l.v }),
            Objective::CrossEntropy => None,
        },
    }
}

/// Adjacent test images and small random perturbations of them, as audit
/// pairs in the per-sample shape.
pub fn audit_pairs(ds: &Dataset, count: usize, seed: u64) -> Result<Vec<(Tensor, Tensor)>, CliError> {
    let shape = ds.sample_shape().to_vec();
    let row = |i: usize| Tensor::new(shape.clone(), ds.images.row(i).to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let n = ds.len();
    for k in 0..count {
        let i = k % n;
        let a = row(i)?;
        let b = if k % 2 == 0 {
            row((i + 1) % n)?
        } else {
            let data = a
                .data()
                .iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + 0.05 * z
                })
                .collect();
            Tensor::new(shape.clone(), data)?
        };
        out.push((a, b));
    }
    Ok(out)
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: Vec<EpochMetrics>,
    pub audit: Option<LipschitzReport>,
}

/// Trains (or resumes) a model, writes `model.ckpt`, `metrics.tsv` and the
/// resolved `config.toml`, then audits the Lipschitz bound of rescaled models.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, log: Log) -> Result<TrainSummary, CliError> {
    let dir = out_dir(cfg, "")?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
    let (train, test) = load_data(cfg)?;
    let variant = base_variant(cfg)?;
    if variant.model.input != train.sample_shape() {
        return Err(CliError::Mismatch(format!(
            "architecture input {:?} does not match data shape {:?}",
            variant.model.input,
            train.sample_shape()
        )));
    }

    let mut model = Model::new(variant.model.clone(), variant.mode, cfg.seed);
    model.stop_bound_grad = cfg.stop_bound_grad;
    let mut loss = variant.loss.clone();
    let mut restored = None;
    if let Some(path) = resume {
        let ck = checkpoint::load(path)?;
        if ck.model.spec() != model.spec() {
            return Err(CliError::Mismatch(format!(
                "checkpoint architecture `{}` differs from the configured one",
                ck.model.spec()
            )));
        }
        if let Some(l) = &ck.loss {
            loss.u = l.u.clone();
            loss.v = l.v;
        }
        restored = Some((ck.epoch as usize, ck.momentum));
        model = ck.model;
    }
    let mut trainer = Trainer::new(model, Objective::L2nnn(loss), cfg.train_config())?;
    if let Some((epoch, momentum)) = restored {
        match momentum {
            Some(m) => trainer.resume(epoch, m)?,
            None => trainer.epoch = epoch,
        }
    }

    let metrics_path = dir.join("metrics.tsv");
    let mut rows = Vec::new();
    write_table(&metrics_table(&rows), &metrics_path)?;
    while trainer.epoch < trainer.config.epochs {
        let m = trainer.epoch(&train, &test)?;
        log(&metrics_line(&m));
        rows.push(m);
        write_table(&metrics_table(&rows), &metrics_path)?;
    }
    let ck_path = dir.join("model.ckpt");
    checkpoint::save(&checkpoint_of(&trainer), &ck_path)?;

    let audit = if trainer.model.mode == WeightMode::Rescale {
        let report = l2nnn::certify::model_lipschitz_audit(&trainer.model, &audit_pairs(&test, 200, cfg.seed)?)?;
        Some(report)
    } else {
        None
    };
    Ok(TrainSummary {
        checkpoint: ck_path,
        metrics: rows,
        audit,
    })
}

pub fn load_model(path: &Path) -> Result<Model, CliError> {
    Ok(checkpoint::load(path)?.model)
}

fn check_input(model: &Model, ds: &Dataset) -> Result<(), CliError> {
    if model.spec().input != ds.sample_shape() {
        return Err(CliError::Mismatch(format!(
            "checkpoint expects inputs {:?}, data has {:?}",
            model.spec().input,
            ds.sample_shape()
        )));
    }
    if model.num_classes() != ds.classes {
        return Err(CliError::Mismatch(format!(
            "checkpoint has {} classes, data has {}",
            model.num_classes(),
            ds.classes
        )));
    }
    Ok(())
}

/// Certificates for every input of `ds`, in batches.
pub fn certify_dataset(model: &Model, ds: &Dataset) -> Result<Vec<Certificate>, CliError> {
    let mode = model.cert_mode();
    let frozen = model.frozen();
    let mut out = Vec::with_capacity(ds.len());
    for start in (0..ds.len()).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(ds.len())).collect();
        out.extend(certify_batch(&frozen, &ds.images.select_rows(&idx), mode, start)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertifySummary {
    pub count: usize,
    pub accuracy: f64,
    pub mean_gap: f64,
    pub median_gap: f64,
    pub mean_radius: f64,
    /// Fraction of correctly classified inputs with a positive radius.
    pub certified_fraction: f64,
}

pub fn summarize(certs: &[Certificate], labels: &[usize]) -> CertifySummary {
    let n = certs.len().max(1) as f64;
    let mut gaps: Vec<f64> = certs.iter().map(|c| c.gap).collect();
    gaps.sort_by(f64::total_cmp);
    let correct = certs.iter().filter(|c| c.predicted == labels[c.id]).count();
    let certified = certs.iter().filter(|c| c.predicted == labels[c.id] && c.radius > 0.0).count();
    CertifySummary {
        count: certs.len(),
        accuracy: correct as f64 / n,
        mean_gap: gaps.iter().sum::<f64>() / n,
        median_gap: median(&gaps),
        mean_radius: certs.iter().map(|c| c.radius).sum::<f64>() / n,
        certified_fraction: certified as f64 / n,
    }
}

/// Median of sorted values (mean of the middle pair for even counts).
pub fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Writes `certificates.tsv` for the test subset.
pub fn cmd_certify(cfg: &RunConfig, ckpt: &Path) -> Result<CertifySummary, CliError> {
    let model = load_model(ckpt)?;
    let (_, test) = load_data(cfg)?;
    check_input(&model, &test)?;
    let certs = certify_dataset(&model, &test)?;
    let mut t = Table::new(&["id", "label", "predicted", "gap", "radius", "mode"]);
    for c in &certs {
        t.push(vec![
            c.id.to_string(),
            test.labels[c.id].to_string(),
            c.predicted.to_string(),
            num(c.gap),
            num(c.radius),
            format!("{:?}", c.mode).to_lowercase(),
        ]);
    }
    write_table(&t, &out_dir(cfg, "")?.join("certificates.tsv"))?;
    Ok(summarize(&certs, &test.labels))
}

/// A successful attack inside a certified radius.
#[derive(Clone, Debug, PartialEq)]
pub struct CertViolation {
    pub id: usize,
    pub predicted: usize,
    pub radius: f64,
    pub distortion: f64,
    pub adversarial_label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertCheck {
    /// Inputs with a positive radius that were attacked.
    pub attacked: usize,
    pub violations: Vec<CertViolation>,
}

/// Attacks the predicted label of every input with a positive radius at
/// `scale * radius`. Any label change is a violation of the certificate.
pub fn certificate_check(model: &Model, x: &Tensor, scale: f64, cfg: &AttackConfig) -> Result<CertCheck, CliError> {
    let frozen = model.frozen();
    let certs = certify_batch(&frozen, x, model.cert_mode(), 0)?;
    let live: Vec<usize> = certs.iter().filter(|c| c.radius > 0.0).map(|c| c.id).collect();
    if live.is_empty() {
        return Ok(CertCheck {
            attacked: 0,
            violations: Vec::new(),
        });
    }
    let xs = x.select_rows(&live);
    let ls: Vec<usize> = live.iter().map(|&i| certs[i].predicted).collect();
    let eps: Vec<f64> = live.iter().map(|&i| scale * certs[i].radius).collect();
    let results = pgd_l2_batch(&frozen, &xs, &ls, &eps, cfg)?;
    let mut violations = Vec::new();
    for (k, r) in results.iter().enumerate() {
        if r.success {
            let mut shape = vec![1];
            shape.extend_from_slice(r.adversarial.shape());
            let adv = Tensor::new(shape, r.adversarial.data().to_vec())?;
            violations.push(CertViolation {
                id: live[k],
                predicted: ls[k],
                radius: certs[live[k]].radius,
                distortion: r.distortion,
                adversarial_label: frozen.predict(&adv)?[0],
            });
        }
    }
    Ok(CertCheck {
        attacked: live.len(),
        violations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSummary {
    pub sweep: SweepTable,
    pub nominal_accuracy: f64,
    /// `None` for unconstrained models, which carry no certificate.
    pub certificate: Option<CertCheck>,
}

/// Iteration sweep at `attack_epsilon` plus a certificate check on the
/// first `attack_samples` test inputs. Writes `sweep.tsv`; violations are
/// dumped to `violations.tsv` and reported as an error.
pub fn cmd_attack(cfg: &RunConfig, ckpt: &Path, log: Log) -> Result<AttackSummary, CliError> {
    let model = load_model(ckpt)?;
    let (_, test) = load_data(cfg)?;
    check_input(&model, &test)?;
    let ds = test.take(cfg.attack_samples);
    let frozen = model.frozen();
    let acfg = cfg.attack_config(cfg.attack_epsilon.max(1e-12))?;
    let nominal = evaluate(&frozen, &ds, usize::MAX)?.accuracy;
    let sweep = if cfg.attack_epsilon > 0.0 {
        log(&format!("sweeping {} inputs at eps {}", ds.len(), cfg.attack_epsilon));
        iteration_sweep(&frozen, &ds.images, &ds.labels, cfg.attack_epsilon, &cfg.attack_ladder, &acfg)?
    } else {
        SweepTable {
            epsilon: 0.0,
            rows: cfg.attack_ladder.iter().map(|&m| (m, nominal)).collect(),
        }
    };
    let dir = out_dir(cfg, "")?;
    let mut t = Table::new(&["epsilon", "iterations", "robust_accuracy"]);
    for &(m, acc) in &sweep.rows {
        t.push(vec![num(sweep.epsilon), m.to_string(), num(acc)]);
    }
    write_table(&t, &dir.join("sweep.tsv"))?;

    let certificate = if model.mode == WeightMode::Free {
        None
    } else {
        log("checking certificates at 0.99 x radius");
        Some(certificate_check(&model, &ds.images, 0.99, &acfg)?)
    };
    if let Some(check) = &certificate {
        if !check.violations.is_empty() {
            let mut t = Table::new(&["id", "predicted", "radius", "distortion", "adversarial_label"]);
            for v in &check.violations {
                t.push(vec![
                    v.id.to_string(),
                    v.predicted.to_string(),
                    num(v.radius),
                    num(v.distortion),
                    v.adversarial_label.to_string(),
                ]);
            }
            let path = dir.join("violations.tsv");
            write_table(&t, &path)?;
            return Err(CliError::Violation {
                count: check.violations.len(),
                dump: path.display().to_string(),
            });
        }
    }
    Ok(AttackSummary {
        sweep,
        nominal_accuracy: nominal,
        certificate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinRow {
    pub count: usize,
    pub min_gap: f64,
    pub max_gap: f64,
    pub accuracy: f64,
    pub robust_accuracy: f64,
}

/// Sorts inputs by gap (largest first), splits them into `bins` nearly
/// equal groups and measures nominal and robust accuracy per group.
pub fn gap_bins(model: &Model, ds: &Dataset, bins: usize, cfg: &AttackConfig) -> Result<Vec<BinRow>, CliError> {
    if bins < 2 || bins > ds.len() {
        return Err(ConfigError::Field {
            key: "bins",
            msg: format!("need 2 <= bins <= {} inputs, got {bins}", ds.len()),
        }
        .into());
    }
    let frozen = model.frozen();
    let certs = certify_batch(&frozen, &ds.images, model.cert_mode(), 0)?;
    let broken: Vec<bool> = pgd_l2_batch(&frozen, &ds.images, &ds.labels, &vec![cfg.epsilon; ds.len()], cfg)?
        .into_iter()
        .map(|r| r.success)
        .collect();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| certs[b].gap.total_cmp(&certs[a].gap).then(a.cmp(&b)));
    let n = ds.len();
    let mut rows = Vec::with_capacity(bins);
    for b in 0..bins {
        let chunk = &order[b * n / bins..(b + 1) * n / bins];
        let correct = |i: &&usize| certs[**i].predicted == ds.labels[**i];
        let nominal = chunk.iter().filter(correct).count();
        let robust = chunk.iter().filter(correct).filter(|&&i| !broken[i]).count();
        let gaps = chunk.iter().map(|&i| certs[i].gap);
        rows.push(BinRow {
            count: chunk.len(),
            min_gap: gaps.clone().fold(f64::INFINITY, f64::min),
            max_gap: gaps.fold(f64::NEG_INFINITY, f64::max),
            accuracy: nominal as f64 / chunk.len() as f64,
            robust_accuracy: robust as f64 / chunk.len() as f64,
        });
    }
    Ok(rows)
}

/// Writes `bins.tsv`.
pub fn cmd_bins(cfg: &RunConfig, ckpt: &Path) -> Result<Vec<BinRow>, CliError> {
    let model = load_model(ckpt)?;
    let (_, test) = load_data(cfg)?;
    check_input(&model, &test)?;
    let ds = test.take(cfg.attack_samples);
    let rows = gap_bins(&model, &ds, cfg.bins, &cfg.attack_config(cfg.attack_epsilon.max(1e-12))?)?;
    let mut t = Table::new(&["bin", "count", "min_gap", "max_gap", "accuracy", "robust_accuracy"]);
    for (i, r) in rows.iter().enumerate() {
        t.push(vec![
            (i + 1).to_string(),
            r.count.to_string(),
            num(r.min_gap),
            num(r.max_gap),
            num(r.accuracy),
            num(r.robust_accuracy),
        ]);
    }
    write_table(&t, &out_dir(cfg, "")?.join("bins.tsv"))?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    Value(f64),
    /// The median gap of the L2NNN on the evaluated inputs.
    Median,
}

impl std::str::FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "median" => Ok(Threshold::Median),
            "inf" | "+inf" => Ok(Threshold::Value(f64::INFINITY)),
            _ => s
                .parse::<f64>()
                .ok()
                .filter(|v| !v.is_nan())
                .map(Threshold::Value)
                .ok_or_else(|| format!("threshold must be a number, `inf` or `median`, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridSummary {
    pub threshold: f64,
    pub accuracy: f64,
    /// Fraction of inputs answered by the fallback model.
    pub delegated: f64,
    pub l2nnn_accuracy: f64,
    pub fallback_accuracy: f64,
}

/// Answers with the L2NNN when its gap is at least the threshold and with
/// the fallback otherwise.
pub fn hybrid(l2nnn: &Model, fallback: &Model, ds: &Dataset, threshold: Threshold) -> Result<HybridSummary, CliError> {
    if l2nnn.num_classes() != fallback.num_classes() {
        return Err(CliError::Mismatch(format!(
            "label counts differ: {} vs {}",
            l2nnn.num_classes(),
            fallback.num_classes()
        )));
    }
    let certs = certify_batch(&l2nnn.frozen(), &ds.images, l2nnn.cert_mode(), 0)?;
    let other = fallback.frozen().predict(&ds.images)?;
    let t = match threshold {
        Threshold::Value(v) => v,
        Threshold::Median => {
            let mut g: Vec<f64> = certs.iter().map(|c| c.gap).collect();
            g.sort_by(f64::total_cmp);
            median(&g)
        }
    };
    let n = ds.len() as f64;
    let (mut ok, mut delegated, mut ok_l, mut ok_f) = (0, 0, 0, 0);
    for (i, c) in certs.iter().enumerate() {
        let y = ds.labels[i];
        ok_l += usize::from(c.predicted == y);
        ok_f += usize::from(other[i] == y);
        let pred = if c.gap >= t {
            c.predicted
        } else {
            delegated += 1;
            other[i]
        };
        ok += usize::from(pred == y);
    }
    Ok(HybridSummary {
        threshold: t,
        accuracy: ok as f64 / n,
        delegated: delegated as f64 / n,
        l2nnn_accuracy: ok_l as f64 / n,
        fallback_accuracy: ok_f as f64 / n,
    })
}

pub fn cmd_hybrid(cfg: &RunConfig, l2nnn: &Path, fallback: &Path, threshold: Threshold) -> Result<HybridSummary, CliError> {
    let a = load_model(l2nnn)?;
    let b = load_model(fallback)?;
    let (_, test) = load_data(cfg)?;
    check_input(&a, &test)?;
    check_input(&b, &test)?;
    let s = hybrid(&a, &b, &test, threshold)?;
    let mut t = Table::new(&["threshold", "accuracy", "delegated", "l2nnn_accuracy", "fallback_accuracy"]);
    t.push(vec![
        num(s.threshold),
        num(s.accuracy),
        num(s.delegated),
        num(s.l2nnn_accuracy),
        num(s.fallback_accuracy),
    ]);
    write_table(&t, &out_dir(cfg, "")?.join("hybrid.tsv"))?;
    Ok(s)
}

/// One row of the scrambled-label comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ScrambleRow {
    pub fraction: f64,
    pub model: String,
    /// Accuracy against the (partly scrambled) training labels.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_gap: f64,
    pub test_gap: f64,
    pub note: String,
}

/// The vanilla baseline mirroring the configured architecture.
pub fn vanilla_config(cfg: &RunConfig) -> Result<BaselineConfig, CliError> {
    let mut b = BaselineConfig::vanilla(baseline_architecture(&cfg.model_spec()?), cfg.baseline_train_config());
    b.validation_size = cfg.validation_size;
    b.validation_seed = cfg.validation_seed;
    b.init_seed = cfg.seed;
    Ok(b)
}

fn final_row(fraction: f64, model: String, train: &Dataset, test: &Dataset, m: &Model, note: String) -> Result<ScrambleRow, CliError> {
    let frozen = m.frozen();
    let tr = evaluate(&frozen, train, usize::MAX)?;
    let te = evaluate(&frozen, test, usize::MAX)?;
    Ok(ScrambleRow {
        fraction,
        model,
        train_accuracy: tr.accuracy,
        test_accuracy: te.accuracy,
        train_gap: tr.mean_gap,
        test_gap: te.mean_gap,
        note,
    })
}

/// Trains the L2NNN and the vanilla baseline (plus the regularized grid when
/// `baseline_grid` is set) at every scramble fraction. Writes `scramble.tsv`
/// and per-run metrics under `scramble/`.
pub fn cmd_scramble(cfg: &RunConfig, log: Log) -> Result<Vec<ScrambleRow>, CliError> {
    let base = RunConfig {
        scramble_fraction: 0.0,
        ..cfg.clone()
    };
    let (clean, test) = load_data(&base)?;
    let variant = base_variant(cfg)?;
    let dir = out_dir(cfg, "scramble")?;
    let vanilla = vanilla_config(cfg)?;
    let mut baselines = vec![vanilla.clone()];
    if cfg.baseline_grid {
        baselines.extend(baseline_grid(&vanilla));
    }
    let mut rows = Vec::new();
    for &f in &cfg.scramble_fractions {
        let train = scramble_labels(&clean, f, cfg.scramble_seed)?;
        log(&format!("fraction {f}: l2nnn"));
        let t = train_variant(cfg, &variant, &train, &test, log)?;
        let tag = format!("{f}");
        write_table(&metrics_table_of(&t, &train, &test)?, &dir.join(format!("l2nnn_{tag}.tsv")))?;
        rows.push(final_row(f, "l2nnn".into(), &train, &test, &t.model, String::new())?);
        for b in &baselines {
            log(&format!("fraction {f}: baseline {}", b.tag()));
            let out = train_baseline(b, &train, &test, |m| log(&metrics_line(m)))?;
            write_table(
                &metrics_table(&out.metrics),
                &dir.join(format!("baseline_{}_{tag}.tsv", b.tag().replace([' ', '='], "_"))),
            )?;
            let note = match out.early_stopping {
                EarlyStopping::Disabled => String::new(),
                EarlyStopping::NotApplicable => "early stopping n/a".into(),
                EarlyStopping::Applied { best_epoch, .. } => format!("best epoch {best_epoch}"),
            };
            rows.push(final_row(f, b.tag(), &train, &test, &out.model, note)?);
        }
    }
    let mut t = Table::new(&["fraction", "model", "train_acc", "test_acc", "gap1", "gap2", "note"]);
    for r in &rows {
        t.push(vec![
            num(r.fraction),
            r.model.clone(),
            num(r.train_accuracy),
            num(r.test_accuracy),
            num(r.train_gap),
            num(r.test_gap),
            r.note.clone(),
        ]);
    }
    write_table(&t, &out_dir(cfg, "")?.join("scramble.tsv"))?;
    Ok(rows)
}

/// Final-state evaluation as a one-row metrics table.
fn metrics_table_of(t: &Trainer, train: &Dataset, test: &Dataset) -> Result<Table, CliError> {
    let frozen = t.model.frozen();
    let tr = evaluate(&frozen, train, usize::MAX)?;
    let te = evaluate(&frozen, test, usize::MAX)?;
    let mut table = Table::new(&["epoch", "train_acc", "test_acc", "train_gap", "test_gap"]);
    table.push(vec![
        t.epoch.to_string(),
        num(tr.accuracy),
        num(te.accuracy),
        num(tr.mean_gap),
        num(te.mean_gap),
    ]);
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// `full` or the name of the removed technique.
    pub variant: String,
    pub accuracy: f64,
    pub mean_gap: f64,
    pub robust_accuracy: f64,
    /// `false` for unconstrained variants, whose gaps certify nothing.
    pub gap_meaningful: bool,
}

impl AblationRow {
    pub fn score(&self) -> f64 {
        self.mean_gap * self.robust_accuracy
    }
}

/// Trains and evaluates one variant: test accuracy and mean gap on the test
/// subset, robust accuracy on its first `attack_samples` inputs.
pub fn evaluate_variant(
    cfg: &RunConfig,
    name: &str,
    variant: &VariantSpec,
    train: &Dataset,
    test: &Dataset,
    log: Log,
) -> Result<AblationRow, CliError> {
    let t = train_variant(cfg, variant, train, test, log)?;
    let frozen = t.model.frozen();
    let ev = evaluate(&frozen, test, usize::MAX)?;
    let ds = test.take(cfg.attack_samples);
    let robust = robust_accuracy(&frozen, &ds.images, &ds.labels, &cfg.attack_config(cfg.attack_epsilon.max(1e-12))?)?;
    Ok(AblationRow {
        variant: name.to_string(),
        accuracy: ev.accuracy,
        mean_gap: ev.mean_gap,
        robust_accuracy: robust,
        gap_meaningful: variant.gap_is_meaningful(),
    })
}

/// Full model and each single-technique ablation. Writes `ablation.tsv`.
pub fn cmd_ablate(cfg: &RunConfig, which: &[Ablation], log: Log) -> Result<Vec<AblationRow>, CliError> {
    let (train, test) = load_data(cfg)?;
    let base = base_variant(cfg)?;
    log("variant full");
    let mut rows = vec![evaluate_variant(cfg, "full", &base, &train, &test, log)?];
    for &a in which {
        log(&format!("variant without {a}"));
        rows.push(evaluate_variant(cfg, a.name(), &ablation_variant(&base, a), &train, &test, log)?);
    }
    let mut t = Table::new(&["variant", "accuracy", "mean_gap", "robust_accuracy", "score", "gap_meaningful"]);
    for r in &rows {
        t.push(vec![
            r.variant.clone(),
            num(r.accuracy),
            num(r.mean_gap),
            num(r.robust_accuracy),
            num(r.score()),
            r.gap_meaningful.to_string(),
        ]);
    }
    write_table(&t, &out_dir(cfg, "")?.join("ablation.tsv"))?;
    Ok(rows)
}
