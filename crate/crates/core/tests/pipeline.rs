//! Train, certify and attack small models end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use l2nnn::attack::{pgd_l2_batch, AttackConfig};
use l2nnn::baselines::{ablation_variant, Ablation, VariantSpec};
use l2nnn::certify::{certify_batch, model_lipschitz_audit};
use l2nnn::datasets::{blobs_bayes_accuracy, load_idx, synthetic_blobs, write_idx, Dataset};
use l2nnn::layers::WeightMode;
use l2nnn::losses::LossConfig;
use l2nnn::model::{Classifier, Model, ModelSpec, Param};
use l2nnn::train::{Objective, TrainConfig, Trainer};
use l2nnn::Tensor;

const CLASSES: usize = 3;
const SEPARATION: f64 = 4.0;

fn blobs(seed: u64) -> Dataset {
    synthetic_blobs(CLASSES, 100, 6, SEPARATION, seed).unwrap()
}

fn trained_on_blobs() -> Model {
    let spec: ModelSpec = "input(6) linear(16) tsrelu linear(16) tsrelu heads(3)".parse().unwrap();
    let mut loss = LossConfig::new(CLASSES);
    loss.u = vec![4.0; CLASSES];
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 16,
        learning_rate: 0.02,
        lr_decay: 0.9,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(Model::new(spec, WeightMode::Rescale, 1), Objective::L2nnn(loss), cfg).unwrap();
    let metrics = t.fit(&blobs(1), &blobs(2), |_| {}).unwrap();
    let bayes = blobs_bayes_accuracy(CLASSES, SEPARATION);
    let last = metrics.last().unwrap();
    assert!(
        last.test_accuracy >= bayes - 0.08,
        "test accuracy {} vs bayes {bayes}",
        last.test_accuracy
    );
    assert!(last.loss < metrics[0].loss);
    t.model
}

#[test]
fn trained_model_is_nonexpansive_and_its_certificates_hold() {
    let model = trained_on_blobs();
    let test = blobs(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<(Tensor, Tensor)> = (0..200)
        .map(|_| {
            let i = rng.random_range(0..test.len());
            let j = rng.random_range(0..test.len());
            (
                Tensor::vector(test.images.row(i).to_vec()),
                Tensor::vector(test.images.row(j).to_vec()),
            )
        })
        .collect();
    let audit = model_lipschitz_audit(&model, &pairs).unwrap();
    assert!(audit.violations.is_empty(), "max ratio {}", audit.max_ratio);

    let frozen = model.frozen();
    let certs = certify_batch(&frozen, &test.images, model.cert_mode(), 0).unwrap();
    let labels: Vec<usize> = certs.iter().map(|c| c.predicted).collect();
    let eps: Vec<f64> = certs.iter().map(|c| 0.99 * c.radius).collect();
    let cfg = AttackConfig::new(1.0, 100)
        .unwrap()
        .with_restarts(2)
        .with_bounds(-1e6, 1e6)
        .with_seed(5);
    let attacked = pgd_l2_batch(&frozen, &test.images, &labels, &eps, &cfg).unwrap();
    let flipped = attacked.iter().filter(|r| r.success).count();
    assert_eq!(flipped, 0);
    assert!(certs.iter().filter(|c| c.radius > 0.5).count() > test.len() / 2);
}

#[test]
fn unconstrained_weights_can_expand_distances() {
    let spec: ModelSpec = "input(6) linear(16) tsrelu heads(3)".parse().unwrap();
    let base = Model::new(spec.clone(), WeightMode::Free, 0);
    let params = base
        .params()
        .iter()
        .map(|p| Param {
            name: p.name.clone(),
            value: p.value.map(|x| 10.0 * x + 1.0),
        })
        .collect();
    let model = Model::from_params(spec, WeightMode::Free, params).unwrap();
    let pairs = vec![(Tensor::vector(vec![0.0; 6]), Tensor::vector(vec![1.0; 6]))];
    let audit = model_lipschitz_audit(&model, &pairs).unwrap();
    // Multi-head models are audited per logit.
    assert!(!audit.violations.is_empty());
    assert!(audit
        .violations
        .iter()
        .all(|v| v.pair == 0 && v.logit.is_some() && !v.trace.is_empty()));
}

#[test]
fn idx_files_round_trip_through_disk() {
    let ds = Dataset::new(
        Tensor::new(vec![3, 1, 2, 2], vec![0.0, 1.0, 0.5, 0.25, 1.0, 1.0, 0.0, 0.0, 0.2, 0.4, 0.6, 0.8]).unwrap(),
        vec![2, 0, 1],
        10,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = write_idx(&ds).unwrap();
    std::fs::write(dir.path().join("img"), img).unwrap();
    std::fs::write(dir.path().join("lab"), lab).unwrap();
    let back = load_idx(dir.path().join("img"), dir.path().join("lab")).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.sample_shape(), &[1, 2, 2]);
    for (a, b) in back.images.data().iter().zip(ds.images.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0);
    }
}

#[test]
fn each_ablation_changes_one_dimension() {
    let base = VariantSpec {
        model: ModelSpec::default_mnist(),
        mode: WeightMode::Rescale,
        loss: LossConfig::new(10),
    };
    for a in Ablation::ALL {
        let v = ablation_variant(&base, a);
        assert_eq!(base.diff(&v).len(), 1, "{a}");
        let out = Model::new(v.model.clone(), v.mode, 0)
            .logits(&Tensor::zeros(&[1, 1, 28, 28]))
            .unwrap();
        assert_eq!(out.shape(), &[1, 10]);
    }
}
