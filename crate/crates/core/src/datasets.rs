//! MNIST IDX ingestion, synthetic Gaussian blobs and label scrambling.

use std::io;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Tensor, TensorError};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated IDX file ({len} bytes, need {need})")]
    Truncated { path: String, len: usize, need: usize },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is not below {classes}")]
    LabelRange { index: usize, label: usize, classes: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Images `[N, C, H, W]` (or `[N, D]`) in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Labels before any scrambling.
    pub true_labels: Vec<usize>,
    pub classes: usize,
    /// Seed of the last scramble, if any.
    pub seed: Option<u64>,
    /// Fraction of labels passed through [`scramble_labels`].
    pub scrambled: f64,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DatasetError> {
        if images.shape().len() < 2 || images.rows() != labels.len() {
            return Err(DatasetError::CountMismatch {
                images: images.shape().first().copied().unwrap_or(0),
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DatasetError::LabelRange { index, label, classes });
        }
        Ok(Self {
            images,
            true_labels: labels.clone(),
            labels,
            classes,
            seed: None,
            scrambled: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            true_labels: indices.iter().map(|&i| self.true_labels[i]).collect(),
            classes: self.classes,
            seed: self.seed,
            scrambled: self.scrambled,
        }
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Samples `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> Self {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        self.select(&idx)
    }

    /// Random disjoint split: `(rest, held_out)` with `held_out` of size `n`.
    pub fn split(&self, n: usize, seed: u64) -> Result<(Self, Self), DatasetError> {
        if n == 0 || n >= self.len() {
            return Err(DatasetError::Invalid(format!("cannot hold out {n} of {} samples", self.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut held = sample(&mut rng, self.len(), n).into_vec();
        held.sort_unstable();
        let mut mask = vec![false; self.len()];
        held.iter().for_each(|&i| mask[i] = true);
        let rest: Vec<usize> = (0..self.len()).filter(|&i| !mask[i]).collect();
        Ok((self.select(&rest), self.select(&held)))
    }

    /// Shuffled minibatch index lists covering every sample once.
    pub fn batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Fraction of samples whose current label equals the original one.
    pub fn label_agreement(&self) -> f64 {
        let same = self.labels.iter().zip(&self.true_labels).filter(|(a, b)| a == b).count();
        same as f64 / self.len() as f64
    }
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses one IDX file: returns `(dims, payload)`.
fn parse_idx<'a>(bytes: &'a [u8], path: &str, magic: u32) -> Result<(Vec<usize>, &'a [u8]), DatasetError> {
    let truncated = |need: usize| DatasetError::Truncated {
        path: path.to_string(),
        len: bytes.len(),
        need,
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DatasetError::BadMagic {
            path: path.to_string(),
            found,
            expected: magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let need = header + dims.iter().product::<usize>();
    if bytes.len() < need {
        return Err(truncated(need));
    }
    Ok((dims, &bytes[header..need]))
}

/// Builds a dataset from in-memory IDX image and label files.
pub fn parse_idx_pair(images: &[u8], labels: &[u8], image_path: &str, label_path: &str) -> Result<Dataset, DatasetError> {
    let (idims, pixels) = parse_idx(images, image_path, IDX_IMAGES_MAGIC)?;
    let (ldims, lbytes) = parse_idx(labels, label_path, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(DatasetError::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    if idims[0] == 0 {
        return Err(DatasetError::Invalid(format!("{image_path}: no images")));
    }
    let shape = vec![idims[0], 1, idims[1], idims[2]];
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = lbytes.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(Tensor::new(shape, data)?, labels, classes)
}

fn read(path: &Path) -> Result<Vec<u8>, DatasetError> {
    std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an IDX image file (magic 2051) and its label file (magic 2049).
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    parse_idx_pair(&read(ip)?, &read(lp)?, &ip.display().to_string(), &lp.display().to_string())
}

/// Serializes the dataset back to IDX bytes `(images, labels)`. Pixels are
/// rounded to the nearest of the 256 byte levels.
pub fn write_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>), DatasetError> {
    let s = ds.images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(DatasetError::Invalid(format!("IDX export needs [N, 1, H, W] images, got {s:?}")));
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [s[0], s[2], s[3]] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        let b = u8::try_from(l).map_err(|_| DatasetError::Invalid(format!("label {l} does not fit a byte")))?;
        lab.push(b);
    }
    Ok((img, lab))
}

/// Redraws the labels of a uniformly chosen `floor(fraction * N)` subset
/// uniformly from all classes (a redraw may equal the original label).
pub fn scramble_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DatasetError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DatasetError::Invalid(format!("scramble fraction {fraction} outside [0, 1]")));
    }
    let n = ds.len();
    let m = (fraction * n as f64).floor() as usize;
    let mut out = ds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, n, m).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        out.labels[i] = rng.random_range(0..ds.classes);
    }
    out.seed = Some(seed);
    out.scrambled = fraction;
    Ok(out)
}

/// `classes` isotropic unit-variance Gaussian clusters in `dim` dimensions.
///
/// Centers lie at distance `separation` from the origin: on orthogonal axes
/// when `classes <= dim`, otherwise on a circle in the first two coordinates.
/// Samples are interleaved by class.
pub fn synthetic_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset, DatasetError> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return Err(DatasetError::Invalid("blobs need >= 2 classes, >= 1 sample and >= 1 dim".into()));
    }
    if !(separation >= 0.0) {
        return Err(DatasetError::Invalid(format!("separation {separation} must be non-negative")));
    }
    let centers = blob_centers(classes, dim, separation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for (k, c) in centers.iter().enumerate() {
            for &ci in c {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(ci + e);
            }
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

/// Centers used by [`synthetic_blobs`].
pub fn blob_centers(classes: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>, DatasetError> {
    if classes > dim && dim < 2 {
        return Err(DatasetError::Invalid(format!("{classes} classes need at least 2 dimensions")));
    }
    Ok((0..classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            if classes <= dim {
                c[k] = separation;
            } else {
                let a = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                c[0] = separation * a.cos();
                c[1] = separation * a.sin();
            }
            c
        })
        .collect())
}

/// Bayes-optimal accuracy for orthogonal-center blobs (`classes <= dim`):
/// `P(X_0 + s > max_k X_k)` with i.i.d. standard normals, by quadrature.
pub fn blobs_bayes_accuracy(classes: usize, separation: f64) -> f64 {
    // integral phi(x) Phi(x + s)^(K-1) dx on a fine grid
    let (lo, hi, steps) = (-12.0 - separation, 12.0, 24_000);
    let h = (hi - lo) / steps as f64;
    let mut acc = 0.0;
    for i in 0..=steps {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        acc += w * phi * normal_cdf(x + separation).powi(classes as i32 - 1);
    }
    acc * h
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture(n: u32, h: u32, w: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n, h, w] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend((0..n * h * w).map(|i| (i * 37 % 256) as u8));
        let mut lab = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        lab.extend_from_slice(&n.to_be_bytes());
        lab.extend((0..n).map(|i| (i % 10) as u8));
        (img, lab)
    }

    #[test]
    fn idx_round_trip_is_byte_exact() {
        let (img, lab) = fixture(7, 5, 4);
        let ds = parse_idx_pair(&img, &lab, "i", "l").unwrap();
        assert_eq!(ds.images.shape(), &[7, 1, 5, 4]);
        assert!(ds.images.data().iter().all(|p| (0.0..=1.0).contains(p)));
        let (img2, lab2) = write_idx(&ds).unwrap();
        assert_eq!(img, img2);
        assert_eq!(lab, lab2);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let (img, lab) = fixture(3, 2, 2);
        assert!(matches!(parse_idx_pair(&[], &lab, "i", "l"), Err(DatasetError::Truncated { .. })));
        assert!(matches!(
            parse_idx_pair(&img[..img.len() - 1], &lab, "i", "l"),
            Err(DatasetError::Truncated { .. })
        ));
        assert!(matches!(parse_idx_pair(&lab, &img, "i", "l"), Err(DatasetError::BadMagic { .. })));
        let (_, lab4) = fixture(4, 2, 2);
        assert!(matches!(
            parse_idx_pair(&img, &lab4, "i", "l"),
            Err(DatasetError::CountMismatch { images: 3, labels: 4 })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_idx("/nonexistent/a", "/nonexistent/b"), Err(DatasetError::Io { .. })));
    }

    fn blobs() -> Dataset {
        synthetic_blobs(10, 600, 12, 2.0, 1).unwrap()
    }

    #[test]
    fn scramble_zero_is_identity_and_seeded() {
        let ds = blobs();
        assert_eq!(scramble_labels(&ds, 0.0, 5).unwrap().labels, ds.labels);
        let a = scramble_labels(&ds, 0.5, 5).unwrap();
        let b = scramble_labels(&ds, 0.5, 5).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.true_labels, ds.labels);
        assert!(scramble_labels(&ds, 1.5, 0).is_err());
    }

    #[test]
    fn full_scramble_agrees_about_one_in_k() {
        let ds = synthetic_blobs(10, 6000, 10, 1.0, 2).unwrap();
        let s = scramble_labels(&ds, 1.0, 3).unwrap();
        assert!((s.label_agreement() - 0.1).abs() < 0.005, "{}", s.label_agreement());
    }

    #[test]
    fn bayes_accuracy_limits() {
        assert!((blobs_bayes_accuracy(10, 0.0) - 0.1).abs() < 1e-6);
        assert!(blobs_bayes_accuracy(3, 20.0) > 0.999_999);
        // two classes: Phi(s / sqrt 2)
        let s = 1.3;
        assert!((blobs_bayes_accuracy(2, s) - normal_cdf(s / 2f64.sqrt())).abs() < 1e-6);
        assert!((normal_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-6);
    }

    #[test]
    fn nearest_center_matches_bayes_accuracy() {
        let ds = synthetic_blobs(4, 5000, 6, 2.5, 7).unwrap();
        let centers = blob_centers(4, 6, 2.5).unwrap();
        let mut hits = 0;
        for i in 0..ds.len() {
            let x = ds.images.row(i);
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da = crate::tensor::l2_distance(x, &centers[a]);
                    let db = crate::tensor::l2_distance(x, &centers[b]);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            hits += usize::from(best == ds.labels[i]);
        }
        let acc = hits as f64 / ds.len() as f64;
        assert!((acc - blobs_bayes_accuracy(4, 2.5)).abs() < 0.015, "{acc}");
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let ds = blobs().take(100);
        let (rest, held) = ds.split(20, 0).unwrap();
        assert_eq!((rest.len(), held.len()), (80, 20));
        let (_, held2) = ds.split(20, 0).unwrap();
        assert_eq!(held, held2);
    }

    proptest! {
        #[test]
        fn scramble_changes_at_most_the_chosen_subset(frac in 0.0f64..=1.0, seed in 0u64..1000) {
            let ds = synthetic_blobs(3, 40, 3, 1.0, 0).unwrap();
            let s = scramble_labels(&ds, frac, seed).unwrap();
            let changed = s.labels.iter().zip(&ds.labels).filter(|(a, b)| a != b).count();
            prop_assert!(changed <= (frac * ds.len() as f64).floor() as usize);
            prop_assert!(s.labels.iter().all(|&l| l < 3));
        }

        #[test]
        fn batches_cover_every_sample_once(bs in 1usize..50, seed in 0u64..100) {
            let ds = synthetic_blobs(2, 37, 2, 1.0, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut all: Vec<usize> = ds.batches(bs, &mut rng).concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..74).collect::<Vec<_>>());
        }
    }
}
