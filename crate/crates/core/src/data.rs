//! Synthetic Gaussian-mixture datasets, vector-space augmentations and CSV I/O.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Matrix, SeededRng};

/// Samples with integer class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(samples: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::config(
                "data.labels",
                format!("label {bad} outside 0..{num_classes}"),
            ));
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
        })
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }
}

pub const DEFAULT_SEPARATION: f64 = 1.0;

/// Gaussian-mixture benchmark description. Class centers are uniform on the
/// sphere of radius `separation`; samples add isotropic noise `cluster_sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub cluster_sigma: f64,
    pub separation: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_per_class: 500,
            test_per_class: 125,
            dim: 64,
            cluster_sigma: 0.35,
            separation: DEFAULT_SEPARATION,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("data.num_classes", "must be positive"));
        }
        if self.train_per_class == 0 {
            return Err(Error::config("data.train_per_class", "must be positive"));
        }
        if self.dim < 2 {
            return Err(Error::config("data.dim", "must be at least 2"));
        }
        if !(self.cluster_sigma.is_finite() && self.cluster_sigma > 0.0) {
            return Err(Error::config("data.cluster_sigma", "must be > 0"));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::config("data.separation", "must be > 0"));
        }
        Ok(())
    }
}

/// Train/test splits drawn around shared class centers.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub centers: Matrix,
}

fn draw_class_samples(
    centers: &Matrix,
    per_class: usize,
    sigma: f64,
    rng: &SeededRng,
) -> Result<LabeledDataset> {
    let (classes, dim) = centers.shape();
    let mut samples = Matrix::zeros(classes * per_class, dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for j in 0..per_class {
            let idx = c * per_class + j;
            let mut item = rng.fork(idx as u64);
            for (v, &mu) in samples.row_mut(idx).iter_mut().zip(centers.row(c)) {
                *v = mu + sigma * item.normal();
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(samples, labels, classes)
}

impl MixtureConfig {
    pub fn generate(&self, seed: u64) -> Result<MixtureSplit> {
        self.validate()?;
        let root = SeededRng::new(seed);
        let mut center_rng = root.fork(0);
        let mut centers = Matrix::zeros(self.num_classes, self.dim);
        for c in 0..self.num_classes {
            let raw: Vec<f64> = (0..self.dim).map(|_| center_rng.normal()).collect();
            let unit = l2_normalize(&raw)?;
            for (dst, u) in centers.row_mut(c).iter_mut().zip(unit) {
                *dst = u * self.separation;
            }
        }
        let train = draw_class_samples(&centers, self.train_per_class, self.cluster_sigma, &root.fork(1))?;
        let test = draw_class_samples(&centers, self.test_per_class, self.cluster_sigma, &root.fork(2))?;
        Ok(MixtureSplit { train, test, centers })
    }
}

/// Single Gaussian-mixture dataset with unit separation.
pub fn gaussian_mixture(
    num_classes: usize,
    per_class: usize,
    d: usize,
    cluster_sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let cfg = MixtureConfig {
        num_classes,
        train_per_class: per_class,
        test_per_class: 0,
        dim: d,
        cluster_sigma,
        separation: DEFAULT_SEPARATION,
    };
    Ok(cfg.generate(seed)?.train)
}

/// Per-view stochastic transform: random global scale, Gaussian jitter, then
/// independent coordinate dropout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub jitter_sigma: f64,
    pub scale_range: [f64; 2],
    pub dropout_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.2,
            scale_range: [0.8, 1.2],
            dropout_prob: 0.2,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            jitter_sigma: 0.0,
            scale_range: [1.0, 1.0],
            dropout_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0) {
            return Err(Error::config("augment.jitter_sigma", "must be >= 0"));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("augment.scale_range", "need 0 < lo <= hi"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::config("augment.dropout_prob", "must lie in [0, 1)"));
        }
        Ok(())
    }

    fn apply(&self, x: &[f64], rng: &mut SeededRng, out: &mut [f64]) {
        let [lo, hi] = self.scale_range;
        let scale = lo + (hi - lo) * rng.uniform();
        for (o, &v) in out.iter_mut().zip(x) {
            let jitter = if self.jitter_sigma > 0.0 { self.jitter_sigma * rng.normal() } else { 0.0 };
            let keep = self.dropout_prob == 0.0 || rng.uniform() >= self.dropout_prob;
            *o = if keep { scale * v + jitter } else { 0.0 };
        }
    }
}

/// Two independent augmentations of `x`, keyed by `(rng seed, item, view)`.
pub fn two_views(x: &[f64], policy: &AugmentPolicy, rng: &SeededRng, item: u64) -> (Vec<f64>, Vec<f64>) {
    let item_rng = rng.fork(item);
    let mut a = vec![0.0; x.len()];
    let mut b = vec![0.0; x.len()];
    policy.apply(x, &mut item_rng.fork(0), &mut a);
    policy.apply(x, &mut item_rng.fork(1), &mut b);
    (a, b)
}

/// Augments the selected rows of `samples` into two view matrices.
/// Row `j` uses item key `indices[j]`, so the result is independent of batch order.
pub fn augment_batch(
    samples: &Matrix,
    indices: &[usize],
    policy: &AugmentPolicy,
    rng: &SeededRng,
) -> (Matrix, Matrix) {
    let d = samples.cols();
    let mut a = Matrix::zeros(indices.len(), d);
    let mut b = Matrix::zeros(indices.len(), d);
    for (j, &idx) in indices.iter().enumerate() {
        let item_rng = rng.fork(idx as u64);
        policy.apply(samples.row(idx), &mut item_rng.fork(0), a.row_mut(j));
        policy.apply(samples.row(idx), &mut item_rng.fork(1), b.row_mut(j));
    }
    (a, b)
}

/// Shuffled minibatches for one epoch; a trailing partial batch is dropped.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = SeededRng::new(seed).fork(0x5EED_0000 + epoch as u64);
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Reads rows of `features…, label` where the label may be any integer.
pub fn read_labeled_csv(path: &Path, header: bool) -> Result<(Matrix, Vec<i64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() < 2 {
            return Err(parse_err(format!(
                "expected at least one feature and a label, found {} fields",
                record.len()
            )));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(format!("expected {w} fields, found {}", record.len())));
            }
            _ => {}
        }
        let n = record.len();
        for (j, field) in record.iter().take(n - 1).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("column {}: `{field}` is not a number", j + 1)))?;
            data.push(v);
        }
        let label_field = record.get(n - 1).unwrap_or("").trim();
        let label: i64 = label_field
            .parse()
            .map_err(|_| parse_err(format!("label `{label_field}` is not an integer")))?;
        labels.push(label);
    }
    let cols = width.map(|w| w - 1).unwrap_or(0);
    let m = Matrix::from_vec(labels.len(), cols, data)?;
    Ok((m, labels))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Loads a dataset whose last column is a nonnegative class label.
pub fn load_csv(path: &Path, header: bool) -> Result<LabeledDataset> {
    let (samples, raw) = read_labeled_csv(path, header)?;
    let mut labels = Vec::with_capacity(raw.len());
    for (i, &l) in raw.iter().enumerate() {
        if l < 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: (i + 1 + header as usize) as u64,
                message: format!("class label {l} is negative"),
            });
        }
        labels.push(l as usize);
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(samples, labels, num_classes)
}

/// Writes `features…, label` rows with no header. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_labeled_csv(path: &Path, samples: &Matrix, labels: &[i64]) -> Result<()> {
    if samples.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            samples.rows(),
            labels.len()
        )));
    }
    let mut out = String::with_capacity(samples.rows() * (samples.cols() + 1) * 20);
    for (row, label) in samples.row_iter().zip(labels) {
        for v in row {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    if samples.cols() == 0 {
        // row_iter yields nothing for zero-width matrices
        for label in labels {
            out.push_str(&format!("{label}\n"));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
