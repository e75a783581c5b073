//! Frozen-embedding evaluation: linear probe, cosine kNN, embedding export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_labeled_csv;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix};
use crate::optim::cosine_lr;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Standardize each feature with training-set mean and deviation first.
    pub standardize: bool,
    pub knn_k: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.3,
            standardize: true,
            knn_k: 20,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("probe.epochs", "must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("probe.lr", "must be > 0"));
        }
        if self.knn_k == 0 {
            return Err(Error::config("probe.knn_k", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub top1_accuracy: f64,
    /// Accuracy per class; 0 for classes with no test points.
    pub per_class_accuracy: Vec<f64>,
    pub per_class_count: Vec<usize>,
    pub train_count: usize,
    pub test_count: usize,
    /// Mean training cross-entropy before each epoch's update, plus the final value.
    pub loss_history: Vec<f64>,
}

struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Matrix) -> Self {
        let (n, d) = x.shape();
        let mut mean = vec![0.0; d];
        for row in x.row_iter() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; d];
        for row in x.row_iter() {
            var.iter_mut()
                .zip(row)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n as f64);
        }
        let inv_std = var.iter().map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Self { mean, inv_std }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }
}

/// Row-wise softmax of `x·W + b` in place of `logits`; returns mean cross-entropy.
fn softmax_xent(x: &Matrix, w: &Matrix, b: &[f64], labels: &[usize], probs: &mut Matrix) -> Result<f64> {
    *probs = x.matmul(w)?;
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = probs.row_mut(r);
        row.iter_mut().zip(b).for_each(|(l, bb)| *l += bb);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[y];
        row.iter_mut().for_each(|l| *l = (*l - log_z).exp());
    }
    Ok(loss / labels.len() as f64)
}

/// Multinomial logistic regression by full-batch gradient descent with a
/// cosine-decayed learning rate, evaluated by top-1 accuracy on the test set.
pub fn linear_probe(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    config.validate()?;
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(Error::Shape("embedding and label counts differ".into()));
    }
    if train_x.cols() != test_x.cols() {
        return Err(Error::Shape(format!(
            "train dim {} vs test dim {}",
            train_x.cols(),
            test_x.cols()
        )));
    }
    if train_y.is_empty() {
        return Err(Error::config("probe", "empty training set"));
    }
    let classes = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
    let mut train_counts = vec![0usize; classes];
    train_y.iter().for_each(|&y| train_counts[y] += 1);
    if let Some(c) = train_counts.iter().position(|&n| n == 0) {
        return Err(Error::config("probe", format!("class {c} has no training samples")));
    }

    let (x, xt) = if config.standardize {
        let s = Standardizer::fit(train_x);
        (s.apply(train_x), s.apply(test_x))
    } else {
        (train_x.clone(), test_x.clone())
    };
    let (n, d) = x.shape();
    let mut w = Matrix::zeros(d, classes);
    let mut b = vec![0.0; classes];
    let mut probs = Matrix::zeros(n, classes);
    let mut loss_history = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let loss = softmax_xent(&x, &w, &b, train_y, &mut probs)?;
        loss_history.push(loss);
        for (r, &y) in train_y.iter().enumerate() {
            probs.row_mut(r)[y] -= 1.0;
        }
        probs.scale(1.0 / n as f64);
        let gw = x.t_matmul(&probs)?;
        let mut gb = vec![0.0; classes];
        for row in probs.row_iter() {
            gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
        }
        let lr = cosine_lr(epoch, config.epochs, config.lr)?;
        w.data_mut().iter_mut().zip(gw.data()).for_each(|(p, g)| *p -= lr * g);
        b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= lr * g);
    }
    loss_history.push(softmax_xent(&x, &w, &b, train_y, &mut probs)?);
    if !w.is_finite() {
        return Err(Error::Numeric("probe weights diverged".into()));
    }

    let scores = xt.matmul(&w)?;
    let mut per_class_count = vec![0usize; classes];
    let mut per_class_correct = vec![0usize; classes];
    for (r, &y) in test_y.iter().enumerate() {
        let row = scores.row(r);
        let pred = argmax(
            &row.iter().zip(&b).map(|(s, bb)| s + bb).collect::<Vec<_>>(),
        );
        per_class_count[y] += 1;
        if pred == y {
            per_class_correct[y] += 1;
        }
    }
    let correct: usize = per_class_correct.iter().sum();
    let per_class_accuracy = per_class_correct
        .iter()
        .zip(&per_class_count)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    Ok(ProbeResult {
        top1_accuracy: if test_y.is_empty() { 0.0 } else { correct as f64 / test_y.len() as f64 },
        per_class_accuracy,
        per_class_count,
        train_count: n,
        test_count: test_y.len(),
        loss_history,
    })
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Cosine-similarity kNN with majority vote.
///
/// Neighbors are ranked by similarity, equal similarities by lower training
/// index; vote ties go to the smallest class index.
pub fn knn_accuracy(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 || k > train_y.len() {
        return Err(Error::config(
            "probe.knn_k",
            format!("k = {k} must lie in 1..={}", train_y.len()),
        ));
    }
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(Error::Shape("embedding and label counts differ".into()));
    }
    if test_y.is_empty() {
        return Ok(0.0);
    }
    let classes = train_y.iter().max().map_or(0, |m| m + 1);
    let train_norms: Vec<f64> = train_x.row_iter().map(norm).collect();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(train_y.len());
    let mut correct = 0usize;
    for (t, &y) in test_y.iter().enumerate() {
        let q = test_x.row(t);
        let qn = norm(q);
        order.clear();
        order.extend(
            train_x
                .row_iter()
                .zip(&train_norms)
                .enumerate()
                .map(|(j, (row, n))| (dot(q, row) / (qn * n), j)),
        );
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        for &(_, j) in order.iter().take(k) {
            votes[train_y[j]] += 1;
        }
        let mut pred = 0;
        for c in 1..classes {
            if votes[c] > votes[pred] {
                pred = c;
            }
        }
        if pred == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_y.len() as f64)
}

/// Writes embeddings as CSV rows `features…, label`. Bank rows use label −1.
pub fn export_embeddings(embeddings: &Matrix, labels: &[i64], path: &Path) -> Result<()> {
    write_labeled_csv(path, embeddings, labels)
}

pub const BANK_LABEL: i64 = -1;
