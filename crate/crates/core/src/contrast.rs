//! Contrastive losses and their closed-form gradients.
//!
//! All functions take ℓ2-normalized rows. For query `q_i` with positive key
//! `k_i` and negatives `n_1..n_K` the loss is
//!
//! ```text
//! L = -(1/N) Σ_i log( exp(q_i·k_i/τ) / (exp(q_i·k_i/τ) + Σ_k exp(q_i·n_k/τ)) )
//! ```
//!
//! and `p(k_i|q_i)`, `p(n_k|q_i)` are the softmax weights inside the log.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_temperature, logsumexp, norm, Matrix};

/// Rows whose norm is further than this from 1 are rejected.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Temperature of the encoder loss.
    pub tau_net: f64,
    /// Temperature used when computing the adversary gradient.
    pub tau_adv: f64,
    /// Average the loss over both view orderings.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_net: 0.12,
            tau_adv: 0.02,
            symmetric: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_net.is_finite() && self.tau_net > 0.0) {
            return Err(Error::config("loss.tau_net", format!("must be > 0, got {}", self.tau_net)));
        }
        if !(self.tau_adv.is_finite() && self.tau_adv > 0.0) {
            return Err(Error::config("loss.tau_adv", format!("must be > 0, got {}", self.tau_adv)));
        }
        Ok(())
    }
}

/// Loss value with the assignment probabilities it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastResult {
    pub loss: f64,
    /// `p(k_i|q_i)` per query.
    pub pos_prob: Vec<f64>,
    /// `N × K` matrix of `p(n_k|q_i)`.
    pub neg_prob: Matrix,
    pub tau: f64,
}

impl ContrastResult {
    pub fn num_queries(&self) -> usize {
        self.pos_prob.len()
    }

    /// Largest `|p(k_i|q_i) + Σ_k p(n_k|q_i) - 1|` over all queries.
    pub fn closure_error(&self) -> f64 {
        (0..self.num_queries())
            .map(|i| (self.pos_prob[i] + self.neg_prob.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn check_unit_rows(m: &Matrix) -> Result<()> {
    for (r, row) in m.row_iter().enumerate() {
        let n = norm(row);
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::Normalization { row: r, norm: n });
        }
    }
    Ok(())
}

fn check_inputs(queries: &Matrix, keys: &Matrix, negatives: &Matrix) -> Result<()> {
    if queries.rows() != keys.rows() {
        return Err(Error::Shape(format!(
            "{} queries but {} keys",
            queries.rows(),
            keys.rows()
        )));
    }
    if queries.cols() != keys.cols() {
        return Err(Error::Shape(format!(
            "queries have dim {}, keys dim {}",
            queries.cols(),
            keys.cols()
        )));
    }
    if negatives.rows() > 0 && negatives.cols() != queries.cols() {
        return Err(Error::Shape(format!(
            "negatives have dim {}, queries dim {}",
            negatives.cols(),
            queries.cols()
        )));
    }
    check_unit_rows(queries)?;
    check_unit_rows(keys)?;
    check_unit_rows(negatives)
}

/// Softmax over `[pos, negs…]` for one query, given raw logits already divided by τ.
/// Returns `(−log p_pos, p_pos)` and overwrites `negs` with probabilities.
fn assign_row(pos: f64, negs: &mut [f64]) -> (f64, f64) {
    let max = negs.iter().copied().fold(pos, f64::max);
    let z = (pos - max).exp() + negs.iter().map(|l| (l - max).exp()).sum::<f64>();
    let log_z = max + z.ln();
    negs.iter_mut().for_each(|l| *l = (*l - log_z).exp());
    (log_z - pos, (pos - log_z).exp())
}

/// InfoNCE loss of `queries` against their aligned `keys` and a shared set of negatives.
///
/// An empty negative set is allowed and gives zero loss.
pub fn info_nce(queries: &Matrix, keys: &Matrix, negatives: &Matrix, tau: f64) -> Result<ContrastResult> {
    check_inputs(queries, keys, negatives)?;
    info_nce_unchecked(queries, keys, negatives, tau)
}

/// [`info_nce`] without the unit-norm check, so the loss can be evaluated
/// off the sphere (finite-difference probes, pre-normalization updates).
pub fn info_nce_unchecked(
    queries: &Matrix,
    keys: &Matrix,
    negatives: &Matrix,
    tau: f64,
) -> Result<ContrastResult> {
    check_temperature(tau)?;
    if queries.shape() != keys.shape() {
        return Err(Error::Shape(format!(
            "queries {:?} vs keys {:?}",
            queries.shape(),
            keys.shape()
        )));
    }
    if negatives.rows() > 0 && negatives.cols() != queries.cols() {
        return Err(Error::Shape(format!(
            "negatives have dim {}, queries dim {}",
            negatives.cols(),
            queries.cols()
        )));
    }
    let n = queries.rows();
    let neg_cols = if negatives.rows() == 0 {
        Matrix::zeros(0, queries.cols())
    } else {
        negatives.clone()
    };
    let mut probs = queries.matmul_t(&neg_cols)?;
    probs.scale(1.0 / tau);
    let mut pos_prob = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let pos = crate::numerics::dot(queries.row(i), keys.row(i)) / tau;
        let (nll, p) = assign_row(pos, probs.row_mut(i));
        total += nll;
        pos_prob.push(p);
    }
    let loss = if n == 0 { 0.0 } else { total / n as f64 };
    Ok(ContrastResult {
        loss,
        pos_prob,
        neg_prob: probs,
        tau,
    })
}

/// InfoNCE where each query's negatives are the other keys of the batch.
///
/// `neg_prob` is `N × N` with a zero diagonal; column `j` holds `p(k_j|q_i)`.
pub fn info_nce_in_batch(queries: &Matrix, keys: &Matrix, tau: f64) -> Result<ContrastResult> {
    check_temperature(tau)?;
    check_inputs(queries, keys, &Matrix::zeros(0, 0))?;
    let n = queries.rows();
    if n < 2 {
        return Err(Error::config(
            "train.batch_size",
            "in-batch negatives need at least two samples",
        ));
    }
    let mut logits = queries.matmul_t(keys)?;
    logits.scale(1.0 / tau);
    let mut pos_prob = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row_mut(i);
        let pos = row[i];
        let log_z = logsumexp(row);
        row.iter_mut().for_each(|l| *l = (*l - log_z).exp());
        row[i] = 0.0;
        total += log_z - pos;
        pos_prob.push((pos - log_z).exp());
    }
    Ok(ContrastResult {
        loss: total / n as f64,
        pos_prob,
        neg_prob: logits,
        tau,
    })
}

/// `∂L/∂n_k = (1/(Nτ)) Σ_i p(n_k|q_i) q_i`, one row per negative.
pub fn adversary_grad(result: &ContrastResult, queries: &Matrix) -> Result<Matrix> {
    if result.neg_prob.rows() != queries.rows() {
        return Err(Error::Shape(format!(
            "result covers {} queries, got {}",
            result.neg_prob.rows(),
            queries.rows()
        )));
    }
    let n = queries.rows();
    let mut g = result.neg_prob.t_matmul(queries)?;
    if n > 0 {
        g.scale(1.0 / (n as f64 * result.tau));
    }
    Ok(g)
}

/// Gradients of the loss with respect to the queries and the keys.
///
/// ```text
/// ∂L/∂q_i = (1/(Nτ)) [ (p(k_i|q_i) - 1) k_i + Σ_k p(n_k|q_i) n_k ]
/// ∂L/∂k_i = (1/(Nτ)) (p(k_i|q_i) - 1) q_i
/// ```
pub fn query_grad(
    result: &ContrastResult,
    queries: &Matrix,
    keys: &Matrix,
    negatives: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let n = queries.rows();
    if keys.shape() != queries.shape() || result.num_queries() != n {
        return Err(Error::Shape("queries, keys and result disagree".into()));
    }
    if result.neg_prob.cols() != negatives.rows() {
        return Err(Error::Shape(format!(
            "result has {} negatives, got {}",
            result.neg_prob.cols(),
            negatives.rows()
        )));
    }
    let mut gq = if negatives.rows() == 0 {
        Matrix::zeros(n, queries.cols())
    } else {
        result.neg_prob.matmul(negatives)?
    };
    let mut gk = Matrix::zeros(n, queries.cols());
    let scale = 1.0 / (n as f64 * result.tau);
    for i in 0..n {
        let c = result.pos_prob[i] - 1.0;
        let (q, k) = (queries.row(i), keys.row(i));
        for ((g, &kv), (gkv, &qv)) in gq.row_mut(i).iter_mut().zip(k).zip(gk.row_mut(i).iter_mut().zip(q)) {
            *g = (*g + c * kv) * scale;
            *gkv = c * qv * scale;
        }
    }
    Ok((gq, gk))
}

/// Gradients of [`info_nce_in_batch`] with respect to queries and keys.
/// Key `j` collects its positive term and its appearances as a negative.
pub fn in_batch_grad(result: &ContrastResult, queries: &Matrix, keys: &Matrix) -> Result<(Matrix, Matrix)> {
    let n = queries.rows();
    if keys.shape() != queries.shape() || result.neg_prob.shape() != (n, n) {
        return Err(Error::Shape("in-batch result does not match inputs".into()));
    }
    // Full softmax matrix with the positive back on the diagonal, minus the target.
    let mut weights = result.neg_prob.clone();
    for i in 0..n {
        weights.set(i, i, result.pos_prob[i] - 1.0);
    }
    let scale = 1.0 / (n as f64 * result.tau);
    let mut gq = weights.matmul(keys)?;
    gq.scale(scale);
    let mut gk = weights.t_matmul(queries)?;
    gk.scale(scale);
    Ok((gq, gk))
}

/// The alternative adversarial objective `J = τ Σ_k log Σ_i exp(q_i·n_k/τ)`
/// with the column-normalized probabilities `p(q_i|n_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AltLoss {
    pub value: f64,
    /// `N × K`; each column sums to one.
    pub probs: Matrix,
}

pub fn alt_loss_j(queries: &Matrix, negatives: &Matrix, tau: f64) -> Result<AltLoss> {
    check_unit_rows(queries)?;
    check_unit_rows(negatives)?;
    alt_loss_j_unchecked(queries, negatives, tau)
}

/// [`alt_loss_j`] without the unit-norm check.
pub fn alt_loss_j_unchecked(queries: &Matrix, negatives: &Matrix, tau: f64) -> Result<AltLoss> {
    check_temperature(tau)?;
    if queries.rows() == 0 {
        return Err(Error::Shape("alternative loss needs at least one query".into()));
    }
    if negatives.rows() > 0 && negatives.cols() != queries.cols() {
        return Err(Error::Shape(format!(
            "negatives have dim {}, queries dim {}",
            negatives.cols(),
            queries.cols()
        )));
    }
    // K × N so each negative's softmax runs over a contiguous row.
    let mut logits = negatives.matmul_t(queries)?;
    logits.scale(1.0 / tau);
    let mut value = 0.0;
    for k in 0..logits.rows() {
        let row = logits.row_mut(k);
        let lse = logsumexp(row);
        value += tau * lse;
        row.iter_mut().for_each(|l| *l = (*l - lse).exp());
    }
    Ok(AltLoss {
        value,
        probs: logits.transpose(),
    })
}

/// `∂J/∂n_k = Σ_i p(q_i|n_k) q_i`, the conditional expectation of the queries.
pub fn alt_loss_grad(probs: &Matrix, queries: &Matrix) -> Result<Matrix> {
    if probs.rows() != queries.rows() {
        return Err(Error::Shape(format!(
            "probabilities cover {} queries, got {}",
            probs.rows(),
            queries.rows()
        )));
    }
    for k in 0..probs.cols() {
        let sum: f64 = (0..probs.rows()).map(|i| probs.get(i, k)).sum();
        if !((sum - 1.0).abs() <= 1e-9) {
            return Err(Error::Probability { column: k, sum });
        }
    }
    probs.t_matmul(queries)
}

/// Loss averaged over both view orderings, with the matching gradients.
#[derive(Debug, Clone)]
pub struct SymmetricResult {
    pub loss: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
    pub grad_negatives: Matrix,
    /// `a` as queries, `b` as keys.
    pub forward: ContrastResult,
    /// `b` as queries, `a` as keys.
    pub backward: ContrastResult,
}

pub fn symmetric_loss(a: &Matrix, b: &Matrix, negatives: &Matrix, tau: f64) -> Result<SymmetricResult> {
    let forward = info_nce(a, b, negatives, tau)?;
    let backward = info_nce(b, a, negatives, tau)?;
    let (ga_q, gb_k) = query_grad(&forward, a, b, negatives)?;
    let (gb_q, ga_k) = query_grad(&backward, b, a, negatives)?;
    let mut grad_a = ga_q;
    grad_a.add_assign(&ga_k)?;
    grad_a.scale(0.5);
    let mut grad_b = gb_q;
    grad_b.add_assign(&gb_k)?;
    grad_b.scale(0.5);
    let mut grad_negatives = adversary_grad(&forward, a)?;
    grad_negatives.add_assign(&adversary_grad(&backward, b)?)?;
    grad_negatives.scale(0.5);
    Ok(SymmetricResult {
        loss: 0.5 * (forward.loss + backward.loss),
        grad_a,
        grad_b,
        grad_negatives,
        forward,
        backward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, l2_normalize, SeededRng};

    pub(crate) fn unit_rows(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
        crate::numerics::random_unit_rows(rng, rows, cols)
    }

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    /// Naive term-by-term evaluation without any stabilization.
    fn brute_force_loss(q: &Matrix, k: &Matrix, negs: &Matrix, tau: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..q.rows() {
            let mut pos = 0.0;
            for c in 0..q.cols() {
                pos += q.get(i, c) * k.get(i, c);
            }
            let num = (pos / tau).exp();
            let mut den = num;
            for kk in 0..negs.rows() {
                let mut s = 0.0;
                for c in 0..q.cols() {
                    s += q.get(i, c) * negs.get(kk, c);
                }
                den += (s / tau).exp();
            }
            total += -(num / den).ln();
        }
        total / q.rows() as f64
    }

    #[test]
    fn closed_form_single_pair() {
        let q = Matrix::from_rows(&[e(0, 2)], 2).unwrap();
        let n = Matrix::from_rows(&[e(1, 2)], 2).unwrap();
        let r = info_nce(&q, &q, &n, 1.0).unwrap();
        assert!((r.loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((r.loss - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn empty_bank_gives_zero_loss() {
        let mut rng = SeededRng::new(1);
        let q = unit_rows(&mut rng, 3, 4);
        let k = unit_rows(&mut rng, 3, 4);
        let r = info_nce(&q, &k, &Matrix::zeros(0, 4), 0.5).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.pos_prob.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = SeededRng::new(2);
        let q = unit_rows(&mut rng, 4, 6);
        let k = unit_rows(&mut rng, 4, 6);
        let n = unit_rows(&mut rng, 8, 6);
        for tau in [0.12, 0.5, 1.0] {
            let r = info_nce(&q, &k, &n, tau).unwrap();
            assert!((r.loss - brute_force_loss(&q, &k, &n, tau)).abs() < 1e-12);
        }
    }

    #[test]
    fn input_validation() {
        let mut rng = SeededRng::new(3);
        let q = unit_rows(&mut rng, 3, 4);
        let k = unit_rows(&mut rng, 2, 4);
        let n = unit_rows(&mut rng, 5, 4);
        assert!(matches!(info_nce(&q, &k, &n, 0.1), Err(Error::Shape(_))));
        let mut bad = q.clone();
        bad.row_mut(1)[0] += 0.01;
        assert!(matches!(
            info_nce(&bad, &q, &n, 0.1),
            Err(Error::Normalization { row: 1, .. })
        ));
        assert!(matches!(info_nce(&q, &q, &n, 0.0), Err(Error::InvalidTemperature(_))));
    }

    #[test]
    fn adversary_grad_two_dimensional_example() {
        let q = Matrix::from_rows(&[e(0, 3)], 3).unwrap();
        let k = Matrix::from_rows(&[e(1, 3)], 3).unwrap();
        let n = Matrix::from_rows(&[e(0, 3)], 3).unwrap();
        let r = info_nce(&q, &k, &n, 1.0).unwrap();
        let expect = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((r.neg_prob.get(0, 0) - expect).abs() < 1e-15);
        let g = adversary_grad(&r, &q).unwrap();
        assert!((g.get(0, 0) - expect).abs() < 1e-15);
        assert!((g.get(0, 0) - 0.73106).abs() < 1e-5);
        assert_eq!(&g.row(0)[1..], &[0.0, 0.0]);

        let fd = finite_diff_grad(
            |x| {
                let probe = Matrix::from_vec(1, 3, x.to_vec()).unwrap();
                info_nce_unchecked(&q, &k, &probe, 1.0).unwrap().loss
            },
            n.row(0),
            1e-5,
        )
        .unwrap();
        for (a, b) in g.row(0).iter().zip(&fd) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn adversary_grad_row_norm_bound() {
        let mut rng = SeededRng::new(4);
        let q = unit_rows(&mut rng, 6, 5);
        let k = unit_rows(&mut rng, 6, 5);
        let n = unit_rows(&mut rng, 9, 5);
        let tau = 0.2;
        let r = info_nce(&q, &k, &n, tau).unwrap();
        let g = adversary_grad(&r, &q).unwrap();
        for kk in 0..9 {
            let bound: f64 = (0..6).map(|i| r.neg_prob.get(i, kk)).sum::<f64>() / (6.0 * tau);
            assert!(norm(g.row(kk)) <= bound + 1e-12);
        }
    }

    #[test]
    fn confident_queries_have_vanishing_grads() {
        let q = Matrix::from_rows(&[e(0, 3), e(1, 3)], 3).unwrap();
        let n = Matrix::from_rows(&[e(2, 3)], 3).unwrap();
        let r = info_nce(&q, &q, &n, 0.01).unwrap();
        let (gq, gk) = query_grad(&r, &q, &q, &n).unwrap();
        assert!(gq.data().iter().chain(gk.data()).all(|v| v.abs() < 1e-40));
    }

    #[test]
    fn key_grad_is_antiparallel_to_query() {
        let mut rng = SeededRng::new(5);
        let q = unit_rows(&mut rng, 4, 6);
        let k = unit_rows(&mut rng, 4, 6);
        let n = unit_rows(&mut rng, 7, 6);
        let tau = 0.3;
        let r = info_nce(&q, &k, &n, tau).unwrap();
        let (_, gk) = query_grad(&r, &q, &k, &n).unwrap();
        for i in 0..4 {
            let mag = (1.0 - r.pos_prob[i]) / (4.0 * tau);
            assert!((norm(gk.row(i)) - mag).abs() < 1e-12);
            let cos = crate::numerics::dot(gk.row(i), q.row(i)) / norm(gk.row(i));
            assert!((cos + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn in_batch_matches_per_query_evaluation() {
        let mut rng = SeededRng::new(6);
        let q = unit_rows(&mut rng, 5, 4);
        let k = unit_rows(&mut rng, 5, 4);
        let tau = 0.4;
        let r = info_nce_in_batch(&q, &k, tau).unwrap();
        let mut total = 0.0;
        for i in 0..5 {
            let others: Vec<usize> = (0..5).filter(|&j| j != i).collect();
            let negs = k.select_rows(&others);
            let single = info_nce(
                &q.select_rows(&[i]),
                &k.select_rows(&[i]),
                &negs,
                tau,
            )
            .unwrap();
            total += single.loss;
            assert!((single.pos_prob[0] - r.pos_prob[i]).abs() < 1e-14);
        }
        assert!((total / 5.0 - r.loss).abs() < 1e-13);
        assert!(r.closure_error() < 1e-12);
        assert!(info_nce_in_batch(&q.select_rows(&[0]), &k.select_rows(&[0]), tau).is_err());
    }

    #[test]
    fn alt_loss_degenerate_cases() {
        let mut rng = SeededRng::new(7);
        let q = unit_rows(&mut rng, 1, 4);
        let n = unit_rows(&mut rng, 3, 4);
        let alt = alt_loss_j(&q, &n, 0.1).unwrap();
        assert!(alt.probs.data().iter().all(|&p| (p - 1.0).abs() < 1e-15));
        let expect: f64 = (0..3).map(|k| crate::numerics::dot(q.row(0), n.row(k))).sum();
        assert!((alt.value - expect).abs() < 1e-12);

        // Every query at the same angle to every negative.
        let qs = Matrix::from_rows(&[e(0, 3), e(1, 3)], 3).unwrap();
        let ns = Matrix::from_rows(&[e(2, 3), l2_normalize(&[0.0, 0.0, -1.0]).unwrap()], 3).unwrap();
        let alt = alt_loss_j(&qs, &ns, 0.05).unwrap();
        assert!(alt.probs.data().iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn alt_grad_special_cases() {
        let mut rng = SeededRng::new(8);
        let q = unit_rows(&mut rng, 3, 4);
        let mut onehot = Matrix::zeros(3, 2);
        onehot.set(2, 0, 1.0);
        onehot.set(0, 1, 1.0);
        let g = alt_loss_grad(&onehot, &q).unwrap();
        assert_eq!(g.row(0), q.row(2));
        assert_eq!(g.row(1), q.row(0));

        let uniform = Matrix::from_vec(3, 1, vec![1.0 / 3.0; 3]).unwrap();
        let g = alt_loss_grad(&uniform, &q).unwrap();
        for c in 0..4 {
            let mean = (q.get(0, c) + q.get(1, c) + q.get(2, c)) / 3.0;
            assert!((g.get(0, c) - mean).abs() < 1e-15);
        }

        let bad = Matrix::from_vec(3, 1, vec![0.5, 0.5, 0.5]).unwrap();
        assert!(matches!(
            alt_loss_grad(&bad, &q),
            Err(Error::Probability { column: 0, .. })
        ));
    }

    #[test]
    fn symmetric_identities() {
        let mut rng = SeededRng::new(9);
        let a = unit_rows(&mut rng, 5, 4);
        let b = unit_rows(&mut rng, 5, 4);
        let n = unit_rows(&mut rng, 6, 4);
        let tau = 0.2;

        let same = symmetric_loss(&a, &a, &n, tau).unwrap();
        assert_eq!(same.loss, info_nce(&a, &a, &n, tau).unwrap().loss);

        let ab = symmetric_loss(&a, &b, &n, tau).unwrap();
        let ba = symmetric_loss(&b, &a, &n, tau).unwrap();
        assert_eq!(ab.loss.to_bits(), ba.loss.to_bits());
        assert_eq!(ab.grad_a, ba.grad_b);

        let mean = 0.5 * (brute_force_loss(&a, &b, &n, tau) + brute_force_loss(&b, &a, &n, tau));
        assert!((ab.loss - mean).abs() < 1e-12);
    }

    #[test]
    fn lower_temperature_sharpens() {
        let mut rng = SeededRng::new(10);
        let q = unit_rows(&mut rng, 4, 5);
        let k = unit_rows(&mut rng, 4, 5);
        let n = unit_rows(&mut rng, 10, 5);
        let mut prev = vec![0.0; 4];
        for tau in [2.0, 1.0, 0.5, 0.2, 0.12, 0.05, 0.02] {
            let r = info_nce(&q, &k, &n, tau).unwrap();
            for i in 0..4 {
                // Sharpening is only guaranteed for the top logit of the full row.
                let top = r.neg_prob.row(i).iter().copied().fold(r.pos_prob[i], f64::max);
                assert!(top >= prev[i] - 1e-15);
                prev[i] = top;
            }
        }
    }

    #[test]
    fn negative_that_leads_the_row_only_gets_sharper() {
        // q·n = 0.9 beats q·k = 0.5: p(n|q) rises monotonically as τ falls.
        let q = Matrix::from_rows(&[e(0, 3)], 3).unwrap();
        let k = Matrix::from_rows(&[l2_normalize(&[0.5, 0.75f64.sqrt(), 0.0]).unwrap()], 3).unwrap();
        let n = Matrix::from_rows(
            &[
                l2_normalize(&[0.9, 0.0, 0.19f64.sqrt()]).unwrap(),
                l2_normalize(&[0.0, 0.0, 1.0]).unwrap(),
            ],
            3,
        )
        .unwrap();
        let mut prev = 0.0;
        for tau in [2.0, 1.0, 0.5, 0.12, 0.02] {
            let p = info_nce(&q, &k, &n, tau).unwrap().neg_prob.get(0, 0);
            assert!(p >= prev);
            prev = p;
        }
    }
}
