//! Sources of negative examples: the trainable adversarial bank and the
//! FIFO-queue and in-batch baselines.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::encoder::MlpEncoder;
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativesMode {
    Adversarial,
    Fifo,
    InBatch,
}

impl NegativesMode {
    pub const ALL: [NegativesMode; 3] = [Self::Adversarial, Self::Fifo, Self::InBatch];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Adversarial => "adversarial",
            Self::Fifo => "fifo",
            Self::InBatch => "in_batch",
        }
    }
}

impl std::fmt::Display for NegativesMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NegativesMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adversarial" => Ok(Self::Adversarial),
            "fifo" => Ok(Self::Fifo),
            "in_batch" | "in-batch" => Ok(Self::InBatch),
            other => Err(Error::config("negatives.mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// How an ascent step is turned into a move on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankUpdateMode {
    /// Step along the raw gradient, then renormalize.
    Renormalize,
    /// Drop the radial component `(n·g) n` first, then step and renormalize.
    Tangent,
}

/// Removes the component of each gradient row along the matching bank row.
pub fn project_tangent(bank: &Matrix, grad: &Matrix) -> Result<Matrix> {
    bank.check_same_shape(grad, "tangent projection")?;
    let mut out = grad.clone();
    for r in 0..bank.rows() {
        let n = bank.row(r);
        let radial = dot(out.row(r), n);
        out.row_mut(r).iter_mut().zip(n).for_each(|(g, &nv)| *g -= radial * nv);
    }
    Ok(out)
}

/// Optimizer settings for the bank's ascent step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentStep {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mode: BankUpdateMode,
}

/// `K × d` matrix of unit-norm adversarial negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeBank {
    rows: Matrix,
    velocity: Option<Matrix>,
}

impl NegativeBank {
    /// Normalizes the given rows and wraps them as a bank.
    pub fn from_rows(mut rows: Matrix) -> Result<Self> {
        l2_normalize_rows(&mut rows)?;
        Ok(Self {
            rows,
            velocity: None,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn velocity(&self) -> Option<&Matrix> {
        self.velocity.as_ref()
    }

    /// Projected gradient *ascent*: `n ← normalize(n + lr·v)` with
    /// `v ← momentum·v + grad (+ weight_decay·n)`.
    ///
    /// Returns the number of rows that received a nonzero step. A row whose
    /// step is far below its rounding unit can receive one and still come
    /// out bitwise identical; [`changed_rows`] counts those separately.
    pub fn adversarial_step(&mut self, grad: &Matrix, step: &AscentStep) -> Result<usize> {
        self.rows.check_same_shape(grad, "adversarial step")?;
        grad.ensure_finite("adversary gradient")?;
        let mut g = match step.mode {
            BankUpdateMode::Renormalize => grad.clone(),
            BankUpdateMode::Tangent => project_tangent(&self.rows, grad)?,
        };
        if step.weight_decay != 0.0 {
            // Decay pulls toward the origin, so on the ascent side it enters with a minus sign.
            for (gv, &nv) in g.data_mut().iter_mut().zip(self.rows.data()) {
                *gv -= step.weight_decay * nv;
            }
        }
        let direction = if step.momentum != 0.0 {
            let v = self
                .velocity
                .get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = step.momentum * *vv + gv;
            }
            v.clone()
        } else {
            g
        };
        if step.lr == 0.0 || direction.data().iter().all(|&v| v == 0.0) {
            return Ok(0);
        }
        let updated = direction.row_iter().filter(|r| r.iter().any(|&v| step.lr * v != 0.0)).count();
        for (n, &d) in self.rows.data_mut().iter_mut().zip(direction.data()) {
            *n += step.lr * d;
        }
        l2_normalize_rows(&mut self.rows)?;
        Ok(updated)
    }
}

/// Encodes `k` samples drawn with replacement from `dataset`.
pub fn init_bank_from_encoder(
    dataset: &LabeledDataset,
    encoder: &MlpEncoder,
    k: usize,
    seed: u64,
) -> Result<NegativeBank> {
    if dataset.is_empty() {
        return Err(Error::config("data", "cannot initialize a bank from an empty dataset"));
    }
    let mut rng = SeededRng::new(seed);
    let picks: Vec<usize> = (0..k).map(|_| rng.index(dataset.len())).collect();
    let inputs = dataset.samples().select_rows(&picks);
    let rows = encoder.embed(&inputs)?;
    NegativeBank::from_rows(rows)
}

/// Ring buffer of recent keys, oldest evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct FifoQueue {
    buffer: Matrix,
    len: usize,
    cursor: usize,
}

impl FifoQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            buffer: Matrix::zeros(capacity, dim),
            len: 0,
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.buffer.rows()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity()
    }

    /// Appends `keys`, overwriting the oldest entries once full.
    pub fn push(&mut self, keys: &Matrix) -> Result<()> {
        if keys.rows() > self.capacity() {
            return Err(Error::config(
                "negatives.k",
                format!(
                    "batch of {} keys exceeds queue capacity {}",
                    keys.rows(),
                    self.capacity()
                ),
            ));
        }
        if keys.rows() > 0 && keys.cols() != self.buffer.cols() {
            return Err(Error::Shape(format!(
                "keys have dim {}, queue holds dim {}",
                keys.cols(),
                self.buffer.cols()
            )));
        }
        crate::contrast::check_unit_rows(keys)?;
        for row in keys.row_iter() {
            self.buffer.row_mut(self.cursor).copy_from_slice(row);
            self.cursor = (self.cursor + 1) % self.capacity();
        }
        self.len = (self.len + keys.rows()).min(self.capacity());
        Ok(())
    }

    /// Physical slot contents; unused slots are zero.
    pub fn slots(&self) -> &Matrix {
        &self.buffer
    }

    /// Current contents, oldest first.
    pub fn contents(&self) -> Matrix {
        let start = if self.is_full() { self.cursor } else { 0 };
        let order: Vec<usize> = (0..self.len).map(|i| (start + i) % self.capacity()).collect();
        self.buffer.select_rows(&order)
    }
}

/// Keys other than `query_index`, in batch order.
pub fn in_batch_negatives(keys: &Matrix, query_index: usize) -> Result<Matrix> {
    if keys.rows() < 2 {
        return Err(Error::config(
            "train.batch_size",
            "in-batch negatives need at least two samples",
        ));
    }
    if query_index >= keys.rows() {
        return Err(Error::Shape(format!(
            "query index {query_index} outside batch of {}",
            keys.rows()
        )));
    }
    let others: Vec<usize> = (0..keys.rows()).filter(|&j| j != query_index).collect();
    Ok(keys.select_rows(&others))
}

/// The three negative sources behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum NegativeProvider {
    Adversarial(NegativeBank),
    Fifo(FifoQueue),
    InBatch,
}

impl NegativeProvider {
    pub fn mode(&self) -> NegativesMode {
        match self {
            Self::Adversarial(_) => NegativesMode::Adversarial,
            Self::Fifo(_) => NegativesMode::Fifo,
            Self::InBatch => NegativesMode::InBatch,
        }
    }

    /// Shared negatives for the next loss evaluation; `None` in in-batch mode.
    pub fn negatives(&self) -> Option<Matrix> {
        match self {
            Self::Adversarial(bank) => Some(bank.rows().clone()),
            Self::Fifo(queue) => Some(queue.contents()),
            Self::InBatch => None,
        }
    }

    /// Physical storage used to count changed rows between iterations.
    pub fn storage(&self) -> Option<&Matrix> {
        match self {
            Self::Adversarial(bank) => Some(bank.rows()),
            Self::Fifo(queue) => Some(queue.slots()),
            Self::InBatch => None,
        }
    }

    pub fn bank(&self) -> Option<&NegativeBank> {
        match self {
            Self::Adversarial(bank) => Some(bank),
            _ => None,
        }
    }
}

/// Number of rows that differ (bitwise) between two equally shaped matrices.
pub fn changed_rows(before: &Matrix, after: &Matrix) -> usize {
    before
        .row_iter()
        .zip(after.row_iter())
        .filter(|(a, b)| a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()))
        .count()
}

/// Nearest-query cosine statistics of a set of negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageStats {
    /// For each negative, its largest cosine to any query.
    pub nearest: Vec<f64>,
    pub mean_nn_cosine: f64,
    pub max_nn_cosine: f64,
    /// Negatives whose nearest-query cosine is below the threshold.
    pub outlier_count: usize,
    pub threshold: f64,
}

pub const DEFAULT_OUTLIER_THRESHOLD: f64 = 0.2;

pub fn bank_coverage_stats(negatives: &Matrix, queries: &Matrix, threshold: f64) -> Result<CoverageStats> {
    if negatives.rows() == 0 || queries.rows() == 0 {
        return Err(Error::Shape("coverage needs a nonempty bank and query set".into()));
    }
    let sims = negatives.matmul_t(queries)?;
    let nearest: Vec<f64> = sims
        .row_iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mean_nn_cosine = nearest.iter().sum::<f64>() / nearest.len() as f64;
    let max_nn_cosine = nearest.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let outlier_count = nearest.iter().filter(|&&c| c < threshold).count();
    Ok(CoverageStats {
        nearest,
        mean_nn_cosine,
        max_nn_cosine,
        outlier_count,
        threshold,
    })
}
