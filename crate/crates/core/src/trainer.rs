//! The alternating loop: one encoder descent step, then one update of the
//! negative source, per minibatch.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, ScheduleUnit};
use crate::contrast::{
    adversary_grad, in_batch_grad, info_nce, info_nce_in_batch, query_grad, symmetric_loss,
};
use crate::data::{augment_batch, epoch_batches, LabeledDataset};
use crate::encoder::MlpEncoder;
use crate::error::{Error, Result};
use crate::eval::{knn_accuracy, linear_probe, ProbeResult};
use crate::negatives::{
    bank_coverage_stats, changed_rows, init_bank_from_encoder, AscentStep, CoverageStats, FifoQueue,
    NegativeProvider, NegativesMode,
};
use crate::numerics::{Matrix, SeededRng};
use crate::optim::{cosine_lr, SgdState};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.ckpt";
pub const PARTIAL_CHECKPOINT: &str = "checkpoint_partial.ckpt";
pub const ABORT_FILE: &str = "abort.txt";

/// One minibatch: rows of `samples` picked by `indices`, augmented with `augment`.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub samples: &'a Matrix,
    pub indices: &'a [usize],
    pub augment: &'a SeededRng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRates {
    pub lr_net: f64,
    pub lr_adv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Rows of the negative storage that differ bitwise after the step.
    pub rows_changed: usize,
    /// Rows the step wrote to: bank rows given a nonzero ascent step, or queue slots filled.
    pub rows_updated: usize,
    /// Coverage of the post-step negatives by this batch's queries.
    pub coverage: Option<CoverageStats>,
}

/// Encoder loss at `tau` with gradients for both views.
fn encoder_loss(
    a: &Matrix,
    b: &Matrix,
    negatives: Option<&Matrix>,
    tau: f64,
    symmetric: bool,
) -> Result<(f64, Matrix, Matrix)> {
    match (negatives, symmetric) {
        (Some(negs), false) => {
            let r = info_nce(a, b, negs, tau)?;
            let (ga, gb) = query_grad(&r, a, b, negs)?;
            Ok((r.loss, ga, gb))
        }
        (Some(negs), true) => {
            let s = symmetric_loss(a, b, negs, tau)?;
            Ok((s.loss, s.grad_a, s.grad_b))
        }
        (None, false) => {
            let r = info_nce_in_batch(a, b, tau)?;
            let (ga, gb) = in_batch_grad(&r, a, b)?;
            Ok((r.loss, ga, gb))
        }
        (None, true) => {
            let fwd = info_nce_in_batch(a, b, tau)?;
            let bwd = info_nce_in_batch(b, a, tau)?;
            let (mut ga, mut gb) = in_batch_grad(&fwd, a, b)?;
            let (gb2, ga2) = in_batch_grad(&bwd, b, a)?;
            ga.add_assign(&ga2)?;
            gb.add_assign(&gb2)?;
            ga.scale(0.5);
            gb.scale(0.5);
            Ok((0.5 * (fwd.loss + bwd.loss), ga, gb))
        }
    }
}

/// One iteration:
/// augment, forward both views, descend the encoder at `tau_net`, then
/// recompute assignments at `tau_adv` and update the negative source.
pub fn train_step(
    encoder: &mut MlpEncoder,
    provider: &mut NegativeProvider,
    optimizer: &mut SgdState,
    batch: Batch<'_>,
    config: &ExperimentConfig,
    rates: StepRates,
) -> Result<StepOutcome> {
    let (xa, xb) = augment_batch(batch.samples, batch.indices, &config.augment, batch.augment);
    let (qa, tape_a) = encoder.forward(&xa)?;
    let (kb, tape_b) = encoder.forward(&xb)?;

    let negatives = provider.negatives();
    let (loss, ga, gb) = encoder_loss(&qa, &kb, negatives.as_ref(), config.loss.tau_net, config.loss.symmetric)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    let mut grads = encoder.backward(&tape_a, &ga)?;
    if !config.model.stop_gradient_key {
        grads.add_assign(&encoder.backward(&tape_b, &gb)?)?;
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("encoder gradient".into()));
    }
    optimizer.step(&mut encoder.params_mut(), &grads.slices(), rates.lr_net)?;

    let (qa, kb) = if config.negatives.refresh_embeddings {
        (encoder.embed(&xa)?, encoder.embed(&xb)?)
    } else {
        (qa, kb)
    };

    let before = provider.storage().cloned();
    let rows_updated = match provider {
        NegativeProvider::Adversarial(bank) => {
            let tau = config.loss.tau_adv;
            let grad = if config.loss.symmetric {
                symmetric_loss(&qa, &kb, bank.rows(), tau)?.grad_negatives
            } else {
                adversary_grad(&info_nce(&qa, &kb, bank.rows(), tau)?, &qa)?
            };
            let adv = &config.optim.adv;
            let updated = bank.adversarial_step(
                &grad,
                &AscentStep {
                    lr: rates.lr_adv,
                    momentum: adv.momentum,
                    weight_decay: adv.weight_decay,
                    mode: config.negatives.update,
                },
            )?;
            for (row, norm) in bank.rows().row_norms().into_iter().enumerate() {
                if (norm - 1.0).abs() > 1e-12 {
                    return Err(Error::Normalization { row, norm });
                }
            }
            updated
        }
        NegativeProvider::Fifo(queue) => {
            queue.push(&kb)?;
            kb.rows()
        }
        NegativeProvider::InBatch => 0,
    };
    let rows_changed = match (&before, provider.storage()) {
        (Some(b), Some(a)) => changed_rows(b, a),
        _ => 0,
    };

    let threshold = config.negatives.outlier_threshold;
    let coverage = match provider.negatives() {
        Some(negs) if negs.rows() > 0 => Some(bank_coverage_stats(&negs, &qa, threshold)?),
        Some(_) => None,
        None => Some(bank_coverage_stats(&kb, &qa, threshold)?),
    };
    Ok(StepOutcome {
        loss,
        rows_changed,
        rows_updated,
        coverage,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr_net: f64,
    pub lr_adv: f64,
    pub mean_nn_cosine: Option<f64>,
    pub outlier_count: Option<usize>,
    pub elapsed_ms: u64,
    pub rows_changed: usize,
    pub rows_updated: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn push(&mut self, record: TrainRecord) {
        debug_assert!(self
            .records
            .last()
            .is_none_or(|r| (r.epoch, r.step) < (record.epoch, record.step)));
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean loss of the records from `epoch`.
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self.records.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.records.is_empty() {
            w.write_record([
                "epoch",
                "step",
                "loss",
                "lr_net",
                "lr_adv",
                "mean_nn_cosine",
                "outlier_count",
                "elapsed_ms",
                "rows_changed",
                "rows_updated",
            ])
            .expect("in-memory write");
        }
        for r in &self.records {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Everything a finished pretraining run produces.
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub initial: Checkpoint,
    pub log: TrainLog,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Loads data and builds the initial encoder and negative source for `config`.
pub fn initialize(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset, MlpEncoder, NegativeProvider)> {
    config.validate()?;
    let seeds = config.seeds();
    let (train, test) = config.data.load(seeds.data)?;
    let dims = &config.model.dims;
    if train.dim() != dims[0] || test.dim() != dims[0] {
        return Err(Error::config(
            "model.dims",
            format!("input width {} does not match data dimension {}", dims[0], train.dim()),
        ));
    }
    if train.len() < config.train.batch_size {
        return Err(Error::config(
            "train.batch_size",
            format!("batch of {} exceeds {} training samples", config.train.batch_size, train.len()),
        ));
    }
    let encoder = MlpEncoder::init(dims, seeds.encoder)?;
    let k = config.negatives.k;
    let provider = match config.negatives.mode {
        NegativesMode::Adversarial => {
            NegativeProvider::Adversarial(init_bank_from_encoder(&train, &encoder, k, seeds.bank)?)
        }
        NegativesMode::Fifo => NegativeProvider::Fifo(FifoQueue::new(k, encoder.output_dim())),
        NegativesMode::InBatch => NegativeProvider::InBatch,
    };
    Ok((train, test, encoder, provider))
}

fn snapshot(encoder: &MlpEncoder, provider: &NegativeProvider) -> Checkpoint {
    Checkpoint {
        encoder: encoder.clone(),
        bank: provider.bank().map(|b| b.rows().clone()),
    }
}

/// Runs `epochs × steps_per_epoch` training steps with cosine-decayed
/// learning rates. With `out_dir`, writes the log and checkpoints there;
/// on an abort the log so far and a partial checkpoint are kept.
pub fn pretrain(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<PretrainOutput> {
    let (train, test, mut encoder, mut provider) = initialize(config)?;
    let initial = snapshot(&encoder, &provider);
    let seeds = config.seeds();
    let shapes: Vec<usize> = encoder.params().iter().map(|p| p.len()).collect();
    let mut optimizer = SgdState::new(config.optim.net, &shapes);
    let augment_root = SeededRng::new(seeds.augment);

    let epochs = config.train.epochs;
    let steps_per_epoch = train.len() / config.train.batch_size;
    let total_steps = epochs * steps_per_epoch;
    let start = Instant::now();
    let mut log = TrainLog::default();

    let result = (|| -> Result<()> {
        for epoch in 0..epochs {
            let augment = augment_root.fork(epoch as u64);
            for (s, indices) in epoch_batches(train.len(), config.train.batch_size, seeds.shuffle, epoch)
                .iter()
                .enumerate()
            {
                let step = epoch * steps_per_epoch + s;
                let (t, total) = match config.optim.schedule {
                    ScheduleUnit::Step => (step, total_steps),
                    ScheduleUnit::Epoch => (epoch, epochs),
                };
                let rates = StepRates {
                    lr_net: cosine_lr(t, total, config.optim.net.lr)?,
                    lr_adv: cosine_lr(t, total, config.optim.adv.lr)?,
                };
                let batch = Batch {
                    samples: train.samples(),
                    indices,
                    augment: &augment,
                };
                let out = match train_step(&mut encoder, &mut provider, &mut optimizer, batch, config, rates) {
                    Ok(out) => out,
                    Err(e) => {
                        log.push(TrainRecord {
                            epoch,
                            step,
                            loss: f64::NAN,
                            lr_net: rates.lr_net,
                            lr_adv: rates.lr_adv,
                            mean_nn_cosine: None,
                            outlier_count: None,
                            elapsed_ms: 0,
                            rows_changed: 0,
                            rows_updated: 0,
                        });
                        return Err(e);
                    }
                };
                log.push(TrainRecord {
                    epoch,
                    step,
                    loss: out.loss,
                    lr_net: rates.lr_net,
                    lr_adv: rates.lr_adv,
                    mean_nn_cosine: out.coverage.as_ref().map(|c| c.mean_nn_cosine),
                    outlier_count: out.coverage.as_ref().map(|c| c.outlier_count),
                    elapsed_ms: if config.train.record_wall_clock {
                        start.elapsed().as_millis() as u64
                    } else {
                        0
                    },
                    rows_changed: out.rows_changed,
                    rows_updated: out.rows_updated,
                });
            }
            let every = config.train.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < epochs {
                    snapshot(&encoder, &provider).save(&dir.join(format!("checkpoint_epoch_{:04}.ckpt", epoch + 1)))?;
                }
            }
        }
        Ok(())
    })();

    if let Err(e) = result {
        if let Some(dir) = out_dir {
            log.write_csv(&dir.join(LOG_FILE))?;
            snapshot(&encoder, &provider).save(&dir.join(PARTIAL_CHECKPOINT))?;
            let path = dir.join(ABORT_FILE);
            let last = log.records.last().map(|r| (r.epoch, r.step));
            std::fs::write(&path, format!("error: {e}\nat (epoch, step): {last:?}\n")).map_err(|e| Error::io(&path, e))?;
        }
        return Err(e);
    }

    let checkpoint = snapshot(&encoder, &provider);
    if let Some(dir) = out_dir {
        log.write_csv(&dir.join(LOG_FILE))?;
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(PretrainOutput {
        checkpoint,
        initial,
        log,
        train,
        test,
    })
}

/// Linear-probe and kNN accuracy of a frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderEvaluation {
    pub probe: ProbeResult,
    pub knn_accuracy: f64,
}

pub fn evaluate_encoder(
    encoder: &MlpEncoder,
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &ExperimentConfig,
) -> Result<EncoderEvaluation> {
    if encoder.input_dim() != train.dim() || encoder.input_dim() != test.dim() {
        return Err(Error::Shape(format!(
            "encoder expects {} inputs, data has {}",
            encoder.input_dim(),
            train.dim()
        )));
    }
    let train_x = encoder.embed(train.samples())?;
    let test_x = encoder.embed(test.samples())?;
    let probe = linear_probe(&train_x, train.labels(), &test_x, test.labels(), &config.probe)?;
    let k = config.probe.knn_k.min(train.len());
    let knn_accuracy = knn_accuracy(&train_x, train.labels(), &test_x, test.labels(), k)?;
    Ok(EncoderEvaluation { probe, knn_accuracy })
}
