//! Command-line entry points. Each command resolves its configuration
//! (flag > config file > default), writes the resolved snapshot into the
//! output directory, then does its work.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::LabeledDataset;
use crate::encoder::MlpEncoder;
use crate::error::{Error, Result};
use crate::eval::{export_embeddings, BANK_LABEL};
use crate::gradcheck::{gradcheck_suite, GradcheckConfig};
use crate::negatives::NegativesMode;
use crate::trainer::{evaluate_encoder, pretrain, EncoderEvaluation, PretrainOutput};

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";
pub const PROBE_FILE: &str = "probe.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const BASELINES_FILE: &str = "baselines.csv";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "adco", version, about = "Adversarial contrastive learning at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment config; defaults are used for anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides one field, e.g. `--set loss.tau_adv=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder and write its checkpoint and training log.
    Pretrain(Common),
    /// Linear probe and kNN accuracy of a frozen encoder.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `pretrain`.
        #[arg(long, required_unless_present = "random_init")]
        checkpoint: Option<PathBuf>,
        /// Probe the untrained encoder the config would start from.
        #[arg(long, conflicts_with = "checkpoint")]
        random_init: bool,
    },
    /// Compare every analytic gradient with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 20)]
        encoder_instances: usize,
    },
    /// Pretrain and probe once per negative count.
    SweepNegatives {
        #[command(flatten)]
        common: Common,
        /// Comma-separated bank or queue sizes, e.g. `256,1024,2048`.
        #[arg(long, value_delimiter = ',', required = true)]
        k_list: Vec<usize>,
        /// Run one thread per configuration.
        #[arg(long)]
        parallel: bool,
    },
    /// Write encoder embeddings (and bank rows, labeled -1) as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Matched-budget runs with adversarial, FIFO and in-batch negatives.
    BenchBaselines {
        #[command(flatten)]
        common: Common,
        /// Run one thread per configuration.
        #[arg(long)]
        parallel: bool,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. }
        | Error::Parse { .. }
        | Error::Io { .. }
        | Error::Shape(_)
        | Error::InvalidTemperature(_)
        | Error::Schedule { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn parse_set(raw: &str) -> Result<(String, String)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::config(raw, "overrides must look like section.key=value"))
}

/// Applies file, `--set` and `--seed` in that order and validates the result.
pub fn resolve_config(common: &Common) -> Result<(ExperimentConfig, Vec<(String, String)>)> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        None => String::new(),
    };
    let mut overrides = common.set.iter().map(|s| parse_set(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let cfg = ExperimentConfig::load_with_overrides(&text, &overrides).map_err(|e| match (e, &common.config) {
        (Error::Config { field, message }, Some(path)) => Error::config(field, format!("{message} (in {})", path.display())),
        (e, _) => e,
    })?;
    Ok((cfg, overrides))
}

pub fn snapshot_text(cfg: &ExperimentConfig, source: Option<&Path>, overrides: &[(String, String)]) -> String {
    let mut out = String::from("# Resolved configuration. Precedence: flag > config file > default.\n");
    match source {
        Some(p) => out.push_str(&format!("# config file: {}\n", p.display())),
        None => out.push_str("# config file: none\n"),
    }
    for (k, v) in overrides {
        out.push_str(&format!("# override: {k} = {v}\n"));
    }
    out.push_str(&format!("# hash: {}\n\n", cfg.hash()));
    out.push_str(&cfg.to_toml());
    out
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_snapshot(dir: &Path, cfg: &ExperimentConfig, common: &Common, overrides: &[(String, String)]) -> Result<()> {
    write(&dir.join(SNAPSHOT_FILE), &snapshot_text(cfg, common.config.as_deref(), overrides))
}

/// Resolves the config and writes its snapshot; the shared prologue of every command.
fn setup(common: &Common) -> Result<ExperimentConfig> {
    let (cfg, overrides) = resolve_config(common)?;
    prepare_out(&common.out)?;
    write_snapshot(&common.out, &cfg, common, &overrides)?;
    Ok(cfg)
}

pub fn run_pretrain(common: &Common) -> Result<PretrainOutput> {
    let cfg = setup(common)?;
    pretrain(&cfg, Some(&common.out))
}

fn probe_table(eval: &EncoderEvaluation, digest: &str) -> String {
    let p = &eval.probe;
    let mut out = String::from("key,value\n");
    out.push_str(&format!("encoder_digest,{digest}\n"));
    out.push_str(&format!("top1_accuracy,{}\n", p.top1_accuracy));
    out.push_str(&format!("knn_accuracy,{}\n", eval.knn_accuracy));
    out.push_str(&format!("train_count,{}\n", p.train_count));
    out.push_str(&format!("test_count,{}\n", p.test_count));
    if let Some(l) = p.loss_history.last() {
        out.push_str(&format!("final_train_loss,{l}\n"));
    }
    for (c, (acc, n)) in p.per_class_accuracy.iter().zip(&p.per_class_count).enumerate() {
        out.push_str(&format!("class_{c}_accuracy,{acc}\nclass_{c}_count,{n}\n"));
    }
    out
}

fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    cfg.data.load(cfg.seeds().data)
}

pub fn run_probe(common: &Common, checkpoint: Option<&Path>) -> Result<EncoderEvaluation> {
    let cfg = setup(common)?;
    let encoder = match checkpoint {
        Some(path) => Checkpoint::load(path)?.encoder,
        None => MlpEncoder::init(&cfg.model.dims, cfg.seeds().encoder)?,
    };
    let (train, test) = load_data(&cfg)?;
    let eval = evaluate_encoder(&encoder, &train, &test, &cfg)?;
    let ck = Checkpoint { encoder, bank: None };
    write(&common.out.join(PROBE_FILE), &probe_table(&eval, &ck.digest()))?;
    Ok(eval)
}

pub fn run_gradcheck(common: &Common, instances: usize, encoder_instances: usize) -> Result<bool> {
    let cfg = setup(common)?;
    let report = gradcheck_suite(&GradcheckConfig {
        seed: cfg.seed,
        instances,
        encoder_instances,
        ..GradcheckConfig::default()
    });
    write(&common.out.join(GRADCHECK_FILE), &report.to_csv())?;
    print!("{report}");
    Ok(report.passed())
}

pub fn run_export_embeddings(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = setup(common)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (train, test) = load_data(&cfg)?;
    if ck.encoder.input_dim() != train.dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} inputs, data has {}",
            ck.encoder.input_dim(),
            train.dim()
        )));
    }
    for (name, ds) in [("embeddings_train.csv", &train), ("embeddings_test.csv", &test)] {
        let emb = ck.encoder.embed(ds.samples())?;
        let labels: Vec<i64> = ds.labels().iter().map(|&l| l as i64).collect();
        export_embeddings(&emb, &labels, &common.out.join(name))?;
    }
    if let Some(bank) = &ck.bank {
        export_embeddings(bank, &vec![BANK_LABEL; bank.rows()], &common.out.join("embeddings_bank.csv"))?;
    }
    Ok(())
}

/// One row of a sweep or baseline table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub mode: String,
    pub k: usize,
    pub status: String,
    pub probe_accuracy: Option<f64>,
    pub knn_accuracy: Option<f64>,
    pub first_epoch_loss: Option<f64>,
    pub last_epoch_loss: Option<f64>,
    pub mean_nn_cosine: Option<f64>,
    pub outlier_count: Option<usize>,
    pub rows_changed_min: Option<usize>,
    pub rows_changed_max: Option<usize>,
    pub rows_updated_min: Option<usize>,
    pub rows_updated_max: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub config_hash: String,
    pub shared_hash: String,
    pub error: String,
}

fn summarize(name: &str, cfg: &ExperimentConfig, result: Result<(PretrainOutput, EncoderEvaluation)>) -> RunSummary {
    let mut s = RunSummary {
        run: name.to_string(),
        mode: cfg.negatives.mode.to_string(),
        k: cfg.negatives.k,
        status: "ok".into(),
        probe_accuracy: None,
        knn_accuracy: None,
        first_epoch_loss: None,
        last_epoch_loss: None,
        mean_nn_cosine: None,
        outlier_count: None,
        rows_changed_min: None,
        rows_changed_max: None,
        rows_updated_min: None,
        rows_updated_max: None,
        steps: 0,
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        shared_hash: cfg.hash_excluding_negatives(),
        error: String::new(),
    };
    match result {
        Ok((out, eval)) => {
            let log = &out.log;
            s.probe_accuracy = Some(eval.probe.top1_accuracy);
            s.knn_accuracy = Some(eval.knn_accuracy);
            s.first_epoch_loss = log.epoch_mean_loss(0);
            s.last_epoch_loss = cfg.train.epochs.checked_sub(1).and_then(|e| log.epoch_mean_loss(e));
            if let Some(last) = log.records.last() {
                s.mean_nn_cosine = last.mean_nn_cosine;
                s.outlier_count = last.outlier_count;
            }
            s.rows_changed_min = log.records.iter().map(|r| r.rows_changed).min();
            s.rows_changed_max = log.records.iter().map(|r| r.rows_changed).max();
            s.rows_updated_min = log.records.iter().map(|r| r.rows_updated).min();
            s.rows_updated_max = log.records.iter().map(|r| r.rows_updated).max();
            s.steps = log.len();
        }
        Err(e) => {
            s.status = "failed".into();
            s.error = e.to_string();
        }
    }
    s
}

/// Pretrains into `dir`, then probes the result there.
pub fn pretrain_and_probe(cfg: &ExperimentConfig, dir: &Path) -> Result<(PretrainOutput, EncoderEvaluation)> {
    prepare_out(dir)?;
    write(&dir.join(SNAPSHOT_FILE), &snapshot_text(cfg, None, &[]))?;
    let out = pretrain(cfg, Some(dir))?;
    let eval = evaluate_encoder(&out.checkpoint.encoder, &out.train, &out.test, cfg)?;
    write(&dir.join(PROBE_FILE), &probe_table(&eval, &out.checkpoint.digest()))?;
    Ok((out, eval))
}

fn run_many(runs: Vec<(String, ExperimentConfig)>, root: &Path, parallel: bool) -> Vec<RunSummary> {
    let one = |(name, cfg): &(String, ExperimentConfig)| {
        let result = cfg.validate().and_then(|_| pretrain_and_probe(cfg, &root.join(name)));
        summarize(name, cfg, result)
    };
    if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = runs.iter().map(|r| scope.spawn(move || one(r))).collect();
            handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
        })
    } else {
        runs.iter().map(one).collect()
    }
}

pub fn summaries_csv(rows: &[RunSummary]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

pub fn run_sweep_negatives(common: &Common, k_list: &[usize], parallel: bool) -> Result<Vec<RunSummary>> {
    let cfg = setup(common)?;
    if k_list.is_empty() {
        return Err(Error::config("k_list", "must not be empty"));
    }
    let runs = k_list
        .iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.negatives.k = k;
            (format!("k_{k}"), c)
        })
        .collect();
    let rows = run_many(runs, &common.out, parallel);
    write(&common.out.join(SWEEP_FILE), &summaries_csv(&rows))?;
    Ok(rows)
}

pub fn run_bench_baselines(common: &Common, parallel: bool) -> Result<Vec<RunSummary>> {
    let cfg = setup(common)?;
    let runs = NegativesMode::ALL
        .iter()
        .map(|&mode| {
            let mut c = cfg.clone();
            c.negatives.mode = mode;
            (mode.as_str().to_string(), c)
        })
        .collect();
    let rows = run_many(runs, &common.out, parallel);
    write(&common.out.join(BASELINES_FILE), &summaries_csv(&rows))?;
    Ok(rows)
}

fn failed_runs(rows: &[RunSummary]) -> i32 {
    if rows.iter().all(|r| r.status == "ok") {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    }
}

fn print_rows(rows: &[RunSummary]) {
    for r in rows {
        match r.probe_accuracy {
            Some(acc) => println!("{:<12} probe {:.4}  knn {:.4}", r.run, acc, r.knn_accuracy.unwrap_or(f64::NAN)),
            None => println!("{:<12} failed: {}", r.run, r.error),
        }
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Pretrain(c) => run_pretrain(c).map(|out| {
            if let Some(l) = out.log.records.last() {
                println!("finished {} steps, last loss {:.6}", out.log.len(), l.loss);
            }
            EXIT_OK
        }),
        Command::Probe {
            common,
            checkpoint,
            random_init: _,
        } => run_probe(common, checkpoint.as_deref()).map(|e| {
            println!("probe {:.4}  knn {:.4}", e.probe.top1_accuracy, e.knn_accuracy);
            EXIT_OK
        }),
        Command::Gradcheck {
            common,
            instances,
            encoder_instances,
        } => run_gradcheck(common, *instances, *encoder_instances).map(|ok| if ok { EXIT_OK } else { EXIT_RUNTIME }),
        Command::SweepNegatives {
            common,
            k_list,
            parallel,
        } => run_sweep_negatives(common, k_list, *parallel).map(|rows| {
            print_rows(&rows);
            failed_runs(&rows)
        }),
        Command::ExportEmbeddings { common, checkpoint } => run_export_embeddings(common, checkpoint).map(|_| EXIT_OK),
        Command::BenchBaselines { common, parallel } => run_bench_baselines(common, *parallel).map(|rows| {
            print_rows(&rows);
            failed_runs(&rows)
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` and runs; clap usage errors exit with its own status 2.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}
