//! Declarative experiment description, loaded from TOML.
//!
//! Every field has a default, so a file only needs the values it changes.
//! The resolved form (all defaults materialized) is what gets hashed and
//! written next to each run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrast::LossConfig;
use crate::data::{load_csv, AugmentPolicy, LabeledDataset, MixtureConfig};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::negatives::{BankUpdateMode, NegativesMode, DEFAULT_OUTLIER_THRESHOLD};
use crate::optim::SgdConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub cluster_sigma: f64,
    pub separation: f64,
    /// Load training data from CSV instead of generating a mixture.
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub csv_header: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let m = MixtureConfig::default();
        Self {
            num_classes: m.num_classes,
            train_per_class: m.train_per_class,
            test_per_class: m.test_per_class,
            dim: m.dim,
            cluster_sigma: m.cluster_sigma,
            separation: m.separation,
            train_csv: None,
            test_csv: None,
            csv_header: false,
        }
    }
}

impl DataConfig {
    pub fn mixture(&self) -> MixtureConfig {
        MixtureConfig {
            num_classes: self.num_classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            dim: self.dim,
            cluster_sigma: self.cluster_sigma,
            separation: self.separation,
        }
    }

    /// Input width the encoder must accept. For CSV sources this is only
    /// known after loading.
    pub fn input_dim(&self) -> Option<usize> {
        self.train_csv.is_none().then_some(self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.train_csv, &self.test_csv) {
            (None, None) => self.mixture().validate(),
            (Some(_), Some(_)) => Ok(()),
            _ => Err(Error::config(
                "data.test_csv",
                "train_csv and test_csv must be given together",
            )),
        }
    }

    /// Builds the train/test split. `seed` only matters for generated data.
    pub fn load(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        match (&self.train_csv, &self.test_csv) {
            (Some(train), Some(test)) => Ok((load_csv(train, self.csv_header)?, load_csv(test, self.csv_header)?)),
            _ => {
                let split = self.mixture().generate(seed)?;
                Ok((split.train, split.test))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dims: Vec<usize>,
    /// Treat the key view as a constant when back-propagating.
    pub stop_gradient_key: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: vec![64, 128, 32],
            stop_gradient_key: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleUnit {
    Step,
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub net: SgdConfig,
    pub adv: SgdConfig,
    pub schedule: ScheduleUnit,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            net: SgdConfig::network(),
            adv: SgdConfig::adversary(),
            schedule: ScheduleUnit::Step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegativesConfig {
    pub mode: NegativesMode,
    /// Bank size, or queue capacity in FIFO mode.
    pub k: usize,
    pub update: BankUpdateMode,
    /// Recompute embeddings with the updated encoder before the adversary step.
    pub refresh_embeddings: bool,
    pub outlier_threshold: f64,
}

impl Default for NegativesConfig {
    fn default() -> Self {
        Self {
            mode: NegativesMode::Adversarial,
            k: 1024,
            update: BankUpdateMode::Renormalize,
            refresh_embeddings: false,
            outlier_threshold: DEFAULT_OUTLIER_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Fill the `elapsed_ms` log column. Off by default so logs are reproducible byte for byte.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            checkpoint_every: 0,
            record_wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub augment: AugmentPolicy,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub negatives: NegativesConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

/// Seeds for the independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub data: u64,
    pub encoder: u64,
    pub bank: u64,
    pub augment: u64,
    pub shuffle: u64,
}

impl ExperimentConfig {
    /// Parses without validating.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::parse(text, &[])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::load_with_overrides(&text, &[])
    }

    /// Parses `text`, applies `section.key=value` overrides on top, then validates.
    pub fn load_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let cfg = Self::parse(text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let toml_err = |e: toml::de::Error| Error::config(toml_error_field(&e), e.message().to_string());
        let mut doc: toml::Table = text.parse().map_err(toml_err)?;
        for (key, value) in overrides {
            set_path(&mut doc, key, value)?;
        }
        // Layer the file over the full default tree, so a partial section
        // keeps the defaults of its own group (`optim.net` vs `optim.adv`).
        let mut merged = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut merged, doc);
        merged.try_into().map_err(toml_err)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Hash with the negatives mode and size blanked, for comparing runs
    /// that are meant to differ only there.
    pub fn hash_excluding_negatives(&self) -> String {
        let mut c = self.clone();
        c.negatives.mode = NegativesMode::Adversarial;
        c.negatives.k = 0;
        c.hash()
    }

    pub fn seeds(&self) -> RunSeeds {
        let root = crate::numerics::SeededRng::new(self.seed);
        RunSeeds {
            data: root.fork(1).seed(),
            encoder: root.fork(2).seed(),
            bank: root.fork(3).seed(),
            augment: root.fork(4).seed(),
            shuffle: root.fork(5).seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.augment.validate()?;
        let dims = &self.model.dims;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config("model.dims", "need at least two positive widths"));
        }
        if let Some(d) = self.data.input_dim() {
            if dims[0] != d {
                return Err(Error::config(
                    "model.dims",
                    format!("input width {} does not match data.dim {d}", dims[0]),
                ));
            }
        }
        self.loss.validate()?;
        self.optim.net.validate("optim.net")?;
        self.optim.adv.validate("optim.adv")?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.negatives.mode == NegativesMode::InBatch && t.batch_size < 2 {
            return Err(Error::config("train.batch_size", "in-batch mode needs at least 2"));
        }
        if self.negatives.mode != NegativesMode::InBatch && self.negatives.k == 0 {
            return Err(Error::config("negatives.k", "must be positive"));
        }
        if self.negatives.mode == NegativesMode::Fifo && t.batch_size > self.negatives.k {
            return Err(Error::config(
                "negatives.k",
                format!("queue capacity {} is smaller than the batch", self.negatives.k),
            ));
        }
        if self.data.train_csv.is_none() {
            let train = self.data.num_classes * self.data.train_per_class;
            if t.batch_size > train {
                return Err(Error::config(
                    "train.batch_size",
                    format!("batch of {} exceeds {train} training samples", t.batch_size),
                ));
            }
        }
        if !(-1.0..=1.0).contains(&self.negatives.outlier_threshold) {
            return Err(Error::config("negatives.outlier_threshold", "must lie in [-1, 1]"));
        }
        self.probe.validate()
    }
}

fn toml_error_field(e: &toml::de::Error) -> String {
    // Messages look like "unknown field `x`, expected ..." or carry no key;
    // point at the offending key when one is quoted.
    let msg = e.message();
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".into())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as a TOML
/// literal, falling back to a plain string.
pub fn set_path(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().ok_or_else(|| Error::config(key, "empty key"))?;
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::load_with_overrides("seed = 9\n[train]\nepochs = 2\n", &[]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.loss.tau_adv, 0.02);
    }

    #[test]
    fn partial_optimizer_sections_keep_their_own_defaults() {
        let cfg = ExperimentConfig::load_with_overrides("[optim.net]\nlr = 0.1\n[optim.adv]\nmomentum = 0.5\n", &[]).unwrap();
        assert_eq!(cfg.optim.net.lr, 0.1);
        assert_eq!(cfg.optim.net.momentum, 0.9);
        assert_eq!(cfg.optim.adv.lr, 3.0);
        assert_eq!(cfg.optim.adv.momentum, 0.5);
    }

    #[test]
    fn overrides_win() {
        let over = vec![
            ("seed".to_string(), "5".to_string()),
            ("negatives.mode".to_string(), "fifo".to_string()),
            ("loss.tau_net".to_string(), "0.2".to_string()),
        ];
        let cfg = ExperimentConfig::load_with_overrides("seed = 1\n", &over).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.negatives.mode, NegativesMode::Fifo);
        assert_eq!(cfg.loss.tau_net, 0.2);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ExperimentConfig::load_with_overrides("[loss]\ntau_adv = -1.0\n", &[]).unwrap_err();
        assert!(err.to_string().contains("loss.tau_adv"), "{err}");
        let err = ExperimentConfig::load_with_overrides("[loss]\ntau_nett = 1.0\n", &[]).unwrap_err();
        assert!(err.to_string().contains("tau_nett"), "{err}");
        let err = ExperimentConfig::load_with_overrides("[model]\ndims = [3, 8]\n", &[]).unwrap_err();
        assert!(err.to_string().contains("model.dims"), "{err}");
        let err = ExperimentConfig::load_with_overrides(
            "[negatives]\nmode = \"fifo\"\nk = 16\n",
            &[],
        )
        .unwrap_err();
        assert!(err.to_string().contains("negatives.k"), "{err}");
    }

    #[test]
    fn negative_agnostic_hash() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.negatives.k = 256;
        b.negatives.mode = NegativesMode::Fifo;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash_excluding_negatives(), b.hash_excluding_negatives());
    }
}
