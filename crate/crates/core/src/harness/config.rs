//! Experiment configuration: TOML file, command-line overrides, seed splitting.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::completion::OracleConfig;
use crate::datagen::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::client::TrainConfig;
use crate::model::{ModelConfig, ModelDims};
use crate::rng::{derive_seed, Stream};
use crate::server::{AggregationMode, ServerConfig};

/// Environment variable that re-roots relative output directories.
pub const OUT_ROOT_ENV: &str = "MMFL_OUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Iid,
    #[default]
    Noniid,
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Partition::Iid),
            "noniid" | "non_iid" | "non-iid" => Ok(Partition::Noniid),
            other => Err(Error::config("partition", format!("expected `iid` or `noniid`, got `{other}`"))),
        }
    }
}

/// Component switches; each one is a pure transform of the configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    WoMcm,
    WoRam,
    WoCompletion,
    WoCka,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::None, Ablation::WoMcm, Ablation::WoRam, Ablation::WoCompletion, Ablation::WoCka];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::WoMcm => "wo_mcm",
            Ablation::WoRam => "wo_ram",
            Ablation::WoCompletion => "wo_completion",
            Ablation::WoCka => "wo_cka",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("ablation", format!("unknown ablation `{s}`; expected one of none, wo_mcm, wo_ram, wo_completion, wo_cka")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_clients: usize,
    /// Desk-scale 30; the full-scale protocol runs 200.
    pub rounds: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of each client's pairs that lose one modality.
    pub beta: f64,
    /// Fraction of the incomplete pairs that lose the image (the rest lose text).
    pub rho: f64,
    pub partition: Partition,
    pub ablation: Ablation,
    pub master_seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub server: ServerConfig,
    pub oracle: OracleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_clients: 10,
            rounds: 30,
            n_train: 2000,
            n_test: 500,
            beta: 0.3,
            rho: 0.5,
            partition: Partition::Noniid,
            ablation: Ablation::None,
            master_seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            server: ServerConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub beta: Option<f64>,
    pub partition: Option<Partition>,
    pub ablation: Option<Ablation>,
    pub rounds: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Every seed of an experiment, derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub dataset: u64,
    pub model: u64,
    pub joint_init: u64,
    pub probe: u64,
    pub partition: u64,
    pub missing: u64,
    pub completion: u64,
    master: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Self {
            dataset: derive_seed(master, Stream::Dataset, 0),
            model: derive_seed(master, Stream::Model, 0),
            joint_init: derive_seed(master, Stream::ClientInit, 0),
            probe: derive_seed(master, Stream::Probe, 0),
            partition: derive_seed(master, Stream::Partition, 0),
            missing: derive_seed(master, Stream::Missing, 0),
            completion: derive_seed(master, Stream::Completion, 0),
            master,
        }
    }

    /// Seed for masking client `client`'s shard.
    pub fn missing_for(&self, client: usize) -> u64 {
        derive_seed(self.missing, Stream::Missing, client as u64)
    }

    /// Seed for round `round` (sampling, shuffling, per-round probes).
    pub fn round(&self, round: usize) -> u64 {
        derive_seed(self.master, Stream::Round, round as u64)
    }
}

fn unit_interval(key: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(key, format!("must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// Unvalidated parse; the offending key is lifted out of the deserializer message.
fn parse_toml(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let key = msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".to_string());
        Error::config(key, msg)
    })
}

impl ExperimentConfig {
    /// Parses TOML text; unknown keys and out-of-range values are errors naming the key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, &Overrides::default())
    }

    /// File values, then flag overrides, then validation.
    pub fn load_with(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let cfg = parse_toml(&text)?.with_overrides(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(mut self, o: &Overrides) -> Self {
        if let Some(b) = o.beta {
            self.beta = b;
        }
        if let Some(p) = o.partition {
            self.partition = p;
        }
        if let Some(a) = o.ablation {
            self.ablation = a;
        }
        if let Some(r) = o.rounds {
            self.rounds = r;
        }
        if let Some(s) = o.seed {
            self.master_seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients", "must be at least 1"));
        }
        if self.n_test == 0 {
            return Err(Error::config("n_test", "must be at least 1"));
        }
        if self.n_train < self.num_clients {
            return Err(Error::config("n_train", "needs at least one record per client"));
        }
        unit_interval("beta", self.beta)?;
        unit_interval("rho", self.rho)?;
        self.dataset.validate()?;
        ModelDims::new(&self.model, &self.dataset)?;
        self.loss.validate()?;
        self.train.validate()?;
        self.server.validate()?;
        self.oracle.validate()?;
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.master_seed)
    }

    /// The configuration the run actually executes: ablation switches applied,
    /// dataset seed derived from the master seed.
    pub fn effective(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.dataset.dataset_seed = self.seeds().dataset;
        match self.ablation {
            Ablation::None | Ablation::WoCompletion => {}
            Ablation::WoMcm => c.loss.mcm_scale = 0.0,
            Ablation::WoRam => c.loss.ram_scale = 0.0,
            Ablation::WoCka => c.server.aggregation = AggregationMode::Uniform,
        }
        c
    }

    /// Whether missing modalities are synthesized (false only for `wo_completion`).
    pub fn uses_completion(&self) -> bool {
        self.ablation != Ablation::WoCompletion
    }

    /// Hex SHA-256 of the canonical JSON of every field except the output directory.
    pub fn hash_hex(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        crate::datagen::hex_digest(Sha256::new_with_prefix(&json))
    }

    /// First eight bytes of [`Self::hash_hex`], as stored in parameter files.
    pub fn hash_u64(&self) -> u64 {
        u64::from_str_radix(&self.hash_hex()[..16], 16).expect("hex digest")
    }

    /// Output directory, re-rooted under `$MMFL_OUT_ROOT` when relative.
    pub fn resolved_out(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if self.out.is_relative() => PathBuf::from(root).join(&self.out),
            _ => self.out.clone(),
        }
    }
}
