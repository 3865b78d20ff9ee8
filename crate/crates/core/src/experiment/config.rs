//! Flat `key = value` experiment configuration.
//!
//! One setting per line; `#` starts a comment; lists are comma-separated.
//! Command-line overrides use the same `key=value` syntax and are applied
//! after the file. [`ExperimentConfig::to_text`] writes every key, so a
//! resolved configuration can be reloaded verbatim.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::WorldConfig;
use crate::error::{Error, Result};
use crate::fed::{FederationConfig, Mode};
use crate::model::{LoraTarget, ModelConfig};
use crate::retrieval::{Backend, RetrievalConfig, RetrievalGrid};

/// The compared training methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// The pre-trained backbone, untouched.
    PretrainedOnly,
    /// Centralized training of the whole backbone on pooled client data.
    CentralizedFull,
    /// Centralized training of a LoRA adapter on pooled client data.
    CentralizedLora,
    FedAvg,
    FedLora,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::PretrainedOnly,
        Method::CentralizedFull,
        Method::CentralizedLora,
        Method::FedAvg,
        Method::FedLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::PretrainedOnly => "P-S2T",
            Method::CentralizedFull => "C-S2T-FULL",
            Method::CentralizedLora => "C-S2T-LORA",
            Method::FedAvg => "FEDAVG",
            Method::FedLora => "FEDLORA",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    /// The trained payload kind, if the method trains at all.
    pub fn mode(self) -> Option<Mode> {
        match self {
            Method::PretrainedOnly => None,
            Method::CentralizedFull | Method::FedAvg => Some(Mode::Full),
            Method::CentralizedLora | Method::FedLora => Some(Mode::Lora),
        }
    }

    pub fn is_federated(self) -> bool {
        matches!(self, Method::FedAvg | Method::FedLora)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub method: Method,
    pub fedmem: bool,

    pub world: WorldConfig,

    pub hidden_dim: usize,
    pub lora_targets: Vec<LoraTarget>,
    pub lora_rank: usize,
    pub lora_alpha: f64,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,

    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub patience: usize,
    pub max_rounds: usize,

    pub beam: usize,
    pub grid: RetrievalGrid,
    pub backend: Backend,
    /// Coarse clusters per client index; 0 picks `⌈√N⌉`.
    pub ncluster: usize,
    /// Sub-quantizers; 0 stores raw vectors.
    pub pq_m: usize,
    pub nprobe: usize,
    pub kmeans_iters: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            method: Method::FedLora,
            fedmem: true,
            world: WorldConfig::default(),
            hidden_dim: 48,
            lora_targets: vec![LoraTarget::Enc, LoraTarget::Query, LoraTarget::Hidden],
            lora_rank: 2,
            lora_alpha: 4.0,
            pretrain_epochs: 20,
            pretrain_lr: 0.003,
            lr: 0.005,
            batch_size: 8,
            local_epochs: 1,
            patience: 5,
            max_rounds: 60,
            beam: 5,
            grid: RetrievalGrid::default(),
            backend: Backend::Exact,
            ncluster: 0,
            pq_m: 4,
            nprobe: 8,
            kmeans_iters: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {value:?}"))),
    }
}

impl ExperimentConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let w = &mut self.world;
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "method" => self.method = Method::parse(v)?,
            "fedmem" => self.fedmem = parse_bool(key, v)?,
            "vocab_size" => w.vocab_size = parse(key, v)?,
            "feature_dim" => w.feature_dim = parse(key, v)?,
            "num_clients" => w.num_clients = parse(key, v)?,
            "num_invisible" => w.num_invisible = parse(key, v)?,
            "train_sizes" => w.train_sizes = parse_list(key, v)?,
            "dev_size" => w.dev_size = parse(key, v)?,
            "test_size" => w.test_size = parse(key, v)?,
            "public_train_size" => w.public_train_size = parse(key, v)?,
            "public_dev_size" => w.public_dev_size = parse(key, v)?,
            "accent_strength" => w.accent_strength = parse(key, v)?,
            "noise_std" => w.noise_std = parse(key, v)?,
            "domain_bias" => w.domain_bias = parse(key, v)?,
            "min_len" => w.min_len = parse(key, v)?,
            "max_len" => w.max_len = parse(key, v)?,
            "branching" => w.branching = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "lora_targets" => {
                self.lora_targets = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(LoraTarget::parse)
                    .collect::<Result<_>>()?
            }
            "lora_rank" => self.lora_rank = parse(key, v)?,
            "lora_alpha" => self.lora_alpha = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "local_epochs" => self.local_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "max_rounds" => self.max_rounds = parse(key, v)?,
            "beam" => self.beam = parse(key, v)?,
            "grid_k" => self.grid.ks = parse_list(key, v)?,
            "grid_lambda" => self.grid.lambdas = parse_list(key, v)?,
            "grid_temperature" => self.grid.temperatures = parse_list(key, v)?,
            "backend" => {
                self.backend = match v.to_ascii_lowercase().as_str() {
                    "exact" => Backend::Exact,
                    "ivfpq" | "ivf-pq" => Backend::IvfPq,
                    _ => return Err(Error::Config(format!("backend: unknown {v:?}"))),
                }
            }
            "ncluster" => self.ncluster = parse(key, v)?,
            "pq_m" => self.pq_m = parse(key, v)?,
            "nprobe" => self.nprobe = parse(key, v)?,
            "kmeans_iters" => self.kmeans_iters = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k, v)
    }

    /// Parses a configuration file body on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            config
                .apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(config)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let w = &self.world;
        let targets: Vec<&str> = self.lora_targets.iter().map(|t| t.name()).collect();
        let backend = match self.backend {
            Backend::Exact => "exact",
            Backend::IvfPq => "ivfpq",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("method", self.method.name().into());
        kv("fedmem", if self.fedmem { "on" } else { "off" }.into());
        kv("vocab_size", w.vocab_size.to_string());
        kv("feature_dim", w.feature_dim.to_string());
        kv("num_clients", w.num_clients.to_string());
        kv("num_invisible", w.num_invisible.to_string());
        kv("train_sizes", join(&w.train_sizes));
        kv("dev_size", w.dev_size.to_string());
        kv("test_size", w.test_size.to_string());
        kv("public_train_size", w.public_train_size.to_string());
        kv("public_dev_size", w.public_dev_size.to_string());
        kv("accent_strength", w.accent_strength.to_string());
        kv("noise_std", w.noise_std.to_string());
        kv("domain_bias", w.domain_bias.to_string());
        kv("min_len", w.min_len.to_string());
        kv("max_len", w.max_len.to_string());
        kv("branching", w.branching.to_string());
        kv("hidden_dim", self.hidden_dim.to_string());
        kv("lora_targets", targets.join(","));
        kv("lora_rank", self.lora_rank.to_string());
        kv("lora_alpha", self.lora_alpha.to_string());
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("pretrain_lr", self.pretrain_lr.to_string());
        kv("lr", self.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("local_epochs", self.local_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("max_rounds", self.max_rounds.to_string());
        kv("beam", self.beam.to_string());
        kv("grid_k", join(&self.grid.ks));
        kv("grid_lambda", join(&self.grid.lambdas));
        kv("grid_temperature", join(&self.grid.temperatures));
        kv("backend", backend.into());
        kv("ncluster", self.ncluster.to_string());
        kv("pq_m", self.pq_m.to_string());
        kv("nprobe", self.nprobe.to_string());
        kv("kmeans_iters", self.kmeans_iters.to_string());
        s
    }

    /// The synthetic world, seeded from the root seed.
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            ..self.world.clone()
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::new(
            self.world.feature_dim,
            self.hidden_dim,
            self.world.vocab_size,
            &self.lora_targets,
            self.lora_rank,
            self.lora_alpha,
        )
    }

    pub fn federation_config(&self, mode: Mode, num_clients: usize) -> FederationConfig {
        FederationConfig {
            num_clients,
            mode,
            local_epochs: self.local_epochs,
            patience: self.patience,
            max_rounds: self.max_rounds,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    /// Retrieval settings other than the tuned `(k, λ, T)`.
    pub fn retrieval_template(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: 1,
            lambda: 0.0,
            temperature: 1.0,
            nprobe: self.nprobe,
            backend: self.backend,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world_config().validate()?;
        self.model_config()?;
        self.federation_config(Mode::Full, 1).validate()?;
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.grid.points().is_empty() {
            return Err(Error::Config("retrieval grid is empty".into()));
        }
        for (k, l, t) in self.grid.points() {
            RetrievalConfig::exact(k, l, t).validate()?;
        }
        if self.backend == Backend::IvfPq && (self.nprobe == 0 || self.kmeans_iters == 0) {
            return Err(Error::Config("IVF-PQ needs nprobe and kmeans_iters >= 1".into()));
        }
        Ok(())
    }
}
