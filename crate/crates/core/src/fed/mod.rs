//! FedAvg and FedLoRA rounds over an in-process transport.
//!
//! Every round the server serializes the global payload and sends it to all
//! clients, each client trains locally from it, the uploads are averaged
//! with weights `n_c` and the new global model is scored on the pooled dev
//! splits. The best-scoring round's payload is kept; training stops after
//! `patience` rounds without improvement.

mod aggregate;
mod ledger;
mod round;

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

pub use aggregate::aggregate;
pub use ledger::{predicted_cost, predicted_cost_real, CommLedger, Direction, LedgerEntry, SimTransport};
pub use round::{local_update, run_federation, FederationOutcome, RoundMetrics, RoundState};

use crate::error::{Error, Result};
use crate::model::{
    merge, read_adapter, read_params, write_adapter, write_params, LoraAdapter, ModelConfig,
    ParameterSet, Tensors,
};

/// What travels between server and clients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    /// FedAvg: the whole backbone.
    Full,
    /// FedLoRA: adapter factors only; the backbone stays frozen.
    Lora,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FULL" | "FEDAVG" => Ok(Mode::Full),
            "LORA" | "FEDLORA" => Ok(Mode::Lora),
            _ => Err(Error::Config(format!("unknown federation mode {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "FULL",
            Mode::Lora => "LORA",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub mode: Mode,
    pub local_epochs: usize,
    pub patience: usize,
    pub max_rounds: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl FederationConfig {
    pub fn new(num_clients: usize, mode: Mode) -> Self {
        FederationConfig {
            num_clients,
            mode,
            local_epochs: 1,
            patience: 5,
            max_rounds: 100,
            lr: 0.01,
            batch_size: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("at least one client is required".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// The trainable state exchanged in one direction of a round.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Payload {
    Full(ParameterSet),
    Lora(LoraAdapter),
}

impl Payload {
    pub fn mode(&self) -> Mode {
        match self {
            Payload::Full(_) => Mode::Full,
            Payload::Lora(_) => Mode::Lora,
        }
    }

    /// Wire format: a backbone or adapter checkpoint.
    pub fn encode(&self, config: &ModelConfig) -> Result<Vec<u8>> {
        match self {
            Payload::Full(p) => write_params(config, p),
            Payload::Lora(a) => write_adapter(config, a),
        }
    }

    /// Parses a payload of the given mode and checks it against `config`.
    pub fn decode(bytes: &[u8], mode: Mode, config: &ModelConfig) -> Result<Self> {
        let (found, payload) = match mode {
            Mode::Full => {
                let (c, p) = read_params(bytes)?;
                (c, Payload::Full(p))
            }
            Mode::Lora => {
                let (c, a) = read_adapter(bytes)?;
                (c, Payload::Lora(a))
            }
        };
        if &found != config {
            return Err(Error::format("payload", "model configuration differs from the server's"));
        }
        Ok(payload)
    }

    /// The model this payload stands for: itself in FULL mode, the backbone
    /// with the adapter merged in LORA mode.
    pub fn global_model<'a>(&'a self, backbone: &'a ParameterSet) -> Result<Cow<'a, ParameterSet>> {
        match self {
            Payload::Full(p) => Ok(Cow::Borrowed(p)),
            Payload::Lora(a) => Ok(Cow::Owned(merge(backbone, a)?)),
        }
    }
}

impl Tensors for Payload {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Payload::Full(p) => p.tensors(),
            Payload::Lora(a) => a.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Payload::Full(p) => p.tensors_mut(),
            Payload::Lora(a) => a.tensors_mut(),
        }
    }
}
