use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ledger::{CommLedger, Direction, SimTransport};
use super::{aggregate, FederationConfig, Mode, Payload};
use crate::data::{ClientDataset, Example};
use crate::decode::corpus_wer;
use crate::error::{Error, Result};
use crate::model::{
    loss_and_grads, read_params, write_adapter, write_params, Adam, AdamConfig, LoraAdapter,
    ModelConfig, ParameterSet,
};
use crate::rng::stream_rng;

/// Server state between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundState {
    pub round: u32,
    pub global: Payload,
    pub best_dev_wer: f64,
    pub rounds_since_improvement: usize,
}

/// One line of the metrics log. Round 0 scores the initial model and
/// accounts for the initial backbone distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// Corpus dev WER per client, in client order.
    pub client_dev_wer: Vec<f64>,
    /// Dev-size-weighted mean of `client_dev_wer`.
    pub pooled_dev_wer: f64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationOutcome {
    pub mode: Mode,
    /// The payload of the best-scoring round.
    pub best: Payload,
    pub best_round: u32,
    /// Training rounds executed (the `r` of the cost formulas).
    pub rounds_run: u32,
    /// The backbone exactly as the clients received it.
    pub backbone: ParameterSet,
    pub ledger: CommLedger,
    pub metrics: Vec<RoundMetrics>,
}

impl FederationOutcome {
    /// The best global model, with the adapter merged in LORA mode.
    pub fn global_model(&self) -> Result<ParameterSet> {
        Ok(self.best.global_model(&self.backbone)?.into_owned())
    }

    /// The metrics log as line-delimited JSON.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.metrics {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Trains `payload` on one client's train split and returns the result.
///
/// Runs `local_epochs` passes over a shuffle seeded by
/// `(seed, round, client_id)` with a fresh Adam state. In LORA mode only
/// the adapter is updated; `backbone` is read but never modified.
pub fn local_update(
    client: &ClientDataset,
    payload: &Payload,
    backbone: &ParameterSet,
    config: &FederationConfig,
    round: u32,
) -> Result<Payload> {
    config.validate()?;
    if client.train.is_empty() {
        return Err(Error::Empty("client train split"));
    }
    if payload.mode() != config.mode {
        return Err(Error::Config(format!(
            "{} payload in {} mode",
            payload.mode().name(),
            config.mode.name()
        )));
    }
    let mut rng = stream_rng(config.seed, "local-shuffle", &[u64::from(round), u64::from(client.client_id)]);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut out = payload.clone();
    let mut order: Vec<usize> = (0..client.train.len()).collect();
    for _ in 0..config.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| client.train[i].clone()).collect();
            let (_, grads) = match &out {
                Payload::Full(p) => loss_and_grads(p, None, &batch)?,
                Payload::Lora(a) => loss_and_grads(backbone, Some(a), &batch)?,
            };
            adam.step(&mut out, &grads)?;
        }
    }
    Ok(out)
}

/// Per-client and pooled dev WER of a global model under greedy decoding.
fn evaluate(model: &ParameterSet, clients: &[ClientDataset]) -> Result<(Vec<f64>, f64)> {
    let stats = clients
        .par_iter()
        .map(|c| corpus_wer(model, &c.dev, 1, None))
        .collect::<Result<Vec<_>>>()?;
    let per_client: Vec<f64> = stats.iter().map(|s| s.wer()).collect();
    let total: usize = clients.iter().map(|c| c.dev.len()).sum();
    if total == 0 {
        return Err(Error::Empty("dev splits"));
    }
    let pooled = clients
        .iter()
        .zip(&per_client)
        .map(|(c, w)| c.dev.len() as f64 * w)
        .sum::<f64>()
        / total as f64;
    Ok((per_client, pooled))
}

/// Server encode and decode: what the server keeps is exactly what it sends.
fn through_wire(p: &Payload, model: &ModelConfig) -> Result<Payload> {
    Payload::decode(&p.encode(model)?, p.mode(), model)
}

/// Runs federated rounds until patience runs out or `max_rounds` is hit.
///
/// The initial backbone goes to every client before round 1 and is logged
/// as round 0. Clients train in parallel; uploads, ledger entries and the
/// average are always processed in client order.
pub fn run_federation(
    clients: &[ClientDataset],
    backbone: &ParameterSet,
    model: &ModelConfig,
    config: &FederationConfig,
) -> Result<FederationOutcome> {
    config.validate()?;
    if clients.len() != config.num_clients {
        return Err(Error::Config(format!(
            "{} clients supplied, num_clients = {}",
            clients.len(),
            config.num_clients
        )));
    }
    if config.mode == Mode::Lora && model.lora_targets.is_empty() {
        return Err(Error::Config("LORA mode needs at least one adapter target".into()));
    }
    let backbone_bytes = write_params(model, backbone)?;
    let h_delta = if model.lora_targets.is_empty() {
        0
    } else {
        write_adapter(model, &LoraAdapter::zeros(model))?.len() as u64
    };
    let mut transport = SimTransport::new(backbone_bytes.len() as u64, h_delta);
    for c in clients {
        transport.send(0, Direction::Down, c.client_id, &backbone_bytes);
    }
    let backbone = read_params(&backbone_bytes)?.1;
    let weights: Vec<f64> = clients.iter().map(|c| c.n_c() as f64).collect();

    let initial = match config.mode {
        Mode::Full => Payload::Full(backbone.clone()),
        Mode::Lora => Payload::Lora(LoraAdapter::init(model, &mut stream_rng(config.seed, "lora-init", &[]))),
    };
    let initial = through_wire(&initial, model)?;
    let (per_client, pooled) = evaluate(&*initial.global_model(&backbone)?, clients)?;
    let mut metrics = vec![RoundMetrics {
        round: 0,
        client_dev_wer: per_client,
        pooled_dev_wer: pooled,
        bytes_down: transport.ledger().round_total(0, Direction::Down),
        bytes_up: 0,
        improved: true,
    }];
    let mut state = RoundState {
        round: 0,
        global: initial.clone(),
        best_dev_wer: pooled,
        rounds_since_improvement: 0,
    };
    let mut best = initial;
    let mut best_round = 0;

    while (state.round as usize) < config.max_rounds && state.rounds_since_improvement < config.patience {
        let round = state.round + 1;
        let down = state.global.encode(model)?;
        for c in clients {
            transport.send(round, Direction::Down, c.client_id, &down);
        }
        let received = Payload::decode(&down, config.mode, model)?;
        let uploads = clients
            .par_iter()
            .map(|c| local_update(c, &received, &backbone, config, round)?.encode(model))
            .collect::<Result<Vec<_>>>()?;
        let mut payloads = Vec::with_capacity(clients.len());
        for (c, up) in clients.iter().zip(&uploads) {
            let bytes = transport.send(round, Direction::Up, c.client_id, up);
            payloads.push(Payload::decode(bytes, config.mode, model)?);
        }
        let global = through_wire(&aggregate(&payloads, &weights)?, model)?;
        let (per_client, pooled) = evaluate(&*global.global_model(&backbone)?, clients)?;
        let improved = pooled < state.best_dev_wer;
        if improved {
            state.best_dev_wer = pooled;
            state.rounds_since_improvement = 0;
            best = global.clone();
            best_round = round;
        } else {
            state.rounds_since_improvement += 1;
        }
        state.round = round;
        state.global = global;
        metrics.push(RoundMetrics {
            round,
            client_dev_wer: per_client,
            pooled_dev_wer: pooled,
            bytes_down: transport.ledger().round_total(round, Direction::Down),
            bytes_up: transport.ledger().round_total(round, Direction::Up),
            improved,
        });
    }

    Ok(FederationOutcome {
        mode: config.mode,
        best,
        best_round,
        rounds_run: state.round,
        backbone,
        ledger: transport.into_ledger(),
        metrics,
    })
}
