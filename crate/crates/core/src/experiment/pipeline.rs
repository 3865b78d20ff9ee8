use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{cost_row, method_row, CostRow, ResultsRow};
use super::{Corpus, ExperimentConfig, Method};
use crate::data::{ClientDataset, Example};
use crate::decode::{corpus_wer, RetrievalContext};
use crate::error::{Error, Result};
use crate::fed::{run_federation, FederationOutcome, Mode, Payload};
use crate::model::{
    loss_and_grads, read_params, write_params, Adam, AdamConfig, LoraAdapter, ModelConfig,
    ParameterSet, Tensors,
};
use crate::retrieval::{
    build_datastore, build_ivfpq, tune_hyperparameters, Backend, Datastore, IvfPqIndex,
    TuneOutcome,
};
use crate::rng::{stream_rng, stream_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Mean minibatch loss of the epoch (`NaN` for the initial entry).
    pub train_loss: f64,
    pub dev_wer: f64,
}

fn f32_exact(model: &ModelConfig, params: &ParameterSet) -> Result<ParameterSet> {
    Ok(read_params(&write_params(model, params)?)?.1)
}

/// Trains the backbone on the public corpus.
///
/// Entry 0 of the log scores the initialization. The returned weights are
/// exactly representable in the checkpoint format.
pub fn pretrain(config: &ExperimentConfig, public: &ClientDataset) -> Result<(ParameterSet, Vec<PretrainEpoch>)> {
    let model = config.model_config()?;
    if public.train.is_empty() {
        return Err(Error::Empty("public train split"));
    }
    let init = ParameterSet::random(&model, &mut stream_rng(config.seed, "backbone-init", &[]));
    let mut params = f32_exact(&model, &init)?;
    let mut log = vec![PretrainEpoch {
        epoch: 0,
        train_loss: f64::NAN,
        dev_wer: corpus_wer(&params, &public.dev, 1, None)?.wer(),
    }];
    let mut adam = Adam::new(AdamConfig::with_lr(config.pretrain_lr));
    let mut order: Vec<usize> = (0..public.train.len()).collect();
    for epoch in 1..=config.pretrain_epochs {
        order.shuffle(&mut stream_rng(config.seed, "pretrain-shuffle", &[epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| public.train[i].clone()).collect();
            let (loss, grads) = loss_and_grads(&params, None, &batch)?;
            adam.step(&mut params, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        log.push(PretrainEpoch {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev_wer: corpus_wer(&params, &public.dev, 1, None)?.wer(),
        });
    }
    Ok((f32_exact(&model, &params)?, log))
}

/// The global model a method produces from the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRun {
    pub method: Method,
    /// Adapter merged in for LORA methods.
    pub model: ParameterSet,
    /// The trained adapter of LORA methods.
    pub adapter: Option<LoraAdapter>,
    /// Rounds (federated) or epochs (centralized) executed.
    pub rounds: u32,
    pub federation: Option<FederationOutcome>,
    pub tuned_params: usize,
}

fn pooled(clients: &[ClientDataset]) -> ClientDataset {
    ClientDataset {
        client_id: 0,
        train: clients.iter().flat_map(|c| c.train.iter().cloned()).collect(),
        dev: clients.iter().flat_map(|c| c.dev.iter().cloned()).collect(),
        test: Vec::new(),
    }
}

/// Runs one method. Centralized training reuses the round loop with a
/// single client holding the pooled data, so one round is one epoch.
pub fn train_method(
    config: &ExperimentConfig,
    method: Method,
    clients: &[ClientDataset],
    backbone: &ParameterSet,
) -> Result<MethodRun> {
    let model = config.model_config()?;
    let Some(mode) = method.mode() else {
        return Ok(MethodRun {
            method,
            model: backbone.clone(),
            adapter: None,
            rounds: 0,
            federation: None,
            tuned_params: 0,
        });
    };
    let outcome = if method.is_federated() {
        run_federation(clients, backbone, &model, &config.federation_config(mode, clients.len()))?
    } else {
        run_federation(&[pooled(clients)], backbone, &model, &config.federation_config(mode, 1))?
    };
    let adapter = match &outcome.best {
        Payload::Lora(a) => Some(a.clone()),
        Payload::Full(_) => None,
    };
    let tuned_params = match mode {
        Mode::Full => backbone.num_scalars(),
        Mode::Lora => LoraAdapter::zeros(&model).num_scalars(),
    };
    Ok(MethodRun {
        method,
        model: outcome.global_model()?,
        adapter,
        rounds: outcome.rounds_run,
        federation: method.is_federated().then_some(outcome),
        tuned_params,
    })
}

/// Per-client test WER of a model (beam search, no retrieval).
pub fn evaluate_clients(model: &ParameterSet, clients: &[ClientDataset], beam: usize) -> Result<Vec<f64>> {
    clients
        .iter()
        .map(|c| Ok(corpus_wer(model, &c.test, beam, None)?.wer()))
        .collect()
}

/// A client's datastore, its optional index and its tuned retrieval.
#[derive(Clone, Debug)]
pub struct ClientMemory {
    pub client_id: u32,
    pub store: Datastore,
    pub index: Option<IvfPqIndex>,
    pub tuning: TuneOutcome,
}

impl ClientMemory {
    pub fn context(&self) -> RetrievalContext<'_> {
        RetrievalContext {
            store: &self.store,
            config: self.tuning.best,
            index: self.index.as_ref(),
        }
    }
}

/// Builds a client's datastore from its train split, indexes it if the
/// backend asks for it, and tunes `(k, λ, T)` on its dev split.
pub fn build_client_memory(config: &ExperimentConfig, model: &ParameterSet, client: &ClientDataset) -> Result<ClientMemory> {
    let store = build_datastore(model, &client.train)?;
    let mut template = config.retrieval_template();
    let index = match config.backend {
        Backend::Exact => None,
        Backend::IvfPq => {
            let n = store.len();
            let ncluster = if config.ncluster == 0 {
                ((n as f64).sqrt().ceil() as usize).max(1)
            } else {
                config.ncluster.min(n)
            };
            template.nprobe = config.nprobe.min(ncluster);
            let seed = stream_seed(config.seed, "client-index", &[u64::from(client.client_id)]);
            Some(build_ivfpq(&store, ncluster, config.pq_m, config.kmeans_iters, seed)?)
        }
    };
    let tuning = tune_hyperparameters(model, &store, index.as_ref(), &client.dev, &config.grid, template)?;
    Ok(ClientMemory {
        client_id: client.client_id,
        store,
        index,
        tuning,
    })
}

/// Test WER of each client with and without its memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEval {
    pub client_id: u32,
    pub k: usize,
    pub lambda: f64,
    pub temperature: f64,
    pub dev_wer: f64,
    pub store_len: usize,
    pub base_test_wer: f64,
    pub fedmem_test_wer: f64,
}

fn memory_eval(config: &ExperimentConfig, model: &ParameterSet, clients: &[ClientDataset]) -> Result<Vec<MemoryEval>> {
    clients
        .par_iter()
        .map(|c| {
            let mem = build_client_memory(config, model, c)?;
            let base = corpus_wer(model, &c.test, config.beam, None)?.wer();
            let with = corpus_wer(model, &c.test, config.beam, Some(mem.context()))?.wer();
            let best = mem.tuning.best;
            Ok(MemoryEval {
                client_id: c.client_id,
                k: best.k,
                lambda: best.lambda,
                temperature: best.temperature,
                dev_wer: mem.tuning.best_wer,
                store_len: mem.store.len(),
                base_test_wer: base,
                fedmem_test_wer: with,
            })
        })
        .collect()
}

/// Held-out clients: the global model as is, then with a memory built on
/// each client's own data. Returns the two result rows and the details.
pub fn generalize(
    config: &ExperimentConfig,
    run: &MethodRun,
    invisible: &[ClientDataset],
) -> Result<(Vec<ResultsRow>, Vec<MemoryEval>)> {
    if invisible.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let evals = memory_eval(config, &run.model, invisible)?;
    let total = run.model.num_scalars();
    let base: Vec<(u32, f64)> = evals.iter().map(|e| (e.client_id, e.base_test_wer)).collect();
    let mem: Vec<(u32, f64)> = evals.iter().map(|e| (e.client_id, e.fedmem_test_wer)).collect();
    Ok((
        vec![
            ResultsRow::new(run.method.name(), 0, total, None, None, base),
            ResultsRow::new(&format!("{}+FEDMEM", run.method.name()), 0, total, None, None, mem),
        ],
        evals,
    ))
}

/// Everything an experiment reports.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub pretrain_log: Vec<PretrainEpoch>,
    pub results: Vec<ResultsRow>,
    pub costs: Vec<CostRow>,
    pub memories: Vec<(Method, Vec<MemoryEval>)>,
    /// Rows for held-out clients, built from the last federated method run.
    pub generalization: Vec<ResultsRow>,
    pub generalization_memories: Vec<MemoryEval>,
    pub runs: Vec<MethodRun>,
}

/// Pre-trains, runs every method in `methods` and, with `config.fedmem`,
/// adds a memory row after each one. Held-out clients are evaluated with the
/// last federated method in the list.
pub fn run_experiment(config: &ExperimentConfig, corpus: &Corpus, methods: &[Method]) -> Result<ExperimentReport> {
    config.validate()?;
    let (backbone, pretrain_log) = pretrain(config, &corpus.public)?;
    let mut report = ExperimentReport {
        pretrain_log,
        results: Vec::new(),
        costs: Vec::new(),
        memories: Vec::new(),
        generalization: Vec::new(),
        generalization_memories: Vec::new(),
        runs: Vec::new(),
    };
    for &method in methods {
        let run = train_method(config, method, &corpus.clients, &backbone)?;
        if config.fedmem {
            let evals = memory_eval(config, &run.model, &corpus.clients)?;
            let base: Vec<(u32, f64)> = evals.iter().map(|e| (e.client_id, e.base_test_wer)).collect();
            let mem: Vec<(u32, f64)> = evals.iter().map(|e| (e.client_id, e.fedmem_test_wer)).collect();
            report.results.push(method_row(&run, base));
            let total = run.model.num_scalars();
            report.results.push(ResultsRow::new(&format!("{}+FEDMEM", method.name()), 0, total, None, None, mem));
            report.memories.push((method, evals));
        } else {
            let wer = evaluate_clients(&run.model, &corpus.clients, config.beam)?;
            let ids = corpus.clients.iter().map(|c| c.client_id);
            report.results.push(method_row(&run, ids.zip(wer).collect()));
        }
        if let Some(fed) = &run.federation {
            report.costs.push(cost_row(method, fed));
        }
        report.runs.push(run);
    }
    if let Some(run) = report.runs.iter().rev().find(|r| r.method.is_federated()) {
        let (rows, evals) = generalize(config, run, &corpus.invisible)?;
        report.generalization = rows;
        report.generalization_memories = evals;
    }
    Ok(report)
}
