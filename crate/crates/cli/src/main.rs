//! `feds2t`: runs the federated speech-to-text experiments on synthetic
//! clients.
//!
//! Every subcommand reads the same flat configuration (`--config`, then
//! `--set key=value` overrides) and works inside the configured output
//! directory:
//!
//! ```text
//! <out>/config.txt                resolved configuration
//! <out>/data.tsv, data.frames.bin all client data
//! <out>/backbone.fs2t             pre-trained backbone
//! <out>/pretrain.jsonl            pre-training log
//! <out>/<METHOD>/global.fs2t      trained global model (adapter merged)
//! <out>/<METHOD>/adapter.flra     trained adapter (LoRA methods)
//! <out>/<METHOD>/metrics.jsonl    one record per round
//! <out>/<METHOD>/ledger.json      every metered message
//! <out>/memory/client_<id>.fmem   datastore (and .fivf index)
//! <out>/results.csv, cost.csv, generalization.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use feds2t::data::generate_world;
use feds2t::decode::corpus_wer;
use feds2t::experiment::{
    build_client_memory, generalize, method_row, pretrain, run_experiment, train_method,
    write_cost_csv, write_results_csv, cost_row, Corpus, ExperimentConfig, Method, ResultsRow,
};
use feds2t::fed::Mode;
use feds2t::model::{read_params, write_adapter, write_params, ParameterSet, Tensors};
use feds2t::retrieval::{read_datastore, read_index, write_datastore, write_index};

#[derive(Parser)]
#[command(name = "feds2t", version, about = "Federated S2T with LoRA and client-side memories")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set seed=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the synthetic clients and write the dataset files.
    GenData,
    /// Train the backbone on the public corpus.
    Pretrain,
    /// Run FedAvg or FedLoRA from the backbone.
    Federate {
        /// FEDAVG or FEDLORA (default: the configured method).
        #[arg(long)]
        method: Option<String>,
    },
    /// Train on the pooled client data.
    Centralize {
        /// FULL or LORA.
        #[arg(long, default_value = "FULL")]
        mode: String,
    },
    /// Build one client's datastore (and index) from a global model.
    BuildDatastore {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        client: u32,
    },
    /// Tune `(k, λ, T)` for one client on its dev split.
    TuneMem {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        client: u32,
    },
    /// Test WER of a model on the federated clients, optionally with memories.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Row label in the output table.
        #[arg(long, default_value = "MODEL")]
        label: String,
        /// Also report the model with per-client memories.
        #[arg(long)]
        fedmem: bool,
    },
    /// Evaluate a global model and its memories on held-out clients.
    Generalize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "GLOBAL")]
        label: String,
    },
    /// Run every method end to end and write the results and cost tables.
    Report,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::parse_text(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        config.apply_override(o)?;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn data_stem(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.join("data")
}

fn load_corpus(config: &ExperimentConfig) -> Result<Corpus> {
    let stem = data_stem(config);
    Corpus::read(&stem).with_context(|| format!("reading {}.tsv (run gen-data first)", stem.display()))
}

fn load_model(path: &Path) -> Result<ParameterSet> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_params(&bytes)?.1)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_rows(path: &Path, rows: &[ResultsRow]) -> Result<()> {
    write_results_csv(rows, fs::File::create(path)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = load_config(&cli.common)?;
    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join("config.txt"), config.to_text())?;
    let model_config = config.model_config()?;

    match cli.command {
        Command::GenData => {
            let world = generate_world(&config.world_config())?;
            let corpus = Corpus::from_world(&world);
            corpus.write(&data_stem(&config))?;
            println!(
                "wrote {} visible, {} invisible clients to {}.tsv",
                corpus.clients.len(),
                corpus.invisible.len(),
                data_stem(&config).display()
            );
        }
        Command::Pretrain => {
            let corpus = load_corpus(&config)?;
            let (backbone, log) = pretrain(&config, &corpus.public)?;
            fs::write(config.out_dir.join("backbone.fs2t"), write_params(&model_config, &backbone)?)?;
            write_jsonl(&config.out_dir.join("pretrain.jsonl"), &log)?;
            let last = log.last().expect("log has the initial entry");
            println!("public dev WER {:.4} -> {:.4}", log[0].dev_wer, last.dev_wer);
        }
        Command::Federate { method } => {
            let method = match method {
                Some(m) => Method::parse(&m)?,
                None => config.method,
            };
            if !method.is_federated() {
                bail!("{} is not a federated method", method.name());
            }
            run_and_save(&config, method)?;
        }
        Command::Centralize { mode } => {
            let method = match Mode::parse(&mode)? {
                Mode::Full => Method::CentralizedFull,
                Mode::Lora => Method::CentralizedLora,
            };
            run_and_save(&config, method)?;
        }
        Command::BuildDatastore { model, client } => {
            let corpus = load_corpus(&config)?;
            let params = load_model(&model)?;
            let data = corpus.client(client).with_context(|| format!("no client {client}"))?;
            let memory = build_client_memory(&config, &params, data)?;
            let dir = config.out_dir.join("memory");
            fs::create_dir_all(&dir)?;
            fs::write(dir.join(format!("client_{client}.fmem")), write_datastore(&memory.store))?;
            if let Some(index) = &memory.index {
                fs::write(dir.join(format!("client_{client}.fivf")), write_index(index))?;
            }
            println!("client {client}: {} entries", memory.store.len());
        }
        Command::TuneMem { model, client } => {
            let corpus = load_corpus(&config)?;
            let params = load_model(&model)?;
            let data = corpus.client(client).with_context(|| format!("no client {client}"))?;
            let dir = config.out_dir.join("memory");
            let store_path = dir.join(format!("client_{client}.fmem"));
            let store = read_datastore(&fs::read(&store_path).with_context(|| {
                format!("reading {} (run build-datastore first)", store_path.display())
            })?)?;
            let index = match fs::read(dir.join(format!("client_{client}.fivf"))) {
                Ok(bytes) => Some(read_index(&bytes)?),
                Err(_) => None,
            };
            let mut template = config.retrieval_template();
            if let Some(ix) = &index {
                template.nprobe = template.nprobe.min(ix.ncluster());
            } else {
                template.backend = feds2t::retrieval::Backend::Exact;
            }
            let outcome = feds2t::retrieval::tune_hyperparameters(&params, &store, index.as_ref(), &data.dev, &config.grid, template)?;
            let path = dir.join(format!("client_{client}.tune.json"));
            fs::write(&path, serde_json::to_string_pretty(&outcome)?)?;
            let b = outcome.best;
            println!(
                "client {client}: k={} lambda={} T={} dev WER {:.4}",
                b.k, b.lambda, b.temperature, outcome.best_wer
            );
        }
        Command::Evaluate { model, label, fedmem } => {
            let corpus = load_corpus(&config)?;
            let params = load_model(&model)?;
            let total = params.num_scalars();
            let mut base = Vec::new();
            let mut mem = Vec::new();
            for c in &corpus.clients {
                base.push((c.client_id, corpus_wer(&params, &c.test, config.beam, None)?.wer()));
                if fedmem {
                    let m = build_client_memory(&config, &params, c)?;
                    mem.push((c.client_id, corpus_wer(&params, &c.test, config.beam, Some(m.context()))?.wer()));
                }
            }
            let mut rows = vec![ResultsRow::new(&label, 0, total, None, None, base)];
            if fedmem {
                rows.push(ResultsRow::new(&format!("{label}+FEDMEM"), 0, total, None, None, mem));
            }
            write_rows(&config.out_dir.join("eval.csv"), &rows)?;
        }
        Command::Generalize { model, label } => {
            let corpus = load_corpus(&config)?;
            let params = load_model(&model)?;
            let run = feds2t::experiment::MethodRun {
                method: config.method,
                model: params,
                adapter: None,
                rounds: 0,
                federation: None,
                tuned_params: 0,
            };
            let (mut rows, _) = generalize(&config, &run, &corpus.invisible)?;
            if let [global, with_mem] = rows.as_mut_slice() {
                global.method = label.clone();
                with_mem.method = format!("{label}+FEDMEM");
            }
            write_rows(&config.out_dir.join("generalization.csv"), &rows)?;
        }
        Command::Report => {
            let corpus = match load_corpus(&config) {
                Ok(c) => c,
                Err(_) => Corpus::from_world(&generate_world(&config.world_config())?),
            };
            let report = run_experiment(&config, &corpus, &Method::ALL)?;
            write_jsonl(&config.out_dir.join("pretrain.jsonl"), &report.pretrain_log)?;
            write_rows(&config.out_dir.join("results.csv"), &report.results)?;
            write_cost_csv(&report.costs, fs::File::create(config.out_dir.join("cost.csv"))?)?;
            println!("wrote {}", config.out_dir.join("cost.csv").display());
            write_rows(&config.out_dir.join("generalization.csv"), &report.generalization)?;
            for row in &report.results {
                println!("{:<20} mean test WER {:.4}", row.method, row.mean_wer);
            }
        }
    }
    Ok(())
}

/// Trains one method from the saved backbone and writes its artifacts.
fn run_and_save(config: &ExperimentConfig, method: Method) -> Result<()> {
    let model_config = config.model_config()?;
    let corpus = load_corpus(config)?;
    let backbone = load_model(&config.out_dir.join("backbone.fs2t")).context("run pretrain first")?;
    let run = train_method(config, method, &corpus.clients, &backbone)?;
    let dir = config.out_dir.join(method.name());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("global.fs2t"), write_params(&model_config, &run.model)?)?;
    if let Some(adapter) = &run.adapter {
        fs::write(dir.join("adapter.flra"), write_adapter(&model_config, adapter)?)?;
    }
    let mut wer = Vec::new();
    for c in &corpus.clients {
        wer.push((c.client_id, corpus_wer(&run.model, &c.test, config.beam, None)?.wer()));
    }
    let row = method_row(&run, wer);
    if let Some(fed) = &run.federation {
        fs::write(dir.join("metrics.jsonl"), fed.metrics_jsonl()?)?;
        fs::write(dir.join("ledger.json"), serde_json::to_string_pretty(&fed.ledger)?)?;
        write_cost_csv(&[cost_row(method, fed)], fs::File::create(dir.join("cost.csv"))?)?;
        println!(
            "{}: {} rounds (best {}), {} bytes",
            method.name(),
            fed.rounds_run,
            fed.best_round,
            fed.ledger.total()
        );
    } else {
        println!("{}: {} epochs", method.name(), run.rounds);
    }
    write_rows(&dir.join("results.csv"), &[row])?;
    Ok(())
}
