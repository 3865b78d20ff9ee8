//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines print in order
//! and the process exits nonzero if any criterion fails.

mod common;

use std::time::Instant;

use common::*;
use feds2t::experiment::{run_experiment, write_cost_csv, write_results_csv, Corpus, ExperimentConfig, Method};
use feds2t::fed::{predicted_cost, predicted_cost_real, Mode};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Reported totals: clients, FedAvg rounds and GB, FedLoRA rounds and GB,
/// and the quoted reduction in percent.
const REPORTED: [(&str, f64, f64, f64, f64, f64, f64); 3] = [
    ("dialect ASR", 4.0, 82.0, 344.22, 74.0, 12.01, 96.5),
    ("dialect ST", 4.0, 46.0, 202.33, 52.0, 9.15, 95.5),
    ("multi-domain ASR", 10.0, 13.0, 245.42, 15.0, 20.38, 91.7),
];

fn reported_costs() -> Check {
    for (name, clients, r_avg, gb_avg, r_lora, gb_lora, quoted) in REPORTED {
        let h_theta = gb_avg / (clients + 2.0 * clients * r_avg);
        let h_delta = (gb_lora - clients * h_theta) / (2.0 * clients * r_lora);
        ensure(h_delta > 0.0 && h_delta < h_theta, || format!("{name}: adapter size {h_delta}"))?;
        let full = predicted_cost_real(h_theta, h_delta, clients, r_avg, Mode::Full);
        let lora = predicted_cost_real(h_theta, h_delta, clients, r_lora, Mode::Lora);
        ensure((full - gb_avg).abs() < 1e-9 && (lora - gb_lora).abs() < 1e-9, || {
            format!("{name}: totals {full} / {lora}")
        })?;
        let reduction = 100.0 * (1.0 - lora / full);
        ensure((reduction - quoted).abs() <= 0.1, || {
            format!("{name}: reduction {reduction:.2}% vs {quoted}%")
        })?;
    }
    Ok(())
}

struct SeedRun {
    fedlora: f64,
    fedlora_mem: f64,
    lora_bytes: u64,
    full_bytes_same_rounds: u64,
    invisible_global: f64,
    invisible_mem: f64,
    tables: Vec<u8>,
}

fn tables(report: &feds2t::experiment::ExperimentReport) -> Vec<u8> {
    let mut out = Vec::new();
    write_results_csv(&report.results, &mut out).unwrap();
    write_cost_csv(&report.costs, &mut out).unwrap();
    write_results_csv(&report.generalization, &mut out).unwrap();
    out
}

fn run_seed(seed: u64) -> Result<SeedRun, String> {
    let config = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let world = feds2t::data::generate_world(&config.world_config()).map_err(|e| e.to_string())?;
    let corpus = Corpus::from_world(&world);
    let methods = [Method::FedLora];
    let report = run_experiment(&config, &corpus, &methods).map_err(|e| e.to_string())?;
    let row = |name: &str, rows: &[feds2t::experiment::ResultsRow]| {
        rows.iter()
            .find(|r| r.method == name)
            .map(|r| r.mean_wer)
            .ok_or_else(|| format!("no {name} row"))
    };
    let cost = report
        .costs
        .iter()
        .find(|c| c.method == Method::FedLora.name())
        .ok_or("no FEDLORA cost row")?;
    Ok(SeedRun {
        fedlora: row("FEDLORA", &report.results)?,
        fedlora_mem: row("FEDLORA+FEDMEM", &report.results)?,
        lora_bytes: cost.ledger_bytes,
        full_bytes_same_rounds: predicted_cost(
            cost.h_theta,
            cost.h_delta,
            cost.clients,
            cost.rounds,
            Mode::Full,
        ),
        invisible_global: row("FEDLORA", &report.generalization)?,
        invisible_mem: row("FEDLORA+FEDMEM", &report.generalization)?,
        tables: tables(&report),
    })
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, name: &str, start: Instant, result: Check| {
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => println!("criterion {n} {name}: PASS ({secs:.1}s)"),
            Err(e) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({secs:.1}s) {e}");
            }
        }
    };

    let t = Instant::now();
    report(1, "reported cost reductions", t, reported_costs());
    let t = Instant::now();
    report(2, "ledger equals closed form", t, ledger_matrix());
    let t = Instant::now();
    report(3, "numerical core", t, numerical_core());
    let t = Instant::now();
    report(4, "retrieval core", t, retrieval_core());

    let t = Instant::now();
    let runs: Result<Vec<SeedRun>, String> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let elapsed = t;
    match runs {
        Ok(runs) => {
            let mem_wins = runs.iter().filter(|r| r.fedlora_mem <= r.fedlora).count();
            let ratios: Vec<f64> = runs
                .iter()
                .map(|r| r.lora_bytes as f64 / r.full_bytes_same_rounds as f64)
                .collect();
            let detail = runs
                .iter()
                .zip(&SEEDS)
                .map(|(r, s)| format!("seed {s}: {:.4} -> {:.4}", r.fedlora, r.fedlora_mem))
                .collect::<Vec<_>>()
                .join(", ");
            report(
                5,
                "FedMem helps FedLoRA and LoRA bytes stay small",
                elapsed,
                ensure(mem_wins >= 4 && ratios.iter().all(|&x| x < 0.15), || {
                    format!("{mem_wins}/5 seeds improved ({detail}); byte ratios {ratios:.3?}")
                }),
            );
            let gen_wins = runs.iter().filter(|r| r.invisible_mem <= r.invisible_global).count();
            let t6 = Instant::now();
            report(
                6,
                "FedMem on invisible clients",
                t6,
                ensure(gen_wins >= 4, || {
                    let d: Vec<String> = runs
                        .iter()
                        .map(|r| format!("{:.4} -> {:.4}", r.invisible_global, r.invisible_mem))
                        .collect();
                    format!("{gen_wins}/5 seeds improved ({})", d.join(", "))
                }),
            );
            let t7 = Instant::now();
            let rerun = run_seed(SEEDS[0]);
            report(
                7,
                "rerun gives identical tables",
                t7,
                rerun.and_then(|again| {
                    ensure(again.tables == runs[0].tables, || "tables differ between runs".into())
                }),
            );
        }
        Err(e) => {
            for (n, name) in [(5, "FedMem helps FedLoRA"), (6, "FedMem on invisible clients"), (7, "rerun")] {
                report(n, name, elapsed, Err(e.clone()));
            }
        }
    }

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
