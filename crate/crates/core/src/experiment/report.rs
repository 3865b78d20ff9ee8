//! Results and cost tables.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Method, MethodRun};
use crate::error::{Error, Result};
use crate::fed::{predicted_cost, FederationOutcome};
use crate::model::Tensors;

/// One method's per-client test WER with its cost columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub method: String,
    pub tuned_params: usize,
    pub total_params: usize,
    pub rounds: Option<u32>,
    pub bytes: Option<u64>,
    /// `(client_id, test WER)` in client order.
    pub client_wer: Vec<(u32, f64)>,
    /// Unweighted mean over clients.
    pub mean_wer: f64,
}

impl ResultsRow {
    pub fn new(
        method: &str,
        tuned_params: usize,
        total_params: usize,
        rounds: Option<u32>,
        bytes: Option<u64>,
        client_wer: Vec<(u32, f64)>,
    ) -> Self {
        let mean_wer = if client_wer.is_empty() {
            0.0
        } else {
            client_wer.iter().map(|c| c.1).sum::<f64>() / client_wer.len() as f64
        };
        ResultsRow {
            method: method.to_string(),
            tuned_params,
            total_params,
            rounds,
            bytes,
            client_wer,
            mean_wer,
        }
    }
}

/// The row of a trained (or untouched) model.
pub fn method_row(run: &MethodRun, client_wer: Vec<(u32, f64)>) -> ResultsRow {
    let (rounds, bytes) = match (&run.federation, run.method) {
        (Some(f), _) => (Some(f.rounds_run), Some(f.ledger.total())),
        (None, Method::PretrainedOnly) => (None, None),
        (None, _) => (Some(run.rounds), None),
    };
    ResultsRow::new(
        run.method.name(),
        run.tuned_params,
        run.model.num_scalars(),
        rounds,
        bytes,
        client_wer,
    )
}

fn wer_cell(w: f64) -> String {
    format!("{w:.6}")
}

/// Writes rows as CSV: `method, tuned_params, total_params, rounds, bytes,
/// mean_wer`, then one `wer_client_<id>` column per client.
pub fn write_results_csv<W: Write>(rows: &[ResultsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ids: Vec<u32> = rows.first().map(|r| r.client_wer.iter().map(|c| c.0).collect()).unwrap_or_default();
    let mut header: Vec<String> = ["method", "tuned_params", "total_params", "rounds", "bytes", "mean_wer"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(ids.iter().map(|id| format!("wer_client_{id}")));
    w.write_record(&header)?;
    for r in rows {
        let row_ids: Vec<u32> = r.client_wer.iter().map(|c| c.0).collect();
        if row_ids != ids {
            return Err(Error::Input(format!("row {} covers different clients", r.method)));
        }
        let mut rec = vec![
            r.method.clone(),
            r.tuned_params.to_string(),
            r.total_params.to_string(),
            r.rounds.map(|x| x.to_string()).unwrap_or_default(),
            r.bytes.map(|x| x.to_string()).unwrap_or_default(),
            wer_cell(r.mean_wer),
        ];
        rec.extend(r.client_wer.iter().map(|c| wer_cell(c.1)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Measured and closed-form communication of one federated run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub clients: u64,
    pub rounds: u64,
    pub h_theta: u64,
    pub h_delta: u64,
    pub ledger_bytes: u64,
    pub predicted_bytes: u64,
}

pub fn cost_row(method: Method, fed: &FederationOutcome) -> CostRow {
    let clients = fed.metrics.first().map_or(0, |m| m.client_dev_wer.len()) as u64;
    let l = &fed.ledger;
    CostRow {
        method: method.name().to_string(),
        clients,
        rounds: u64::from(fed.rounds_run),
        h_theta: l.h_theta,
        h_delta: l.h_delta,
        ledger_bytes: l.total(),
        predicted_bytes: predicted_cost(l.h_theta, l.h_delta, clients, u64::from(fed.rounds_run), fed.mode),
    }
}

pub fn write_cost_csv<W: Write>(rows: &[CostRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = vec![
            ResultsRow::new("FEDAVG", 10, 10, Some(3), Some(99), vec![(0, 0.5), (1, 0.25)]),
            ResultsRow::new("FEDAVG+FEDMEM", 0, 10, None, None, vec![(0, 0.25), (1, 0.0)]),
        ];
        let mut buf = Vec::new();
        write_results_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "method,tuned_params,total_params,rounds,bytes,mean_wer,wer_client_0,wer_client_1\n\
             FEDAVG,10,10,3,99,0.375000,0.500000,0.250000\n\
             FEDAVG+FEDMEM,0,10,,,0.125000,0.250000,0.000000\n"
        );
        let bad = vec![rows[0].clone(), ResultsRow::new("X", 0, 0, None, None, vec![(5, 0.0)])];
        assert!(write_results_csv(&bad, Vec::new()).is_err());
    }
}
