//! End-to-end experiments: pre-training the public backbone, the compared
//! training methods, per-client memories, and the results tables.

mod config;
mod pipeline;
mod report;

use std::path::Path;

pub use config::{ExperimentConfig, Method};
pub use pipeline::{
    build_client_memory, evaluate_clients, generalize, pretrain, run_experiment, train_method,
    ClientMemory, ExperimentReport, MemoryEval, MethodRun, PretrainEpoch,
};
pub use report::{
    cost_row, method_row, write_cost_csv, write_results_csv, CostRow, ResultsRow,
};

use crate::data::{read_dataset, write_dataset, ClientDataset, ClientRole, World};
use crate::error::{Error, Result};

/// All client data of an experiment, independent of how it was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub feature_dim: usize,
    pub clients: Vec<ClientDataset>,
    pub invisible: Vec<ClientDataset>,
    pub public: ClientDataset,
}

impl Corpus {
    pub fn from_world(world: &World) -> Self {
        Corpus {
            feature_dim: world.config.feature_dim,
            clients: world.clients.clone(),
            invisible: world.invisible.clone(),
            public: world.public.clone(),
        }
    }

    /// A visible or invisible client by id.
    pub fn client(&self, client_id: u32) -> Option<&ClientDataset> {
        self.clients
            .iter()
            .chain(&self.invisible)
            .find(|c| c.client_id == client_id)
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        let mut sets: Vec<(ClientRole, &ClientDataset)> = Vec::new();
        sets.extend(self.clients.iter().map(|c| (ClientRole::Visible, c)));
        sets.extend(self.invisible.iter().map(|c| (ClientRole::Invisible, c)));
        sets.push((ClientRole::Public, &self.public));
        write_dataset(stem, self.feature_dim, &sets)
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let (feature_dim, sets) = read_dataset(stem)?;
        let mut clients = Vec::new();
        let mut invisible = Vec::new();
        let mut public = None;
        for (role, d) in sets {
            match role {
                ClientRole::Visible => clients.push(d),
                ClientRole::Invisible => invisible.push(d),
                ClientRole::Public => public = Some(d),
            }
        }
        let public = public.ok_or_else(|| Error::format("dataset", "no public corpus"))?;
        Ok(Corpus {
            feature_dim,
            clients,
            invisible,
            public,
        })
    }
}
