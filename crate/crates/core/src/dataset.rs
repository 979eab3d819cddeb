//! Client datasets and their on-disk form.
//!
//! A federation file is newline-delimited JSON: a `meta` record first, then
//! one record per instance carrying its client id and split.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub type ClientId = u64;

/// One training/evaluation item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instance {
    /// Token sequence for next-token prediction.
    Sequence(Vec<u32>),
    /// Feature vector with a class label.
    Classify { features: Vec<f64>, label: usize },
}

impl Instance {
    /// Number of supervised prediction points this instance contributes:
    /// `len - 1` next-token targets for sequences, 1 for classification.
    pub fn prediction_points(&self) -> usize {
        match self {
            Instance::Sequence(tokens) => tokens.len().saturating_sub(1),
            Instance::Classify { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// All data belonging to one client. Splits are disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: ClientId,
    pub train: Vec<Instance>,
    pub valid: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl ClientDataset {
    pub fn empty(client_id: ClientId) -> Self {
        Self {
            client_id,
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        }
    }
}

/// What kind of task a federation carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Sequence,
    Classify,
}

/// A generated federation plus the generator's ground truth: the exact
/// divergence of each client's generating distribution from the global one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Federation {
    pub task: TaskKind,
    pub clients: Vec<ClientDataset>,
    /// `true_divergence[i]` belongs to `clients[i]`.
    pub true_divergence: Vec<f64>,
}

impl Federation {
    /// Exact KL divergence of a client's generating distribution from the
    /// global generating distribution.
    pub fn true_client_divergence(&self, client_id: ClientId) -> Result<f64> {
        self.clients
            .iter()
            .position(|c| c.client_id == client_id)
            .map(|i| self.true_divergence[i])
            .ok_or_else(|| Error::Data(format!("unknown client id {client_id}")))
    }

    pub fn client(&self, client_id: ClientId) -> Option<&ClientDataset> {
        self.clients.iter().find(|c| c.client_id == client_id)
    }

    pub fn client_ids(&self) -> Vec<ClientId> {
        self.clients.iter().map(|c| c.client_id).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Meta {
        task: TaskKind,
        num_clients: usize,
        true_divergence: Vec<f64>,
    },
    Instance {
        client_id: ClientId,
        split: Split,
        #[serde(flatten)]
        instance: InstanceRecord,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum InstanceRecord {
    Sequence { tokens: Vec<u32> },
    Classify { features: Vec<f64>, label: usize },
}

impl From<&Instance> for InstanceRecord {
    fn from(i: &Instance) -> Self {
        match i {
            Instance::Sequence(tokens) => InstanceRecord::Sequence {
                tokens: tokens.clone(),
            },
            Instance::Classify { features, label } => InstanceRecord::Classify {
                features: features.clone(),
                label: *label,
            },
        }
    }
}

impl From<InstanceRecord> for Instance {
    fn from(r: InstanceRecord) -> Self {
        match r {
            InstanceRecord::Sequence { tokens } => Instance::Sequence(tokens),
            InstanceRecord::Classify { features, label } => Instance::Classify { features, label },
        }
    }
}

/// Write a federation as newline-delimited JSON records.
pub fn save_federation(fed: &Federation, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let meta = Record::Meta {
        task: fed.task,
        num_clients: fed.clients.len(),
        true_divergence: fed.true_divergence.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&meta)?)?;
    for client in &fed.clients {
        for (split, items) in [
            (Split::Train, &client.train),
            (Split::Valid, &client.valid),
            (Split::Test, &client.test),
        ] {
            for inst in items {
                let rec = Record::Instance {
                    client_id: client.client_id,
                    split,
                    instance: inst.into(),
                };
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a federation written by [`save_federation`].
pub fn load_federation(path: &Path) -> Result<Federation> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Data("empty federation file".into()))??;
    let Record::Meta {
        task,
        num_clients,
        true_divergence,
    } = serde_json::from_str(&first)?
    else {
        return Err(Error::Data("federation file must start with a meta record".into()));
    };
    if true_divergence.len() != num_clients {
        return Err(Error::Data("meta divergence length mismatch".into()));
    }

    let mut clients: Vec<ClientDataset> = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Record::Instance {
            client_id,
            split,
            instance,
        } = serde_json::from_str(&line)?
        else {
            return Err(Error::Data("unexpected second meta record".into()));
        };
        let client = match clients.iter_mut().find(|c| c.client_id == client_id) {
            Some(c) => c,
            None => {
                clients.push(ClientDataset::empty(client_id));
                clients.last_mut().unwrap()
            }
        };
        let inst: Instance = instance.into();
        match split {
            Split::Train => client.train.push(inst),
            Split::Valid => client.valid.push(inst),
            Split::Test => client.test.push(inst),
        }
    }
    if clients.len() != num_clients {
        return Err(Error::Data(format!(
            "federation file lists {num_clients} clients, found {}",
            clients.len()
        )));
    }
    Ok(Federation {
        task,
        clients,
        true_divergence,
    })
}
