//! Datasets and simulated non-IID federations.

pub mod idx;
mod partition;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Sample;

pub use partition::{
    apply_domain, partition_background_difference, partition_class_imbalance, Domain,
    BUILTIN_DOMAINS,
};

/// Samples sharing one input shape, labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    name: String,
    class_count: usize,
    samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, class_count: usize, samples: Vec<Sample>) -> Result<Self> {
        let name = name.into();
        if let Some(first) = samples.first() {
            let shape = first.input.shape();
            for (i, s) in samples.iter().enumerate() {
                if s.input.shape() != shape {
                    return Err(Error::data(format!(
                        "{name}: sample {i} has shape {:?}, expected {shape:?}",
                        s.input.shape()
                    )));
                }
                if s.label >= class_count {
                    return Err(Error::data(format!(
                        "{name}: sample {i} label {} outside [0, {class_count})",
                        s.label
                    )));
                }
            }
        }
        Ok(LabeledDataset {
            name,
            class_count,
            samples,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shape shared by every input, if any sample exists.
    pub fn input_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.input.shape())
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    /// Sorted list of labels that occur at least once.
    pub fn label_support(&self) -> Vec<usize> {
        self.class_histogram()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }

    /// First `n` samples (or all of them).
    pub fn truncated(&self, n: usize) -> LabeledDataset {
        LabeledDataset {
            name: self.name.clone(),
            class_count: self.class_count,
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}

/// One simulated participant.
///
/// `true_distribution_id` is ground truth for scoring groupings only; the
/// extraction, comparison and scheduling stages never read it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub true_distribution_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    clients: Vec<ClientDataset>,
    distribution_type_count: usize,
}

impl Federation {
    /// Client ids must be `1..=n` in order.
    pub fn new(clients: Vec<ClientDataset>, distribution_type_count: usize) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::data("federation has no clients"));
        }
        for (i, c) in clients.iter().enumerate() {
            if c.client_id != i + 1 {
                return Err(Error::data(format!(
                    "client ids must be contiguous from 1; position {i} holds id {}",
                    c.client_id
                )));
            }
        }
        Ok(Federation {
            clients,
            distribution_type_count,
        })
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn distribution_type_count(&self) -> usize {
        self.distribution_type_count
    }

    pub fn client(&self, id: usize) -> Option<&ClientDataset> {
        id.checked_sub(1).and_then(|i| self.clients.get(i))
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        self.clients.first().and_then(|c| c.train.input_shape())
    }

    pub fn class_count(&self) -> usize {
        self.clients.first().map(|c| c.train.class_count()).unwrap_or(0)
    }

    /// Ground-truth labels, indexed like `clients()`. Evaluation only.
    pub fn true_distribution_ids(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.true_distribution_id).collect()
    }

    /// Sub-federation holding the given clients, renumbered from 1.
    pub fn subset(&self, ids: &[usize]) -> Result<Federation> {
        let mut clients = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            let mut c = self
                .client(id)
                .ok_or_else(|| Error::data(format!("no client {id}")))?
                .clone();
            c.client_id = i + 1;
            clients.push(c);
        }
        Federation::new(clients, self.distribution_type_count)
    }

    pub fn manifest(&self, include_ground_truth: bool) -> FederationManifest {
        FederationManifest {
            client_count: self.clients.len(),
            distribution_type_count: self.distribution_type_count,
            clients: self
                .clients
                .iter()
                .map(|c| ClientManifest {
                    client_id: c.client_id,
                    train_samples: c.train.len(),
                    test_samples: c.test.len(),
                    true_distribution_id: include_ground_truth.then_some(c.true_distribution_id),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientManifest {
    pub client_id: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_distribution_id: Option<usize>,
}

/// JSON-exportable description of a federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationManifest {
    pub client_count: usize,
    pub distribution_type_count: usize,
    pub clients: Vec<ClientManifest>,
}
