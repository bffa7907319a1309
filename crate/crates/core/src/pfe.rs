//! Feature extraction: per-channel ReLU sparsity averaged over a client's
//! training data. The resulting q-vector is all a client ever uploads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Federation};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::seed::{self, stream};

/// Which ReLU layer to read and which of its channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSelector {
    /// 1-based ReLU index.
    pub relu_index: usize,
    /// Distinct channel ids in ascending order.
    pub channel_ids: Vec<usize>,
    pub seed: u64,
}

impl ChannelSelector {
    /// Build a selector from explicit channel ids, checked against `model`.
    pub fn new(model: &Model, relu_index: usize, mut channel_ids: Vec<usize>, seed: u64) -> Result<Self> {
        let channels = model.relu_channels(relu_index)?;
        channel_ids.sort_unstable();
        if channel_ids.is_empty() {
            return Err(Error::config("a selector needs at least one channel"));
        }
        if channel_ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("selector channel ids must be distinct"));
        }
        if let Some(&c) = channel_ids.last().filter(|&&c| c >= channels) {
            return Err(Error::config(format!(
                "channel {c} out of range: ReLU {relu_index} has {channels} channels"
            )));
        }
        Ok(ChannelSelector {
            relu_index,
            channel_ids,
            seed,
        })
    }

    pub fn q(&self) -> usize {
        self.channel_ids.len()
    }
}

/// A client's averaged channel sparsities.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityRepresentation {
    pub client_id: usize,
    pub selector: ChannelSelector,
    /// One value per selected channel, in selector order.
    pub values: Vec<f32>,
}

/// Serialised form of a representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationRecord {
    pub client_id: usize,
    pub relu_index: usize,
    pub channel_ids: Vec<usize>,
    pub values: Vec<f32>,
}

impl SparsityRepresentation {
    pub fn record(&self) -> RepresentationRecord {
        RepresentationRecord {
            client_id: self.client_id,
            relu_index: self.selector.relu_index,
            channel_ids: self.selector.channel_ids.clone(),
            values: self.values.clone(),
        }
    }

    /// Bytes a client sends to the server: the values only.
    pub fn payload_bytes(&self) -> usize {
        std::mem::size_of_val(self.values.as_slice())
    }
}

/// Extraction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfeConfig {
    pub relu_index: usize,
    pub q: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PfeConfig {
    fn default() -> Self {
        PfeConfig {
            relu_index: 1,
            q: 30,
            seed: 0,
        }
    }
}

/// Number of exact zeros in a ReLU channel.
fn zero_count(channel: &[f32]) -> Result<usize> {
    let mut zeros = 0;
    for &v in channel {
        if v < 0.0 || v.is_nan() {
            return Err(Error::Contract(format!(
                "channel value {v} is not a ReLU output"
            )));
        }
        if v == 0.0 {
            zeros += 1;
        }
    }
    Ok(zeros)
}

/// Fraction of entries that are exactly zero.
pub fn channel_sparsity(channel: &[f32]) -> Result<f64> {
    if channel.is_empty() {
        return Err(Error::Contract("empty channel".into()));
    }
    Ok(zero_count(channel)? as f64 / channel.len() as f64)
}

/// Draw `q` channels of the `relu_index`-th ReLU by a seeded shuffle.
pub fn select_channels(model: &Model, relu_index: usize, q: usize, seed: u64) -> Result<ChannelSelector> {
    let channels = model.relu_channels(relu_index)?;
    if q == 0 || q > channels {
        return Err(Error::config(format!(
            "cannot select {q} channels: ReLU {relu_index} has {channels}"
        )));
    }
    let mut ids: Vec<usize> = (0..channels).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[stream::CHANNELS, relu_index as u64]));
    ids.shuffle(&mut rng);
    ids.truncate(q);
    ids.sort_unstable();
    Ok(ChannelSelector {
        relu_index,
        channel_ids: ids,
        seed,
    })
}

/// Mean sparsity of every selected channel over the client's training split.
///
/// Zero counts are summed as integers, so the result does not depend on
/// sample order.
pub fn client_representation(
    model: &Model,
    client: &ClientDataset,
    selector: &ChannelSelector,
) -> Result<SparsityRepresentation> {
    let channels = model.relu_channels(selector.relu_index)?;
    if let Some(&c) = selector.channel_ids.iter().find(|&&c| c >= channels) {
        return Err(Error::config(format!(
            "selector channel {c} out of range: ReLU {} has {channels} channels",
            selector.relu_index
        )));
    }
    let samples = client.train.samples();
    if samples.is_empty() {
        return Err(Error::data(format!("client {} has no training data", client.client_id)));
    }
    let mut zeros = vec![0u64; selector.q()];
    let mut per_channel = 0usize;
    for s in samples {
        let map = model.relu_output(&s.input, selector.relu_index)?;
        per_channel = map.channel_layout().1;
        for (z, &c) in zeros.iter_mut().zip(&selector.channel_ids) {
            *z += zero_count(map.channel(c))? as u64;
        }
    }
    let denom = (samples.len() * per_channel) as f64;
    Ok(SparsityRepresentation {
        client_id: client.client_id,
        selector: selector.clone(),
        values: zeros.iter().map(|&z| (z as f64 / denom) as f32).collect(),
    })
}

/// Representations of every client, in client id order.
pub fn federation_representations(
    model: &Model,
    federation: &Federation,
    selector: &ChannelSelector,
) -> Result<Vec<SparsityRepresentation>> {
    federation
        .clients()
        .par_iter()
        .map(|c| client_representation(model, c, selector))
        .collect()
}

/// Upload size of one representation: four bytes per selected channel.
pub fn upload_cost(selector: &ChannelSelector) -> usize {
    selector.q() * 4
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledDataset;
    use crate::nn::{Architecture, Sample};
    use crate::tensor::Tensor;

    fn model() -> Model {
        Architecture::SmallCnn.build(&[1, 6, 6], 3, 1).unwrap()
    }

    #[test]
    fn worked_example_four_by_four() {
        let mut map = vec![1.0f32; 16];
        for v in map.iter_mut().take(9) {
            *v = 0.0;
        }
        assert_eq!(channel_sparsity(&map).unwrap(), 0.5625);
        assert_eq!(channel_sparsity(&[0.0; 4]).unwrap(), 1.0);
        assert_eq!(channel_sparsity(&[0.5; 4]).unwrap(), 0.0);
    }

    #[test]
    fn negative_entries_break_the_contract() {
        assert!(matches!(channel_sparsity(&[0.0, -0.1]), Err(Error::Contract(_))));
    }

    #[test]
    fn full_selection_is_sorted_and_stable() {
        let m = model();
        let all = select_channels(&m, 1, 32, 5).unwrap();
        assert_eq!(all.channel_ids, (0..32).collect::<Vec<_>>());
        assert_eq!(select_channels(&m, 2, 8, 5).unwrap(), select_channels(&m, 2, 8, 5).unwrap());
        assert!(select_channels(&m, 1, 33, 5).is_err());
        assert!(matches!(select_channels(&m, 3, 1, 5), Err(Error::Config(_))));
    }

    #[test]
    fn upload_cost_is_four_bytes_per_channel() {
        let m = model();
        for q in [10, 30] {
            let s = select_channels(&m, 1, q, 0).unwrap();
            assert_eq!(upload_cost(&s), q * 4);
        }
    }

    #[test]
    fn single_sample_representation_equals_its_sparsity() {
        let m = model();
        let x = Tensor::new(vec![1, 6, 6], (0..36).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let client = ClientDataset {
            client_id: 1,
            train: LabeledDataset::new("t", 3, vec![Sample::new(x.clone(), 0)]).unwrap(),
            test: LabeledDataset::new("t", 3, vec![Sample::new(x.clone(), 0)]).unwrap(),
            true_distribution_id: 0,
        };
        let sel = select_channels(&m, 1, 4, 2).unwrap();
        let rep = client_representation(&m, &client, &sel).unwrap();
        let map = m.relu_output(&x, 1).unwrap();
        for (v, &c) in rep.values.iter().zip(&sel.channel_ids) {
            assert_eq!(*v, channel_sparsity(map.channel(c)).unwrap() as f32);
        }
        assert_eq!(rep.payload_bytes(), upload_cost(&sel));
    }
}
