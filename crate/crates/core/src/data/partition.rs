use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClientDataset, Federation, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::Sample;
use crate::tensor::Tensor;

/// Input transform standing in for a visual domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Identity,
    /// `1 - x`.
    Inverted,
    /// Adds 0.5 on every third row and column, clamped to 1.
    Grid,
    /// 3x3 mean filter over in-bounds neighbours.
    Blur,
}

pub const BUILTIN_DOMAINS: [Domain; 4] = [Domain::Identity, Domain::Inverted, Domain::Grid, Domain::Blur];

pub fn apply_domain(domain: Domain, input: &Tensor) -> Tensor {
    let shape = input.shape().to_vec();
    let (c, h, w) = match shape.as_slice() {
        [c, h, w] => (*c, *h, *w),
        _ => (1, 1, input.len()),
    };
    let x = input.data();
    let data = match domain {
        Domain::Identity => x.to_vec(),
        Domain::Inverted => x.iter().map(|v| 1.0 - v).collect(),
        Domain::Grid => (0..c * h * w)
            .map(|i| {
                let (r, col) = ((i / w) % h, i % w);
                let line = r % 3 == 1 || col % 3 == 1;
                if line {
                    (x[i] + 0.5).min(1.0)
                } else {
                    x[i]
                }
            })
            .collect(),
        Domain::Blur => {
            let mut out = vec![0.0f32; x.len()];
            for ch in 0..c {
                for r in 0..h {
                    for col in 0..w {
                        let mut sum = 0.0f32;
                        let mut n = 0.0f32;
                        for rr in r.saturating_sub(1)..(r + 2).min(h) {
                            for cc in col.saturating_sub(1)..(col + 2).min(w) {
                                sum += x[(ch * h + rr) * w + cc];
                                n += 1.0;
                            }
                        }
                        out[(ch * h + r) * w + col] = sum / n;
                    }
                }
            }
            out
        }
    };
    Tensor::from_parts(shape, data)
}

fn class_pools(dataset: &LabeledDataset, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); dataset.class_count()];
    for (i, s) in dataset.samples().iter().enumerate() {
        pools[s.label].push(i);
    }
    for p in &mut pools {
        p.shuffle(rng);
    }
    pools
}

fn subset(dataset: &LabeledDataset, name: String, idx: &[usize], domain: Domain) -> Result<LabeledDataset> {
    let samples = idx
        .iter()
        .map(|&i| {
            let s = &dataset.samples()[i];
            Sample::new(apply_domain(domain, &s.input), s.label)
        })
        .collect();
    LabeledDataset::new(name, dataset.class_count(), samples)
}

/// Label-skew federation: each of `n_types` distribution types owns
/// `classes_per_type` classes disjoint from every other type, and
/// `n_clients / n_types` consecutive clients share a type.
///
/// Every client draws `samples_per_split` train and as many test samples,
/// without replacement and split evenly over its type's classes.
pub fn partition_class_imbalance(
    dataset: &LabeledDataset,
    n_clients: usize,
    n_types: usize,
    classes_per_type: usize,
    samples_per_split: usize,
    seed: u64,
) -> Result<Federation> {
    if n_types == 0 || classes_per_type == 0 || samples_per_split == 0 {
        return Err(Error::config("types, classes per type and split size must be positive"));
    }
    if n_types * classes_per_type > dataset.class_count() {
        return Err(Error::config(format!(
            "{n_types} types x {classes_per_type} classes exceeds the {} available classes",
            dataset.class_count()
        )));
    }
    if n_clients == 0 || n_clients % n_types != 0 {
        return Err(Error::config(format!(
            "{n_clients} clients cannot be divided evenly into {n_types} types"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..dataset.class_count()).collect();
    classes.shuffle(&mut rng);
    let mut pools = class_pools(dataset, &mut rng);
    let per_type = n_clients / n_types;
    // per-class share of one split
    let quota: Vec<usize> = (0..classes_per_type)
        .map(|k| samples_per_split / classes_per_type + usize::from(k < samples_per_split % classes_per_type))
        .collect();

    let mut clients = Vec::with_capacity(n_clients);
    for t in 0..n_types {
        let owned = &classes[t * classes_per_type..(t + 1) * classes_per_type];
        for (k, &c) in owned.iter().enumerate() {
            let need = per_type * 2 * quota[k];
            if pools[c].len() < need {
                return Err(Error::data(format!(
                    "class {c} has {} samples, type {} needs {need}",
                    pools[c].len(),
                    t + 1
                )));
            }
        }
        for _ in 0..per_type {
            let id = clients.len() + 1;
            let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
            for (k, &c) in owned.iter().enumerate() {
                let pool = &mut pools[c];
                train_idx.extend(pool.drain(..quota[k]));
                test_idx.extend(pool.drain(..quota[k]));
            }
            clients.push(ClientDataset {
                client_id: id,
                train: subset(dataset, format!("client{id}-train"), &train_idx, Domain::Identity)?,
                test: subset(dataset, format!("client{id}-test"), &test_idx, Domain::Identity)?,
                true_distribution_id: t,
            });
        }
    }
    Federation::new(clients, n_types)
}

/// Domain-shift federation: all clients see every class, but each block of
/// `clients_per_domain` consecutive clients has its inputs passed through
/// one of the built-in domain transforms.
///
/// The whole dataset is dealt out class by class, so clients receive
/// near-identical class histograms; each client's share is split
/// `train_fraction` / `1 - train_fraction` per class.
pub fn partition_background_difference(
    dataset: &LabeledDataset,
    n_domains: usize,
    clients_per_domain: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Federation> {
    if n_domains == 0 || n_domains > BUILTIN_DOMAINS.len() {
        return Err(Error::config(format!(
            "{n_domains} domains requested, {} built-in transforms available",
            BUILTIN_DOMAINS.len()
        )));
    }
    if clients_per_domain == 0 {
        return Err(Error::config("clients_per_domain must be positive"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("train_fraction must lie in (0, 1)"));
    }
    let n = n_domains * clients_per_domain;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools = class_pools(dataset, &mut rng);
    // per client, per class sample indices
    let mut shares = vec![vec![Vec::new(); dataset.class_count()]; n];
    let mut start = 0;
    for (c, pool) in pools.iter().enumerate() {
        for (j, &i) in pool.iter().enumerate() {
            shares[(start + j) % n][c].push(i);
        }
        start = (start + pool.len()) % n;
    }
    let mut clients = Vec::with_capacity(n);
    for (slot, per_class) in shares.into_iter().enumerate() {
        let domain_idx = slot / clients_per_domain;
        let id = slot + 1;
        let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
        for idx in per_class {
            let n_train = (idx.len() as f64 * train_fraction).round() as usize;
            train_idx.extend_from_slice(&idx[..n_train]);
            test_idx.extend_from_slice(&idx[n_train..]);
        }
        if train_idx.is_empty() || test_idx.is_empty() {
            return Err(Error::data(format!(
                "client {id} received too few samples for a train/test split"
            )));
        }
        let domain = BUILTIN_DOMAINS[domain_idx];
        clients.push(ClientDataset {
            client_id: id,
            train: subset(dataset, format!("client{id}-train"), &train_idx, domain)?,
            test: subset(dataset, format!("client{id}-test"), &test_idx, domain)?,
            true_distribution_id: domain_idx,
        });
    }
    Federation::new(clients, n_domains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, GlyphConfig};

    fn glyphs(per_class: usize) -> LabeledDataset {
        generate(&GlyphConfig {
            size: 8,
            per_class,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn class_imbalance_matches_table_shape() {
        let ds = glyphs(500);
        let fed = partition_class_imbalance(&ds, 25, 5, 2, 100, 9).unwrap();
        assert_eq!(fed.len(), 25);
        for c in fed.clients() {
            assert_eq!(c.train.len(), 100);
            assert_eq!(c.test.len(), 100);
            assert_eq!(c.true_distribution_id, (c.client_id - 1) / 5);
            assert_eq!(c.train.label_support(), c.test.label_support());
            assert_eq!(c.train.label_support().len(), 2);
        }
        let mut all: Vec<usize> = (0..5)
            .flat_map(|t| fed.clients()[t * 5].train.label_support())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn single_type_shares_support() {
        let ds = glyphs(100);
        let fed = partition_class_imbalance(&ds, 4, 1, 2, 20, 1).unwrap();
        let s0 = fed.clients()[0].train.label_support();
        assert!(fed.clients().iter().all(|c| c.train.label_support() == s0));
    }

    #[test]
    fn short_class_is_named() {
        let ds = glyphs(30);
        let err = partition_class_imbalance(&ds, 25, 5, 2, 100, 0).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("class")), "{err}");
        assert!(partition_class_imbalance(&ds, 24, 5, 2, 10, 0).is_err());
        assert!(partition_class_imbalance(&ds, 10, 5, 3, 10, 0).is_err());
    }

    #[test]
    fn background_difference_shape_and_identity_domain() {
        let ds = glyphs(100);
        let fed = partition_background_difference(&ds, 4, 5, 0.8, 3).unwrap();
        assert_eq!(fed.len(), 20);
        assert_eq!(fed.distribution_type_count(), 4);
        for c in fed.clients() {
            assert_eq!(c.train.label_support().len(), 10);
            assert_eq!(c.train.len(), 40);
            assert_eq!(c.test.len(), 10);
        }
        // domain 1 is untouched: every train sample exists verbatim in the source
        for c in &fed.clients()[..5] {
            for s in c.train.samples() {
                assert!(ds.samples().contains(s));
            }
        }
        assert!(partition_background_difference(&ds, 5, 5, 0.8, 3).is_err());
    }

    #[test]
    fn domain_transforms() {
        let x = Tensor::new(vec![1, 3, 3], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 0.1, 0.3, 0.9]).unwrap();
        assert_eq!(apply_domain(Domain::Identity, &x), x);
        let inv = apply_domain(Domain::Inverted, &x);
        assert!((inv.data()[1] - 0.8).abs() < 1e-6);
        let grid = apply_domain(Domain::Grid, &x);
        assert_eq!(grid.data()[0], 0.0);
        assert!((grid.data()[1] - 0.7).abs() < 1e-6);
        let blur = apply_domain(Domain::Blur, &x);
        let centre: f32 = x.data().iter().sum::<f32>() / 9.0;
        assert!((blur.data()[4] - centre).abs() < 1e-6);
        assert!((blur.data()[0] - (0.0 + 0.2 + 0.6 + 0.8) / 4.0).abs() < 1e-6);
    }
}
