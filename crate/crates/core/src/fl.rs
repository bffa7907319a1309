//! Classical federated learning: local SGD on each client, FedAvg on the server.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Federation, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{sgd_step, softmax_cross_entropy, Architecture, Model, ModelParams, Sample};
use crate::seed::{self, stream};

/// Settings for the federated-learning phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FLConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    #[serde(skip)]
    pub seed: u64,
    pub client_fraction: f64,
    /// Evaluate the global model on every client's test split each
    /// `eval_every` rounds; the final round is always evaluated. 0 means final only.
    pub eval_every: usize,
}

impl Default for FLConfig {
    fn default() -> Self {
        FLConfig {
            rounds: 50,
            local_epochs: 1,
            lr: 0.01,
            momentum: 0.5,
            batch_size: 10,
            seed: 0,
            client_fraction: 1.0,
            eval_every: 1,
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::config("client_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LocalSchedule {
        LocalSchedule {
            epochs: self.local_epochs,
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
        }
    }
}

/// Hyperparameters of one local training session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalSchedule {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
}

/// Locally trained parameters with running training statistics.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// Mean batch loss over the last epoch (NaN when no step ran).
    pub train_loss: f32,
    /// Fraction of correctly classified samples during the last epoch.
    pub train_accuracy: f64,
}

/// Train a copy of `model` on the client's training split.
pub fn local_train(
    model: &Model,
    client: &ClientDataset,
    schedule: &LocalSchedule,
    seed: u64,
) -> Result<ModelParams> {
    Ok(local_train_with_stats(model, &client.train, schedule, seed)?.params)
}

/// [`local_train`] on an arbitrary dataset, returning training statistics too.
///
/// Each epoch reshuffles with a generator seeded once from `seed`; the
/// momentum buffer starts at zero.
pub fn local_train_with_stats(
    model: &Model,
    data: &LabeledDataset,
    schedule: &LocalSchedule,
    seed: u64,
) -> Result<LocalOutcome> {
    if data.is_empty() {
        return Err(Error::data(format!("{}: empty training set", data.name())));
    }
    if schedule.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut local = model.clone();
    let mut velocity = vec![0.0f32; local.param_count()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (mut last_loss, mut last_acc) = (f32::NAN, f64::NAN);
    for _ in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(schedule.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples()[i]).collect();
            let g = local.batch_gradient(&batch)?;
            loss_sum += g.loss as f64;
            correct += g.correct;
            batches += 1;
            sgd_step(
                local.params_mut().flat_mut(),
                &g.grads,
                &mut velocity,
                schedule.lr,
                schedule.momentum,
            )?;
        }
        last_loss = (loss_sum / batches as f64) as f32;
        last_acc = correct as f64 / data.len() as f64;
    }
    Ok(LocalOutcome {
        params: local.params().clone(),
        train_loss: last_loss,
        train_accuracy: last_acc,
    })
}

/// Weighted element-wise mean of parameter vectors.
///
/// Products are accumulated in `f64` in input order and divided by the weight
/// total once, so identical inputs reproduce themselves bit for bit.
pub fn fedavg(params_list: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = params_list
        .first()
        .ok_or_else(|| Error::internal("fedavg over no parameter vectors"))?;
    if weights.len() != params_list.len() {
        return Err(Error::internal(format!(
            "fedavg got {} weights for {} parameter vectors",
            weights.len(),
            params_list.len()
        )));
    }
    if let Some(p) = params_list.iter().find(|p| p.len() != first.len()) {
        return Err(Error::internal(format!(
            "fedavg length mismatch: {} vs {}",
            p.len(),
            first.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::config("fedavg weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::config("fedavg weights sum to zero"));
    }
    let mut acc = vec![0.0f64; first.len()];
    for (p, &w) in params_list.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(p.flat()) {
            *a += w * v as f64;
        }
    }
    first.with_values(acc.into_iter().map(|a| (a / total) as f32).collect())
}

/// Fraction of samples whose arg-max logit (lowest index on ties) matches the label.
pub fn evaluate(model: &Model, dataset: &LabeledDataset) -> Result<f64> {
    Ok(evaluate_with_loss(model, dataset)?.accuracy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate_with_loss(model: &Model, dataset: &LabeledDataset) -> Result<EvalStats> {
    if dataset.is_empty() {
        return Err(Error::data(format!("{}: nothing to evaluate", dataset.name())));
    }
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for s in dataset.samples() {
        let logits = model.predict(&s.input)?;
        if s.label >= logits.len() {
            return Err(Error::data(format!("label {} outside model outputs", s.label)));
        }
        if logits.argmax() == s.label {
            correct += 1;
        }
        loss += softmax_cross_entropy(logits.data(), s.label).0 as f64;
    }
    let n = dataset.len() as f64;
    Ok(EvalStats {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// One client's numbers for one round. Train figures come from local
/// training (absent if the client sat the round out); test figures from the
/// aggregated model (absent on rounds without evaluation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundMetrics {
    pub client_id: usize,
    pub train_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based.
    pub round: usize,
    pub clients: Vec<ClientRoundMetrics>,
    pub mean_train_accuracy: Option<f64>,
    pub mean_test_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Client ids taking part in `round`: `ceil(fraction * n)` of them, drawn by a
/// shuffle keyed on `(seed, round)`, returned in ascending id order.
pub fn sample_clients(ids: &[usize], fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    let m = ((fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len());
    if m == ids.len() {
        return ids.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[stream::SAMPLING, round as u64]));
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng);
    let mut chosen = shuffled[..m].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Seed of a client's local session in a given round.
pub fn local_seed(seed: u64, round: usize, client_id: usize) -> u64 {
    seed::derive(seed, &[stream::LOCAL, round as u64, client_id as u64])
}

/// FedAvg rounds over `clients`, starting from `start`.
///
/// Aggregation weights are train-set sizes; participants are aggregated in
/// ascending client id order, so results do not depend on thread scheduling.
pub fn federated_rounds(
    start: &Model,
    clients: &[&ClientDataset],
    config: &FLConfig,
) -> Result<(Model, Vec<RoundMetrics>)> {
    config.validate()?;
    if clients.is_empty() {
        return Err(Error::data("no clients to train"));
    }
    let mut sorted: Vec<&ClientDataset> = clients.to_vec();
    sorted.sort_by_key(|c| c.client_id);
    let ids: Vec<usize> = sorted.iter().map(|c| c.client_id).collect();
    let schedule = config.schedule();
    let mut global = start.clone();
    let mut history = Vec::with_capacity(config.rounds);

    for round in 1..=config.rounds {
        let t0 = Instant::now();
        let chosen = sample_clients(&ids, config.client_fraction, config.seed, round);
        let participants: Vec<&ClientDataset> = sorted
            .iter()
            .copied()
            .filter(|c| chosen.binary_search(&c.client_id).is_ok())
            .collect();
        let outcomes: Vec<LocalOutcome> = participants
            .par_iter()
            .map(|c| {
                local_train_with_stats(
                    &global,
                    &c.train,
                    &schedule,
                    local_seed(config.seed, round, c.client_id),
                )
                .map_err(|e| Error::data(format!("client {}: {e}", c.client_id)))
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&ModelParams> = outcomes.iter().map(|o| &o.params).collect();
        let weights: Vec<f64> = participants.iter().map(|c| c.train.len() as f64).collect();
        global.set_params(fedavg(&refs, &weights)?)?;

        let evaluate_now =
            round == config.rounds || (config.eval_every > 0 && round % config.eval_every == 0);
        let tests: Vec<Option<EvalStats>> = if evaluate_now {
            sorted
                .par_iter()
                .map(|c| evaluate_with_loss(&global, &c.test).map(Some))
                .collect::<Result<_>>()?
        } else {
            vec![None; sorted.len()]
        };
        let clients_metrics: Vec<ClientRoundMetrics> = sorted
            .iter()
            .zip(&tests)
            .map(|(c, t)| {
                let trained = participants
                    .iter()
                    .position(|p| p.client_id == c.client_id)
                    .map(|i| &outcomes[i]);
                ClientRoundMetrics {
                    client_id: c.client_id,
                    train_loss: trained.map(|o| o.train_loss as f64),
                    train_accuracy: trained.map(|o| o.train_accuracy),
                    test_loss: t.map(|t| t.loss),
                    test_accuracy: t.map(|t| t.accuracy),
                }
            })
            .collect();
        history.push(RoundMetrics {
            round,
            mean_train_accuracy: mean(clients_metrics.iter().filter_map(|m| m.train_accuracy)),
            mean_test_accuracy: mean(clients_metrics.iter().filter_map(|m| m.test_accuracy)),
            clients: clients_metrics,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok((global, history))
}

/// Train a freshly initialised `arch` model with FedAvg over the whole federation.
pub fn run_federated_learning(
    federation: &Federation,
    arch: Architecture,
    config: &FLConfig,
) -> Result<(Model, Vec<RoundMetrics>)> {
    let shape = federation
        .input_shape()
        .ok_or_else(|| Error::data("federation has no samples"))?;
    let init = arch.build(
        shape,
        federation.class_count(),
        seed::derive(config.seed, &[stream::INIT]),
    )?;
    let clients: Vec<&ClientDataset> = federation.clients().iter().collect();
    federated_rounds(&init, &clients, config)
}

/// Continue FedAvg from an existing model over the whole federation.
pub fn continue_federated_learning(
    start: &Model,
    federation: &Federation,
    config: &FLConfig,
) -> Result<(Model, Vec<RoundMetrics>)> {
    let clients: Vec<&ClientDataset> = federation.clients().iter().collect();
    federated_rounds(start, &clients, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params(v: &[f32]) -> ModelParams {
        ModelParams::new(v.to_vec(), vec![(0, v.len())]).unwrap()
    }

    #[test]
    fn fedavg_of_identical_inputs_is_bitwise_identity() {
        let p = params(&[0.1, -3.7, 1e-8, 12345.678, f32::MIN_POSITIVE]);
        let out = fedavg(&[&p, &p, &p], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out.flat(), p.flat());
        let out = fedavg(&[&p, &p, &p], &[100.0, 37.0, 3.0]).unwrap();
        assert_eq!(out.flat(), p.flat());
    }

    #[test]
    fn fedavg_two_party_mean() {
        let a = params(&[1.0, 2.0, -4.0]);
        let b = params(&[3.0, -2.0, 5.0]);
        let out = fedavg(&[&a, &b], &[1.0, 1.0]).unwrap();
        assert_eq!(out.flat(), &[2.0, 0.0, 0.5]);
    }

    #[test]
    fn fedavg_rejects_bad_input() {
        let a = params(&[1.0, 2.0]);
        let b = params(&[1.0]);
        assert!(matches!(fedavg(&[&a, &b], &[1.0, 1.0]), Err(Error::Internal(_))));
        assert!(matches!(fedavg(&[&a, &a], &[0.0, 0.0]), Err(Error::Config(_))));
        assert!(fedavg(&[], &[]).is_err());
    }

    #[test]
    fn sampling_is_sorted_deterministic_and_sized() {
        let ids: Vec<usize> = (1..=25).collect();
        let a = sample_clients(&ids, 0.3, 5, 2);
        assert_eq!(a.len(), 8);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, sample_clients(&ids, 0.3, 5, 2));
        assert_ne!(a, sample_clients(&ids, 0.3, 5, 3));
        assert_eq!(sample_clients(&ids, 1.0, 5, 2), ids);
    }

    #[test]
    fn constant_logits_accuracy_is_class_zero_frequency() {
        use crate::nn::LayerSpec;
        let m = Model::new(vec![2], vec![LayerSpec::Dense { inputs: 2, outputs: 3 }], vec![0.0; 9])
            .unwrap();
        let labels = [0, 1, 0, 2, 2, 0, 1];
        let samples = labels
            .iter()
            .map(|&y| Sample::new(Tensor::new(vec![2], vec![0.3, -1.0]).unwrap(), y))
            .collect();
        let ds = LabeledDataset::new("t", 3, samples).unwrap();
        assert!((evaluate(&m, &ds).unwrap() - 3.0 / 7.0).abs() < 1e-12);
    }
}
