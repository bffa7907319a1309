//! Comparison methods: the untouched global model, per-client fine-tuning,
//! and adaptation over randomly formed groups.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::csm::{group_wise_adaptation, AdaptationConfig, ClientAccuracy, PersonalizationResult};
use crate::data::{ClientDataset, Federation};
use crate::error::{Error, Result};
use crate::fl::{evaluate, local_seed, local_train, LocalSchedule};
use crate::fsc::GroupAssignment;
use crate::nn::Model;
use crate::seed::{self, stream};

/// Accuracy of the global model on every client's test split.
pub fn baseline_accuracy(global: &Model, federation: &Federation) -> Result<Vec<ClientAccuracy>> {
    federation
        .clients()
        .par_iter()
        .map(|c| {
            Ok(ClientAccuracy {
                client_id: c.client_id,
                group_id: None,
                accuracy: evaluate(global, &c.test)?,
            })
        })
        .collect()
}

/// Retrain every parameter of `global` on one client's training data.
pub fn local_finetune(global: &Model, client: &ClientDataset, schedule: &LocalSchedule, seed: u64) -> Result<Model> {
    global.with_params(local_train(global, client, schedule, seed)?)
}

/// Fine-tuning with the same step budget and seed schedule as adaptation:
/// `adaptation_rounds` sessions of `local_epochs` epochs each.
pub fn finetune_matched(global: &Model, client: &ClientDataset, config: &AdaptationConfig) -> Result<Model> {
    config.validate()?;
    let schedule = config.fl_config().schedule();
    let mut model = global.clone();
    for round in 1..=config.adaptation_rounds {
        model = local_finetune(&model, client, &schedule, local_seed(config.seed, round, client.client_id))?;
    }
    Ok(model)
}

/// Matched fine-tuning for every client, evaluated on its own test split.
pub fn finetune_accuracy(
    global: &Model,
    federation: &Federation,
    config: &AdaptationConfig,
) -> Result<Vec<ClientAccuracy>> {
    federation
        .clients()
        .par_iter()
        .map(|c| {
            let m = finetune_matched(global, c, config)?;
            Ok(ClientAccuracy {
                client_id: c.client_id,
                group_id: None,
                accuracy: evaluate(&m, &c.test)?,
            })
        })
        .collect()
}

/// Shuffle clients with `seed` and deal them into `group_count` groups whose
/// sizes differ by at most one.
pub fn random_assignment(client_ids: &[usize], group_count: usize, seed: u64) -> Result<GroupAssignment> {
    if group_count == 0 || group_count > client_ids.len() {
        return Err(Error::config(format!(
            "cannot form {group_count} groups from {} clients",
            client_ids.len()
        )));
    }
    let mut ids = client_ids.to_vec();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[stream::RANDOM_GROUPS]));
    ids.shuffle(&mut rng);
    let (base, extra) = (ids.len() / group_count, ids.len() % group_count);
    let mut groups = Vec::with_capacity(group_count);
    let mut start = 0;
    for g in 0..group_count {
        let size = base + usize::from(g < extra);
        groups.push(ids[start..start + size].to_vec());
        start += size;
    }
    GroupAssignment::from_groups(&groups)
}

/// Adaptation over randomly formed groups.
pub fn random_group_adaptation(
    global: &Model,
    federation: &Federation,
    group_count: usize,
    seed: u64,
    config: &AdaptationConfig,
) -> Result<PersonalizationResult> {
    let ids: Vec<usize> = federation.clients().iter().map(|c| c.client_id).collect();
    let assignment = random_assignment(&ids, group_count, seed)?;
    group_wise_adaptation(global, federation, &assignment, config)
}
