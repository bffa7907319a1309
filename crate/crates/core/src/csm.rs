//! Group-wise federated adaptation of the global model, and the full
//! extraction, grouping and adaptation pipeline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{cell, ArtifactWriter};
use crate::baselines::baseline_accuracy;
use crate::data::{ClientDataset, Federation};
use crate::error::{Error, Result, StageExt};
use crate::fl::{evaluate, federated_rounds, run_federated_learning, FLConfig, RoundMetrics};
use crate::fsc::{
    anchor_vector, cluster_purity, full_matrix, group_clients, AnchorSimilarityVector, GroupAssignment,
    GroupingInput, SimilarityMatrix,
};
use crate::nn::{checkpoint, Architecture, Model};
use crate::pfe::{federation_representations, select_channels, ChannelSelector, PfeConfig, SparsityRepresentation};

/// Settings for the adaptation phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub adaptation_rounds: usize,
    pub local_epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            adaptation_rounds: 30,
            local_epochs: 1,
            lr: 0.01,
            momentum: 0.5,
            batch_size: 10,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adaptation_rounds == 0 {
            return Err(Error::config("adaptation_rounds must be at least 1"));
        }
        self.fl_config().validate()
    }

    /// The FedAvg settings each group runs with.
    pub fn fl_config(&self) -> FLConfig {
        FLConfig {
            rounds: self.adaptation_rounds,
            local_epochs: self.local_epochs,
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed: self.seed,
            client_fraction: 1.0,
            eval_every: 0,
        }
    }
}

/// A client's test accuracy under some method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientAccuracy {
    pub client_id: usize,
    pub group_id: Option<usize>,
    pub accuracy: f64,
}

pub fn mean_accuracy(acc: &[ClientAccuracy]) -> f64 {
    acc.iter().map(|a| a.accuracy).sum::<f64>() / acc.len().max(1) as f64
}

/// Adapted models, one per group.
#[derive(Debug, Clone)]
pub struct PersonalizationResult {
    pub assignment: GroupAssignment,
    pub group_models: Vec<Model>,
    pub group_histories: Vec<Vec<RoundMetrics>>,
    /// Each client's accuracy on its own test split, in client id order.
    pub client_accuracies: Vec<ClientAccuracy>,
}

impl PersonalizationResult {
    pub fn model_for(&self, client_id: usize) -> Option<&Model> {
        self.assignment.group_of(client_id).map(|g| &self.group_models[g])
    }

    pub fn accuracy_of(&self, client_id: usize) -> Option<f64> {
        self.client_accuracies
            .iter()
            .find(|a| a.client_id == client_id)
            .map(|a| a.accuracy)
    }

    pub fn mean_accuracy(&self) -> f64 {
        mean_accuracy(&self.client_accuracies)
    }
}

/// Run FedAvg from `global` separately inside every group.
pub fn group_wise_adaptation(
    global: &Model,
    federation: &Federation,
    assignment: &GroupAssignment,
    config: &AdaptationConfig,
) -> Result<PersonalizationResult> {
    config.validate()?;
    let ids: Vec<usize> = federation.clients().iter().map(|c| c.client_id).collect();
    if assignment.client_ids() != ids {
        return Err(Error::config("group assignment does not cover exactly the federation's clients"));
    }
    let fl = config.fl_config();
    let adapted: Vec<(Model, Vec<RoundMetrics>)> = (0..assignment.group_count)
        .into_par_iter()
        .map(|g| {
            let members: Vec<&ClientDataset> = assignment
                .members(g)
                .into_iter()
                .map(|id| federation.client(id).expect("assignment checked against federation"))
                .collect();
            federated_rounds(global, &members, &fl)
        })
        .collect::<Result<_>>()?;
    let (group_models, group_histories): (Vec<Model>, Vec<Vec<RoundMetrics>>) = adapted.into_iter().unzip();
    let client_accuracies = federation
        .clients()
        .par_iter()
        .map(|c| {
            let g = assignment.group_of(c.client_id).expect("checked above");
            Ok(ClientAccuracy {
                client_id: c.client_id,
                group_id: Some(g),
                accuracy: evaluate(&group_models[g], &c.test)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PersonalizationResult {
        assignment: assignment.clone(),
        group_models,
        group_histories,
        client_accuracies,
    })
}

/// Which similarity structure drives grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FscMethod {
    Anchor,
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FscConfig {
    pub method: FscMethod,
    pub expected_groups: Option<usize>,
    pub epsilon: Option<f64>,
    #[serde(skip)]
    pub anchor_seed: u64,
}

impl Default for FscConfig {
    fn default() -> Self {
        FscConfig {
            method: FscMethod::Anchor,
            expected_groups: None,
            epsilon: None,
            anchor_seed: 0,
        }
    }
}

/// Everything the pipeline produced.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub global: Model,
    pub fl_history: Vec<RoundMetrics>,
    pub selector: ChannelSelector,
    pub representations: Vec<SparsityRepresentation>,
    pub matrix: SimilarityMatrix,
    pub anchor: AnchorSimilarityVector,
    pub assignment: GroupAssignment,
    pub baseline: Vec<ClientAccuracy>,
    pub result: PersonalizationResult,
}

#[derive(Serialize)]
struct SimilarityArtifact<'a> {
    matrix: &'a SimilarityMatrix,
    anchor: &'a AnchorSimilarityVector,
}

#[derive(Serialize)]
struct GroupsArtifact<'a> {
    method: FscMethod,
    assignment: &'a GroupAssignment,
    purity: f64,
}

/// Representations, similarities and grouping on an already trained global model.
pub fn extract_and_group(
    global: &Model,
    federation: &Federation,
    pfe: &PfeConfig,
    fsc: &FscConfig,
) -> Result<(ChannelSelector, Vec<SparsityRepresentation>, SimilarityMatrix, AnchorSimilarityVector, GroupAssignment)>
{
    let (selector, reps) = (|| {
        let selector = select_channels(global, pfe.relu_index, pfe.q, pfe.seed)?;
        let reps = federation_representations(global, federation, &selector)?;
        Ok::<_, Error>((selector, reps))
    })()
    .stage("pfe")?;
    let (matrix, anchor, assignment) = (|| {
        let matrix = full_matrix(&reps)?;
        let anchor = anchor_vector(&reps, fsc.anchor_seed)?;
        let input = match fsc.method {
            FscMethod::Anchor => GroupingInput::Anchor(&anchor),
            FscMethod::Matrix => GroupingInput::Matrix(&matrix),
        };
        let assignment = group_clients(input, fsc.expected_groups, fsc.epsilon)?;
        Ok::<_, Error>((matrix, anchor, assignment))
    })()
    .stage("fsc")?;
    Ok((selector, reps, matrix, anchor, assignment))
}

/// Federated learning, feature extraction, grouping and group-wise adaptation
/// in sequence. With a writer, every intermediate result is persisted.
pub fn run_pfa_pipeline(
    federation: &Federation,
    arch: Architecture,
    fl_config: &FLConfig,
    pfe: &PfeConfig,
    fsc: &FscConfig,
    adaptation: &AdaptationConfig,
    mut writer: Option<&mut ArtifactWriter>,
) -> Result<PipelineOutput> {
    let (global, fl_history) = run_federated_learning(federation, arch, fl_config).stage("fl")?;
    if let Some(w) = writer.as_deref_mut() {
        (|| {
            w.write_bytes("global_model.bin", &checkpoint::encode(&global))?;
            write_fl_history(w, "fl_history.csv", &fl_history)?;
            write_timing(w, "timing.csv", &[("fl", &fl_history)])
        })()
        .stage("persist")?;
    }
    let (selector, representations, matrix, anchor, assignment) =
        extract_and_group(&global, federation, pfe, fsc)?;
    if let Some(w) = writer.as_deref_mut() {
        (|| {
            let records: Vec<_> = representations.iter().map(SparsityRepresentation::record).collect();
            w.write_json("representations.json", &records)?;
            w.write_json("similarity.json", &SimilarityArtifact { matrix: &matrix, anchor: &anchor })?;
            w.write_bytes("similarity.csv", matrix.to_csv().as_bytes())?;
            let truth = federation.clients().iter().map(|c| (c.client_id, c.true_distribution_id)).collect();
            w.write_json(
                "groups.json",
                &GroupsArtifact {
                    method: fsc.method,
                    assignment: &assignment,
                    purity: cluster_purity(&assignment, &truth)?,
                },
            )?;
            Ok::<_, Error>(())
        })()
        .stage("persist")?;
    }
    let (result, baseline) = (|| {
        let result = group_wise_adaptation(&global, federation, &assignment, adaptation)?;
        let baseline = baseline_accuracy(&global, federation)?;
        Ok::<_, Error>((result, baseline))
    })()
    .stage("csm")?;
    if let Some(w) = writer {
        (|| {
            for (g, m) in result.group_models.iter().enumerate() {
                w.write_bytes(&format!("models/group_{g}.bin"), &checkpoint::encode(m))?;
            }
            let rows: Vec<Vec<String>> = result
                .client_accuracies
                .iter()
                .zip(&baseline)
                .map(|(a, b)| {
                    vec![
                        a.client_id.to_string(),
                        cell(a.group_id),
                        format!("{:.2}", 100.0 * b.accuracy),
                        format!("{:.2}", 100.0 * a.accuracy),
                    ]
                })
                .collect();
            w.write_csv("adaptation.csv", &["client_id", "group_id", "baseline_acc", "adapted_acc"], &rows)?;
            Ok::<_, Error>(())
        })()
        .stage("persist")?;
    }
    Ok(PipelineOutput {
        global,
        fl_history,
        selector,
        representations,
        matrix,
        anchor,
        assignment,
        baseline,
        result,
    })
}

/// Round-by-round metrics, one row per (round, client).
pub fn write_fl_history(w: &mut ArtifactWriter, name: &str, history: &[RoundMetrics]) -> Result<()> {
    let mut rows = Vec::new();
    for r in history {
        for c in &r.clients {
            rows.push(vec![
                r.round.to_string(),
                c.client_id.to_string(),
                cell(c.train_loss),
                cell(c.train_accuracy),
                cell(c.test_loss),
                cell(c.test_accuracy),
            ]);
        }
    }
    w.write_csv(
        name,
        &["round", "client_id", "train_loss", "train_accuracy", "test_loss", "test_accuracy"],
        &rows,
    )?;
    Ok(())
}

/// Wall-clock seconds per round, kept apart from the reproducible outputs.
pub fn write_timing(w: &mut ArtifactWriter, name: &str, stages: &[(&str, &[RoundMetrics])]) -> Result<()> {
    let mut text = String::from("stage,round,wall_seconds\n");
    for (stage, history) in stages {
        for r in *history {
            text.push_str(&format!("{stage},{},{}\n", r.round, r.wall_seconds));
        }
    }
    w.write_volatile(name, text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::finetune_matched;
    use crate::data::partition_class_imbalance;
    use crate::data::synthetic::{generate, GlyphConfig};
    use crate::fl::continue_federated_learning;

    fn tiny() -> (Federation, Model) {
        let ds = generate(&GlyphConfig {
            size: 8,
            per_class: 20,
            ..Default::default()
        })
        .unwrap();
        let fed = partition_class_imbalance(&ds, 4, 2, 2, 6, 1).unwrap();
        let m = Architecture::Mlp.build(&[1, 8, 8], 10, 3).unwrap();
        (fed, m)
    }

    fn cfg() -> AdaptationConfig {
        AdaptationConfig {
            adaptation_rounds: 2,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn singleton_groups_equal_matched_finetuning() {
        let (fed, m) = tiny();
        let groups: Vec<Vec<usize>> = (1..=4).map(|i| vec![i]).collect();
        let a = GroupAssignment::from_groups(&groups).unwrap();
        let r = group_wise_adaptation(&m, &fed, &a, &cfg()).unwrap();
        for c in fed.clients() {
            let ft = finetune_matched(&m, c, &cfg()).unwrap();
            assert_eq!(r.model_for(c.client_id).unwrap().params(), ft.params());
        }
    }

    #[test]
    fn one_group_equals_continued_federated_learning() {
        let (fed, m) = tiny();
        let a = GroupAssignment::from_groups(&[vec![1, 2, 3, 4]]).unwrap();
        let r = group_wise_adaptation(&m, &fed, &a, &cfg()).unwrap();
        let (cont, _) = continue_federated_learning(&m, &fed, &cfg().fl_config()).unwrap();
        assert_eq!(r.group_models[0].params(), cont.params());
    }

    #[test]
    fn assignment_must_cover_federation() {
        let (fed, m) = tiny();
        let a = GroupAssignment::from_groups(&[vec![1, 2, 3]]).unwrap();
        assert!(matches!(group_wise_adaptation(&m, &fed, &a, &cfg()), Err(Error::Config(_))));
        let bad = AdaptationConfig {
            adaptation_rounds: 0,
            ..cfg()
        };
        let a = GroupAssignment::from_groups(&[vec![1, 2, 3, 4]]).unwrap();
        assert!(group_wise_adaptation(&m, &fed, &a, &bad).is_err());
    }

    #[test]
    fn pipeline_errors_name_their_stage() {
        let (fed, _) = tiny();
        let pfe = PfeConfig {
            relu_index: 9,
            ..Default::default()
        };
        let fl = FLConfig {
            rounds: 1,
            ..Default::default()
        };
        let err = run_pfa_pipeline(&fed, Architecture::Mlp, &fl, &pfe, &FscConfig::default(), &cfg(), None)
            .unwrap_err();
        assert_eq!(err.stage(), Some("pfe"));
    }
}
