//! Experiment driver: configuration, orchestration and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::artifacts::{csv_text, sha256_hex, ArtifactEntry, ArtifactWriter};
use crate::baselines::{finetune_accuracy, random_group_adaptation};
use crate::csm::{
    group_wise_adaptation, run_pfa_pipeline, AdaptationConfig, ClientAccuracy, FscConfig, PipelineOutput,
};
use crate::data::synthetic::{generate, GlyphConfig};
use crate::data::{
    idx, partition_background_difference, partition_class_imbalance, Federation, LabeledDataset,
};
use crate::error::{Error, Result, StageExt};
use crate::fl::{local_train_with_stats, run_federated_learning, FLConfig, LocalSchedule};
use crate::fsc::{euclidean, GroupAssignment};
use crate::nn::{Architecture, Model};
use crate::pfe::{client_representation, select_channels, upload_cost, PfeConfig};
use crate::privacy::{invert, pgm_grid, InversionConfig, InversionReport, InversionTarget, PropertyKind};
use crate::seed::{self, stream};

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Procedural glyphs; the generator seed derives from the run seed.
    Glyphs(GlyphConfig),
    /// An IDX image file and its label file.
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FederationSpec {
    ClassImbalance {
        clients: usize,
        types: usize,
        classes_per_type: usize,
        samples_per_split: usize,
    },
    Background {
        domains: usize,
        clients_per_domain: usize,
        train_fraction: f64,
    },
}

impl FederationSpec {
    pub fn type_count(&self) -> usize {
        match self {
            FederationSpec::ClassImbalance { types, .. } => *types,
            FederationSpec::Background { domains, .. } => *domains,
        }
    }
}

/// Per-client accuracy sources that can be compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// The global model, untouched.
    Baseline,
    /// Matched-budget local fine-tuning.
    Finetune,
    /// Adaptation over randomly formed groups.
    RandomGroup,
    /// Adaptation with every client in one group.
    ExtendedFl,
    /// Adaptation over sparsity-based groups.
    Pfa,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::Finetune,
        Method::RandomGroup,
        Method::ExtendedFl,
        Method::Pfa,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Finetune => "finetune",
            Method::RandomGroup => "random-group",
            Method::ExtendedFl => "extended-fl",
            Method::Pfa => "pfa",
        }
    }

    pub fn file(self) -> String {
        format!("accuracy/{}.csv", self.key())
    }

    /// Column heading in the policy table, for the three grouping policies.
    pub fn policy_label(self) -> Option<&'static str> {
        match self {
            Method::ExtendedFl => Some("federated learning"),
            Method::RandomGroup => Some("random selection"),
            Method::Pfa => Some("sparsity-based selection"),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselinesSpec {
    /// Methods besides the sparsity-based pipeline, which always runs.
    pub methods: Vec<Method>,
    /// Group count for random grouping; defaults to the number of distribution types.
    pub random_groups: Option<usize>,
}

impl Default for BaselinesSpec {
    fn default() -> Self {
        BaselinesSpec {
            methods: vec![Method::Baseline, Method::Finetune, Method::RandomGroup, Method::ExtendedFl],
            random_groups: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySpec {
    /// Architecture of the attacked model, trained centrally on the pooled training splits.
    pub architecture: Architecture,
    pub train_epochs: usize,
    pub train_lr: f32,
    pub relu_indices: Vec<usize>,
    pub properties: Vec<PropertyKind>,
    /// Number of test images to reconstruct per (property, layer).
    pub references: usize,
    pub beta: f32,
    pub attack: InversionConfig,
}

impl Default for PrivacySpec {
    fn default() -> Self {
        PrivacySpec {
            architecture: Architecture::DeepCnn,
            train_epochs: 3,
            train_lr: 0.05,
            relu_indices: vec![1, 2, 4],
            properties: PropertyKind::ALL.to_vec(),
            references: 6,
            beta: 50.0,
            attack: InversionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub relu_indices: Vec<usize>,
    pub q_values: Vec<usize>,
}

/// A complete experiment. Every random stream derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub architecture: Architecture,
    pub dataset: DatasetSpec,
    pub federation: FederationSpec,
    #[serde(default)]
    pub fl: FLConfig,
    #[serde(default)]
    pub pfe: PfeConfig,
    #[serde(default)]
    pub fsc: FscConfig,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
    #[serde(default)]
    pub baselines: BaselinesSpec,
    #[serde(default)]
    pub privacy: Option<PrivacySpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    /// Set the run seed and every stage seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.fl.seed = seed;
        self.pfe.seed = seed;
        self.fsc.anchor_seed = seed;
        self.adaptation.seed = seed;
        if let DatasetSpec::Glyphs(g) = &mut self.dataset {
            g.seed = seed::derive(seed, &[stream::DATA]);
        }
        if let Some(p) = &mut self.privacy {
            p.attack.seed = seed;
        }
    }

    /// Hex SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serialises"))
    }

    /// Checks that need no training: paths exist, counts are consistent and
    /// the extraction settings fit the architecture.
    pub fn validate(&self) -> Result<()> {
        let shape = match &self.dataset {
            DatasetSpec::Glyphs(g) => {
                if g.per_class == 0 {
                    return Err(Error::config("dataset.per_class must be positive"));
                }
                vec![1, g.size, g.size]
            }
            DatasetSpec::Idx { images, labels } => {
                for p in [images, labels] {
                    if !p.is_file() {
                        return Err(Error::config(format!("dataset file {} does not exist", p.display())));
                    }
                }
                let header = fs::read(images)?;
                let head = idx::parse_images(&header)?;
                vec![1, head.rows, head.cols]
            }
        };
        self.fl.validate()?;
        self.adaptation.validate()?;
        let types = self.federation.type_count();
        let n = match &self.federation {
            FederationSpec::ClassImbalance { clients, .. } => *clients,
            FederationSpec::Background {
                domains,
                clients_per_domain,
                ..
            } => domains * clients_per_domain,
        };
        if n < 2 {
            return Err(Error::config("a federation needs at least two clients"));
        }
        let probe = self.architecture.build(&shape, 2, 0)?;
        let channels = probe.relu_channels(self.pfe.relu_index)?;
        if self.pfe.q == 0 || self.pfe.q > channels {
            return Err(Error::config(format!(
                "pfe.q = {} but ReLU {} of {} has {channels} channels",
                self.pfe.q, self.pfe.relu_index, self.architecture
            )));
        }
        if let Some(k) = self.fsc.expected_groups {
            if k == 0 || k > n {
                return Err(Error::config(format!("fsc.expected_groups {k} outside [1, {n}]")));
            }
        }
        let random_groups = self.baselines.random_groups.unwrap_or(types);
        if random_groups == 0 || random_groups > n {
            return Err(Error::config(format!("baselines.random_groups {random_groups} outside [1, {n}]")));
        }
        if let Some(p) = &self.privacy {
            let attacked = p.architecture.build(&shape, 2, 0)?;
            for &k in &p.relu_indices {
                attacked.relu_layer(k)?;
            }
            if p.references == 0 || !(p.beta > 0.0) {
                return Err(Error::config("privacy.references and privacy.beta must be positive"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.relu_indices.is_empty() || s.q_values.is_empty() {
                return Err(Error::config("sweep lists must not be empty"));
            }
        }
        Ok(())
    }
}

/// Load or generate the dataset and partition it.
pub fn build_federation(config: &ExperimentConfig) -> Result<Federation> {
    let dataset: LabeledDataset = match &config.dataset {
        DatasetSpec::Glyphs(g) => generate(g)?,
        DatasetSpec::Idx { images, labels } => idx::load_idx(images, labels)?,
    };
    let seed = seed::derive(config.seed, &[stream::PARTITION]);
    match &config.federation {
        FederationSpec::ClassImbalance {
            clients,
            types,
            classes_per_type,
            samples_per_split,
        } => partition_class_imbalance(&dataset, *clients, *types, *classes_per_type, *samples_per_split, seed),
        FederationSpec::Background {
            domains,
            clients_per_domain,
            train_fraction,
        } => partition_background_difference(&dataset, *domains, *clients_per_domain, *train_fraction, seed),
    }
}

/// One row of an extraction sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub relu_index: usize,
    pub q: usize,
    pub client_id: Option<usize>,
    pub distance: Option<f64>,
    /// `ok`, or why the combination was skipped.
    pub status: String,
}

fn dedup_sorted(v: &[usize]) -> Vec<usize> {
    v.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

/// Distances from the first client's representation to every client's, for
/// each (ReLU index, q) combination. Invalid combinations produce one warning row.
pub fn sweep_on_model(
    model: &Model,
    federation: &Federation,
    relu_indices: &[usize],
    q_values: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let anchor = federation
        .clients()
        .first()
        .ok_or_else(|| Error::data("empty federation"))?;
    for relu in dedup_sorted(relu_indices) {
        for q in dedup_sorted(q_values) {
            let selector = match select_channels(model, relu, q, seed) {
                Ok(s) => s,
                Err(e) => {
                    warn!("sweep: skipping ReLU {relu}, q {q}: {e}");
                    rows.push(SweepRow {
                        relu_index: relu,
                        q,
                        client_id: None,
                        distance: None,
                        status: format!("skipped: {e}"),
                    });
                    continue;
                }
            };
            let base = client_representation(model, anchor, &selector)?;
            for c in federation.clients() {
                let r = client_representation(model, c, &selector)?;
                rows.push(SweepRow {
                    relu_index: relu,
                    q,
                    client_id: Some(c.client_id),
                    distance: Some(euclidean(&base.values, &r.values)),
                    status: "ok".into(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.relu_index.to_string(),
                r.q.to_string(),
                r.client_id.map(|c| c.to_string()).unwrap_or_default(),
                r.distance.map(|d| d.to_string()).unwrap_or_default(),
                r.status.replace(',', ";"),
            ]
        })
        .collect();
    csv_text(&["relu_index", "q", "client_id", "distance", "status"], &body)
}

/// Smallest anchor distance to another type over the largest anchor distance
/// within the anchor's own type, for one sweep cell. `None` when the cell was
/// skipped or either side is empty.
pub fn separation_ratio(rows: &[SweepRow], truth: &BTreeMap<usize, usize>, relu_index: usize, q: usize) -> Option<f64> {
    let cell: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.relu_index == relu_index && r.q == q)
        .filter_map(|r| Some((r.client_id?, r.distance?)))
        .collect();
    let anchor = cell.iter().map(|c| c.0).min()?;
    let own = truth.get(&anchor)?;
    let (mut intra, mut inter) = (None::<f64>, None::<f64>);
    for &(id, d) in &cell {
        if id == anchor {
            continue;
        }
        if truth.get(&id)? == own {
            intra = Some(intra.map_or(d, |m| m.max(d)));
        } else {
            inter = Some(inter.map_or(d, |m| m.min(d)));
        }
    }
    Some(inter? / intra?)
}

fn write_accuracy(
    w: &mut ArtifactWriter,
    method: Method,
    federation: &Federation,
    acc: &[ClientAccuracy],
) -> Result<()> {
    let rows: Vec<Vec<String>> = acc
        .iter()
        .map(|a| {
            let t = federation.client(a.client_id).map(|c| c.true_distribution_id);
            vec![
                a.client_id.to_string(),
                t.map(|t| t.to_string()).unwrap_or_default(),
                a.group_id.map(|g| g.to_string()).unwrap_or_default(),
                format!("{:.2}", 100.0 * a.accuracy),
            ]
        })
        .collect();
    w.write_csv(&method.file(), &["client_id", "true_distribution_id", "group_id", "accuracy"], &rows)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// `complete`, or `failed` with the stage in `failed_stage`.
    pub status: String,
    pub failed_stage: Option<String>,
    pub methods: Vec<Method>,
    pub files: Vec<ArtifactEntry>,
}

pub const MANIFEST: &str = "manifest.json";

fn write_manifest(
    w: &ArtifactWriter,
    config: &ExperimentConfig,
    methods: &[Method],
    failure: Option<&Error>,
) -> Result<()> {
    let manifest = Manifest {
        config_hash: config.hash(),
        seed: config.seed,
        status: if failure.is_some() { "failed" } else { "complete" }.into(),
        failed_stage: failure.and_then(|e| e.stage().map(str::to_string)),
        methods: methods.to_vec(),
        files: w.entries().to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(w.root().join(MANIFEST), text)?;
    Ok(())
}

/// In-memory results of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub federation: Federation,
    pub pipeline: PipelineOutput,
    pub methods: BTreeMap<Method, Vec<ClientAccuracy>>,
    pub sweep: Option<Vec<SweepRow>>,
    pub inversion: Option<Vec<InversionReport>>,
}

#[derive(Serialize)]
struct UploadCost {
    q: usize,
    bytes_per_client: usize,
    clients: usize,
    total_bytes: usize,
    model_parameters: usize,
    model_bytes: usize,
    ratio: f64,
}

/// Run the full experiment and write every artifact under `config.output_dir`.
///
/// The manifest is written last; on failure it records the failing stage and
/// the files produced so far.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let mut writer = ArtifactWriter::create(&config.output_dir)?.with_stamp(config.hash());
    let mut methods_done = Vec::new();
    let result = run_stages(config, &mut writer, &mut methods_done);
    write_manifest(&writer, config, &methods_done, result.as_ref().err())?;
    result
}

fn run_stages(
    config: &ExperimentConfig,
    w: &mut ArtifactWriter,
    methods_done: &mut Vec<Method>,
) -> Result<ExperimentOutcome> {
    info!("building federation");
    let federation = build_federation(config).stage("data")?;
    w.write_json("config.json", config).stage("persist")?;
    w.write_json("federation.json", &federation.manifest(true)).stage("persist")?;

    info!("running federated learning, extraction, grouping and adaptation");
    let pipeline = run_pfa_pipeline(
        &federation,
        config.architecture,
        &config.fl,
        &config.pfe,
        &config.fsc,
        &config.adaptation,
        Some(w),
    )?;
    let global = &pipeline.global;

    let cost = upload_cost(&pipeline.selector);
    w.write_json(
        "upload_cost.json",
        &UploadCost {
            q: pipeline.selector.q(),
            bytes_per_client: cost,
            clients: federation.len(),
            total_bytes: cost * federation.len(),
            model_parameters: global.param_count(),
            model_bytes: global.param_count() * 4,
            ratio: cost as f64 / (global.param_count() * 4) as f64,
        },
    )
    .stage("persist")?;

    let mut methods = BTreeMap::new();
    methods.insert(Method::Pfa, pipeline.result.client_accuracies.clone());
    write_accuracy(w, Method::Pfa, &federation, &pipeline.result.client_accuracies).stage("persist")?;
    methods_done.push(Method::Pfa);

    let mut timing: Vec<(String, Vec<crate::fl::RoundMetrics>)> = Vec::new();
    for &m in &config.baselines.methods {
        if methods.contains_key(&m) {
            continue;
        }
        info!("running {m}");
        let acc = match m {
            Method::Baseline => Ok(pipeline.baseline.clone()),
            Method::Finetune => finetune_accuracy(global, &federation, &config.adaptation),
            Method::RandomGroup => {
                let k = config.baselines.random_groups.unwrap_or(config.federation.type_count());
                random_group_adaptation(global, &federation, k, config.seed, &config.adaptation).map(|r| {
                    timing.extend(r.group_histories.iter().enumerate().map(|(g, h)| (format!("random-group-{g}"), h.clone())));
                    r.client_accuracies
                })
            }
            Method::ExtendedFl => {
                let all = GroupAssignment::from_groups(&[federation.clients().iter().map(|c| c.client_id).collect()]);
                all.and_then(|a| group_wise_adaptation(global, &federation, &a, &config.adaptation))
                    .map(|r| {
                        timing.push(("extended-fl".into(), r.group_histories[0].clone()));
                        r.client_accuracies
                    })
            }
            Method::Pfa => unreachable!("handled above"),
        }
        .stage(m.key())?;
        write_accuracy(w, m, &federation, &acc).stage("persist")?;
        methods_done.push(m);
        methods.insert(m, acc);
    }

    let mut stages: Vec<(String, Vec<crate::fl::RoundMetrics>)> = vec![("fl".into(), pipeline.fl_history.clone())];
    stages.extend(pipeline.result.group_histories.iter().enumerate().map(|(g, h)| (format!("pfa-{g}"), h.clone())));
    stages.extend(timing);
    let refs: Vec<(&str, &[crate::fl::RoundMetrics])> = stages.iter().map(|(s, h)| (s.as_str(), h.as_slice())).collect();
    crate::csm::write_timing(w, "timing.csv", &refs).stage("persist")?;

    let sweep = match &config.sweep {
        Some(s) => {
            info!("running extraction sweep");
            let rows = sweep_on_model(global, &federation, &s.relu_indices, &s.q_values, config.seed).stage("sweep")?;
            w.write_bytes("sweep.csv", sweep_csv(&rows).as_bytes()).stage("persist")?;
            Some(rows)
        }
        None => None,
    };

    let inversion = match &config.privacy {
        Some(p) => Some(run_privacy_on(&federation, p, config.seed, w)?),
        None => None,
    };

    Ok(ExperimentOutcome {
        config_hash: config.hash(),
        output_dir: config.output_dir.clone(),
        federation,
        pipeline,
        methods,
        sweep,
        inversion,
    })
}

/// Federated learning followed by an extraction sweep. Writes `sweep.csv`
/// and a manifest under `config.output_dir`.
pub fn sweep_extraction(config: &ExperimentConfig, relu_indices: &[usize], q_values: &[usize]) -> Result<Vec<SweepRow>> {
    let mut config = config.clone();
    config.sweep = Some(SweepSpec {
        relu_indices: relu_indices.to_vec(),
        q_values: q_values.to_vec(),
    });
    config.validate()?;
    let mut w = ArtifactWriter::create(&config.output_dir)?.with_stamp(config.hash());
    let result = (|| {
        let federation = build_federation(&config).stage("data")?;
        let (global, _) = run_federated_learning(&federation, config.architecture, &config.fl).stage("fl")?;
        let rows = sweep_on_model(&global, &federation, relu_indices, q_values, config.seed).stage("sweep")?;
        w.write_bytes("sweep.csv", sweep_csv(&rows).as_bytes()).stage("persist")?;
        Ok(rows)
    })();
    write_manifest(&w, &config, &[], result.as_ref().err())?;
    result
}

/// Train the attack model and run every configured inversion.
pub fn run_privacy(config: &ExperimentConfig) -> Result<Vec<InversionReport>> {
    config.validate()?;
    let spec = config
        .privacy
        .clone()
        .ok_or_else(|| Error::config("the configuration has no [privacy] section"))?;
    let mut w = ArtifactWriter::create(&config.output_dir)?.with_stamp(config.hash());
    let result = build_federation(config)
        .stage("data")
        .and_then(|fed| run_privacy_on(&fed, &spec, config.seed, &mut w));
    write_manifest(&w, config, &[], result.as_ref().err())?;
    result
}

/// Model trained centrally on the pooled training splits, used as the attack target.
pub fn attack_model(federation: &Federation, spec: &PrivacySpec, seed: u64) -> Result<Model> {
    let pooled: Vec<_> = federation
        .clients()
        .iter()
        .flat_map(|c| c.train.samples().iter().cloned())
        .collect();
    let data = LabeledDataset::new("pooled", federation.class_count(), pooled)?;
    let shape = data.input_shape().ok_or_else(|| Error::data("no samples"))?.to_vec();
    let init = spec
        .architecture
        .build(&shape, data.class_count(), seed::derive(seed, &[stream::ATTACK, stream::INIT]))?;
    let schedule = LocalSchedule {
        epochs: spec.train_epochs,
        lr: spec.train_lr,
        momentum: 0.5,
        batch_size: 10,
    };
    let out = local_train_with_stats(&init, &data, &schedule, seed::derive(seed, &[stream::ATTACK, stream::LOCAL]))?;
    init.with_params(out.params)
}

/// Reference images: the i-th test sample of client `i mod n`.
fn references(federation: &Federation, count: usize) -> Vec<crate::tensor::Tensor> {
    let n = federation.len();
    (0..count)
        .filter_map(|i| {
            let c = &federation.clients()[i % n];
            c.test.samples().get(i / n).map(|s| s.input.clone())
        })
        .collect()
}

fn run_privacy_on(
    federation: &Federation,
    spec: &PrivacySpec,
    seed: u64,
    w: &mut ArtifactWriter,
) -> Result<Vec<InversionReport>> {
    info!("training the attacked model");
    let model = attack_model(federation, spec, seed).stage("privacy")?;
    let refs = references(federation, spec.references);
    let mut reports = Vec::new();
    for &k in &spec.relu_indices {
        for &kind in &spec.properties {
            for (i, r) in refs.iter().enumerate() {
                let report = InversionTarget::capture(&model, kind, k, r.clone(), spec.beta)
                    .and_then(|t| invert(&model, &t, &spec.attack))
                    .stage("privacy")?;
                let grid = pgm_grid(&[r, &report.reconstruction]).stage("privacy")?;
                w.write_bytes(&format!("privacy/{}_relu{k}_{i}.pgm", kind.name()), &grid)
                    .stage("persist")?;
                reports.push(report);
            }
        }
    }
    let records: Vec<_> = reports.iter().map(InversionReport::record).collect();
    w.write_json("privacy/inversion.json", &records).stage("persist")?;
    Ok(reports)
}

/// Mean reconstruction error per (property, ReLU index).
pub fn inversion_means(reports: &[InversionReport]) -> BTreeMap<(usize, &'static str), f64> {
    let mut sums: BTreeMap<(usize, &'static str), (f64, usize)> = BTreeMap::new();
    for r in reports {
        let e = sums.entry((r.relu_index, r.kind.name())).or_default();
        e.0 += r.mse;
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Per-client accuracies (percent) loaded from a method file.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodTable {
    pub method: Method,
    /// `(client_id, true_distribution_id, accuracy %)`.
    pub rows: Vec<(usize, Option<usize>, f64)>,
}

fn parse_accuracy_csv(method: Method, text: &str) -> Result<MethodTable> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "client_id,true_distribution_id,group_id,accuracy" {
        return Err(Error::data(format!("{}: unexpected header `{header}`", method.file())));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::data(format!("{}: malformed row {}", method.file(), i + 2));
        if f.len() != 4 {
            return Err(bad());
        }
        let id = f[0].parse().map_err(|_| bad())?;
        let t = if f[1].is_empty() { None } else { Some(f[1].parse().map_err(|_| bad())?) };
        let acc = f[3].parse().map_err(|_| bad())?;
        rows.push((id, t, acc));
    }
    Ok(MethodTable { method, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub config_hash: String,
    pub present: Vec<Method>,
    pub absent: Vec<Method>,
    /// Mean accuracy (%) per method.
    pub means: BTreeMap<String, f64>,
    /// Mean accuracy (%) per method and distribution type.
    pub type_means: BTreeMap<String, BTreeMap<usize, f64>>,
    /// Clients each method wins outright.
    pub wins: BTreeMap<String, usize>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Build the method comparison for an artifact directory.
///
/// Every method file must match the hash recorded in the directory's
/// manifest; files from another run are rejected. Missing methods are
/// reported as absent.
pub fn compare_methods(dir: impl AsRef<Path>) -> Result<ComparisonSummary> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| Error::config(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?,
    )?;
    let mut tables = Vec::new();
    let mut absent = Vec::new();
    for m in Method::ALL {
        let path = dir.join(m.file());
        let declared = manifest.files.iter().find(|e| e.path == m.file());
        match (declared, path.is_file()) {
            (Some(entry), true) => {
                let bytes = fs::read(&path)?;
                if entry.sha256.as_deref() != Some(sha256_hex(&bytes).as_str()) {
                    return Err(Error::config(format!(
                        "{} does not match the manifest of run {}",
                        m.file(),
                        manifest.config_hash
                    )));
                }
                tables.push(parse_accuracy_csv(m, &String::from_utf8_lossy(&bytes))?);
            }
            (None, true) => {
                return Err(Error::config(format!(
                    "{} is not declared in the manifest of run {}",
                    m.file(),
                    manifest.config_hash
                )))
            }
            _ => absent.push(m),
        }
    }
    if tables.is_empty() {
        return Err(Error::data("no method accuracy files present"));
    }
    let ids: Vec<usize> = tables[0].rows.iter().map(|r| r.0).collect();
    if tables.iter().any(|t| t.rows.iter().map(|r| r.0).collect::<Vec<_>>() != ids) {
        return Err(Error::data("method files cover different clients"));
    }
    let types: Vec<Option<usize>> = tables[0].rows.iter().map(|r| r.1).collect();

    let mut header: Vec<String> = vec!["client_id".into(), "true_distribution_id".into()];
    header.extend(tables.iter().map(|t| t.method.key().to_string()));
    header.push("winner".into());
    let mut rows = Vec::new();
    let mut wins: BTreeMap<String, usize> = tables.iter().map(|t| (t.method.key().to_string(), 0)).collect();
    for (i, id) in ids.iter().enumerate() {
        let accs: Vec<f64> = tables.iter().map(|t| t.rows[i].2).collect();
        let best = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let top: Vec<usize> = (0..accs.len()).filter(|&k| accs[k] == best).collect();
        let winner = if top.len() == 1 && tables.len() > 1 {
            let key = tables[top[0]].method.key().to_string();
            *wins.get_mut(&key).expect("present") += 1;
            key
        } else {
            String::new()
        };
        let mut row = vec![id.to_string(), types[i].map(|t| t.to_string()).unwrap_or_default()];
        row.extend(accs.iter().map(|a| format!("{a:.2}")));
        row.push(winner);
        rows.push(row);
    }
    let type_ids: BTreeSet<usize> = types.iter().flatten().copied().collect();
    let mut type_means: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for t in &type_ids {
        let mut row = vec![format!("type-{t}-mean"), t.to_string()];
        for table in &tables {
            let m = mean(table.rows.iter().filter(|r| r.1 == Some(*t)).map(|r| r.2));
            type_means.entry(table.method.key().to_string()).or_default().insert(*t, m);
            row.push(format!("{m:.2}"));
        }
        row.push(String::new());
        rows.push(row);
    }
    let means: BTreeMap<String, f64> = tables
        .iter()
        .map(|t| (t.method.key().to_string(), mean(t.rows.iter().map(|r| r.2))))
        .collect();
    let mut avg = vec!["average".to_string(), String::new()];
    avg.extend(tables.iter().map(|t| format!("{:.2}", means[t.method.key()])));
    avg.push(String::new());
    rows.push(avg);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    fs::write(dir.join("comparison.csv"), csv_text(&header_refs, &rows))?;

    // policy table: one column per grouping policy, when all three ran
    let policies = [Method::ExtendedFl, Method::RandomGroup, Method::Pfa];
    let policy_tables: Vec<&MethodTable> = policies
        .iter()
        .filter_map(|p| tables.iter().find(|t| t.method == *p))
        .collect();
    if policy_tables.len() == policies.len() {
        let mut head = vec!["client_id"];
        head.extend(policies.iter().map(|p| p.policy_label().expect("grouping policy")));
        let mut body: Vec<Vec<String>> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let mut r = vec![id.to_string()];
                r.extend(policy_tables.iter().map(|t| format!("{:.2}", t.rows[i].2)));
                r
            })
            .collect();
        let mut avg = vec!["Avg".to_string()];
        avg.extend(policy_tables.iter().map(|t| format!("{:.2}", means[t.method.key()])));
        body.push(avg);
        fs::write(dir.join("policies.csv"), csv_text(&head, &body))?;
    }

    let summary = ComparisonSummary {
        config_hash: manifest.config_hash.clone(),
        present: tables.iter().map(|t| t.method).collect(),
        absent,
        means,
        type_means,
        wins,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(dir.join("comparison.json"), text)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
architecture = "mlp"

[dataset]
kind = "glyphs"
size = 8
per_class = 10

[federation]
kind = "class-imbalance"
clients = 2
types = 1
classes_per_type = 2
samples_per_split = 4

[fl]
rounds = 1

[adaptation]
adaptation_rounds = 1

[pfe]
q = 8
"#;

    #[test]
    fn parses_and_derives_seeds() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.fl.seed, 3);
        assert_eq!(cfg.adaptation.seed, 3);
        assert_eq!(cfg.fl.rounds, 1);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        cfg.validate().unwrap();
        let mut other = cfg.clone();
        other.set_seed(4);
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn section_seeds_and_unknown_keys_are_rejected() {
        let with_seed = MINIMAL.replace("rounds = 1", "rounds = 1\nseed = 9");
        assert!(ExperimentConfig::from_toml(&with_seed).is_err());
        let typo = MINIMAL.replace("q = 8", "qq = 8");
        assert!(ExperimentConfig::from_toml(&typo).is_err());
        let no_seed = MINIMAL.replace("seed = 3", "");
        assert!(ExperimentConfig::from_toml(&no_seed).is_err());
    }

    #[test]
    fn missing_dataset_fails_validation() {
        let text = MINIMAL.replace(
            "kind = \"glyphs\"\nsize = 8\nper_class = 10",
            "kind = \"idx\"\nimages = \"/nonexistent/a.idx\"\nlabels = \"/nonexistent/b.idx\"",
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("does not exist")));
    }

    #[test]
    fn q_beyond_channels_fails_validation() {
        let cfg = ExperimentConfig::from_toml(&MINIMAL.replace("q = 8", "q = 65")).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn separation_ratio_uses_the_first_client_as_anchor() {
        let rows: Vec<SweepRow> = [(1, 0.0), (2, 0.1), (3, 0.5), (4, 0.6)]
            .into_iter()
            .map(|(id, d)| SweepRow {
                relu_index: 1,
                q: 2,
                client_id: Some(id),
                distance: Some(d),
                status: "ok".into(),
            })
            .collect();
        let truth: BTreeMap<usize, usize> = [(1, 0), (2, 0), (3, 1), (4, 1)].into();
        assert!((separation_ratio(&rows, &truth, 1, 2).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(separation_ratio(&rows, &truth, 2, 2), None);
    }
}
