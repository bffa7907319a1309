mod common;

use std::fs;
use std::path::Path;

use fedadapt::artifacts::sha256_hex;
use fedadapt::csm::{run_pfa_pipeline, AdaptationConfig, FscConfig};
use fedadapt::data::idx::save_idx;
use fedadapt::data::partition_class_imbalance;
use fedadapt::fl::{run_federated_learning, FLConfig};
use fedadapt::harness::{compare_methods, run_experiment, ExperimentConfig, Manifest, Method, MANIFEST};
use fedadapt::nn::Architecture;
use fedadapt::pfe::PfeConfig;

fn smoke_config(dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 5
output_dir = "{}"
architecture = "mlp"

[dataset]
kind = "glyphs"
size = 8
per_class = 10

[federation]
kind = "class-imbalance"
clients = 2
types = 2
classes_per_type = 2
samples_per_split = 4

[fl]
rounds = 1

[pfe]
q = 8

[adaptation]
adaptation_rounds = 1
"#,
        dir.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST)).unwrap()).unwrap()
}

#[test]
fn runs_are_bitwise_reproducible_across_thread_counts() {
    let ds = common::glyphs(8, 20, 3);
    let fed = partition_class_imbalance(&ds, 4, 2, 2, 10, 3).unwrap();
    let fl = FLConfig {
        rounds: 3,
        seed: 9,
        ..Default::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            run_pfa_pipeline(
                &fed,
                Architecture::SmallCnn,
                &fl,
                &PfeConfig {
                    q: 8,
                    seed: 9,
                    ..Default::default()
                },
                &FscConfig {
                    expected_groups: Some(2),
                    ..Default::default()
                },
                &AdaptationConfig {
                    adaptation_rounds: 2,
                    seed: 9,
                    ..Default::default()
                },
                None,
            )
            .unwrap()
        })
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.global.params(), b.global.params());
    assert_eq!(a.representations, b.representations);
    assert_eq!(a.assignment, b.assignment);
    for (g, m) in a.result.group_models.iter().enumerate() {
        assert_eq!(m.params(), b.result.group_models[g].params());
    }
    let (m1, _) = run_federated_learning(&fed, Architecture::SmallCnn, &fl).unwrap();
    let (m2, _) = run_federated_learning(&fed, Architecture::SmallCnn, &FLConfig { seed: 10, ..fl.clone() }).unwrap();
    assert_eq!(m1.params(), a.global.params());
    assert_ne!(m1.params(), m2.params());
}

#[test]
fn experiment_writes_a_verifiable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let outcome = run_experiment(&cfg).unwrap();
    assert_eq!(outcome.methods.len(), Method::ALL.len());

    let m = manifest(dir.path());
    assert_eq!(m.status, "complete");
    assert_eq!(m.config_hash, cfg.hash());
    for e in &m.files {
        let bytes = fs::read(dir.path().join(&e.path)).unwrap();
        match &e.sha256 {
            Some(h) => assert_eq!(*h, sha256_hex(&bytes), "{}", e.path),
            None => assert_eq!(e.path, "timing.csv"),
        }
    }
    let groups: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("groups.json")).unwrap()).unwrap();
    assert_eq!(groups["config_hash"], cfg.hash());

    let summary = compare_methods(dir.path()).unwrap();
    assert!(summary.absent.is_empty());
    assert!(dir.path().join("comparison.csv").is_file());
    assert!(dir.path().join("policies.csv").is_file());

    // a second run with the same seed reproduces every hashed file
    let again = tempfile::tempdir().unwrap();
    let mut cfg2 = cfg.clone();
    cfg2.output_dir = again.path().to_path_buf();
    run_experiment(&cfg2).unwrap();
    let hashed = |m: &Manifest| {
        m.files
            .iter()
            .filter(|e| e.sha256.is_some() && e.path != "config.json")
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_eq!(hashed(&m), hashed(&manifest(again.path())));
}

#[test]
fn comparison_rejects_foreign_files_and_reports_absent_methods() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path());
    cfg.baselines.methods = vec![Method::Baseline];
    run_experiment(&cfg).unwrap();
    let s = compare_methods(dir.path()).unwrap();
    assert_eq!(s.present, vec![Method::Baseline, Method::Pfa]);
    assert_eq!(s.absent.len(), 3);

    let path = dir.path().join(Method::Pfa.file());
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen(",", ";", 1)).unwrap();
    assert!(compare_methods(dir.path()).is_err());
}

#[test]
fn failed_stage_is_recorded_and_partial_output_kept() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images.idx");
    let labels = dir.path().join("labels.idx");
    save_idx(&common::glyphs(8, 4, 0), &images, &labels).unwrap();
    fs::write(&labels, b"not an idx file").unwrap();
    let out = dir.path().join("out");
    let mut cfg = smoke_config(&out);
    cfg.dataset = fedadapt::harness::DatasetSpec::Idx { images, labels };
    cfg.validate().unwrap();
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.stage(), Some("data"));
    let m = manifest(&out);
    assert_eq!(m.status, "failed");
    assert_eq!(m.failed_stage.as_deref(), Some("data"));
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_fedadapt");
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\narchitecture = \"nope\"\n").unwrap();
    let status = std::process::Command::new(bin).arg("run").arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(1));

    let out = dir.path().join("data");
    let status = std::process::Command::new(bin)
        .args(["gen-data", "--per-class", "3", "--size", "8", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let ds = fedadapt::data::idx::load_idx(out.join("images.idx"), out.join("labels.idx")).unwrap();
    assert_eq!(ds.len(), 30);
}
