//! Config file to leaderboard without the command-line front end.

use std::path::Path;

use smtl_core::config::RunConfigFile;
use smtl_core::harness::{run_sequence, verify_non_interference};
use smtl_core::model::{ParamSet, Setting, StrategyKind};
use smtl_core::scoring::io::{parse_results, ResultsFile};
use smtl_core::scoring::{leaderboard, Metric, ReferenceAccuracies, ScoringConfig, TaskReference};

const PRETRAIN: &str = "pretrain = { epochs = 1, source = { num_classes = 3, samples_per_class = 6, image_size = 12, task_kind = \"classification\" } }";

fn config(strategy: &str, backbone: &str) -> String {
    format!(
        r#"
backbone = "tiny"
strategy = "{strategy}"
setting = "RGB-D"
seed = 3
output_dir = "out"
image_size = 12
{backbone}

[train]
epochs = 2
lr_decay_epoch = 1
batch_size = 6

[[tasks]]
name = "a"
synth = {{ num_classes = 3, samples_per_class = 6, image_size = 12, task_kind = "classification", difficulty = "hard" }}

[[tasks]]
name = "b"
synth = {{ num_classes = 2, samples_per_class = 8, image_size = 12, task_kind = "pose" }}
split = {{ protocol = "holdout", test_fraction = 0.25 }}
"#
    )
}

#[test]
fn runs_score_on_the_leaderboard() {
    let mut methods = Vec::new();
    for s in ["FT", "FE", "RS", "PB"] {
        let cfg = RunConfigFile::parse(&config(s, PRETRAIN)).unwrap();
        let plan = cfg.build_plan(Path::new(".")).unwrap();
        assert_eq!(plan.tasks[1].test.len(), 4);
        let run = run_sequence(&plan).unwrap();
        assert!(verify_non_interference(&run).is_clean());
        methods.extend(run.to_results_file(None).methods);
    }
    let file = ResultsFile {
        accuracy_unit: Default::default(),
        methods,
    };
    let results = parse_results(&serde_json::to_string(&file).unwrap()).unwrap();
    let refs = ReferenceAccuracies::new(
        Setting::RgbD,
        ["a", "b"]
            .map(|id| TaskReference {
                task_id: id.into(),
                alpha_ft: 0.9,
                alpha_fe: 0.2,
            })
            .to_vec(),
    )
    .unwrap();
    let board = leaderboard(&results, &refs, &ScoringConfig::default()).unwrap();
    assert_eq!(board.setting, Setting::RgbD);
    assert_eq!(board.methods.len(), 4);
    assert_eq!(board.method("FT").unwrap().get(Metric::Ll), 0.0);
    let rs = board.method("RS").unwrap();
    assert!(rs.tasks.iter().all(|t| t.param_ratio > 0.0 && t.param_ratio < 1.0));
    for m in &board.methods {
        assert!((0.0..=1000.0).contains(&m.ll), "{}", m.method);
        let avga = m.tasks.iter().map(|t| t.accuracy).sum::<f64>() / 2.0;
        assert!((m.avga - avga).abs() < 1e-15);
    }
}

#[test]
fn pretrained_weights_round_trip_through_a_file() {
    let cfg = RunConfigFile::parse(&config("FE", PRETRAIN)).unwrap();
    let plan = cfg.build_plan(Path::new(".")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    plan.backbone.params().read().unwrap().write_to(&mut bytes).unwrap();
    std::fs::write(dir.path().join("w.bin"), &bytes).unwrap();

    let text = config("FE", "weights = \"w.bin\"");
    let from_file = RunConfigFile::parse(&text).unwrap().build_plan(dir.path()).unwrap();
    let a = plan.backbone.params().read().unwrap().fingerprint();
    let b = from_file.backbone.params().read().unwrap().fingerprint();
    assert_eq!(a, b);
    let first = run_sequence(&plan).unwrap();
    let second = run_sequence(&from_file).unwrap();
    assert_eq!(first.tasks[0].accuracy, second.tasks[0].accuracy);
    assert_eq!(first.probes, second.probes);
    assert!(ParamSet::decode(&bytes).is_ok());
    assert_eq!(plan.strategy, StrategyKind::FeatureExtractor);
}
