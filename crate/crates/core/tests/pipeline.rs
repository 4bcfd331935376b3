use std::fs;
use std::path::Path;

use ucc::config::{Overrides, RunConfig};
use ucc::dataset::{split, Ratios, SplitSet};
use ucc::generation::PseudoInteractionSet;
use ucc::graph::{build_graph, strong_augment, weak_augment};
use ucc::pipeline::{generate_pseudo, run, train_student, train_teacher, PipelineConfig};
use ucc::synthetic::{self, SyntheticConfig};
use ucc::trainer::TrainConfig;

fn small_data(seed: u64) -> SplitSet {
    let set = synthetic::generate(&SyntheticConfig {
        users: 120,
        items: 80,
        min_interactions: 6,
        max_interactions: 14,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    split(&set, Ratios::default(), seed).unwrap()
}

fn small_train(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        dim: 8,
        layers: 2,
        batch_size: 256,
        max_epochs: epochs,
        patience: 0,
        seed,
        ..TrainConfig::default()
    }
}

fn small_pipeline(seed: u64) -> PipelineConfig {
    PipelineConfig {
        teacher: small_train(seed, 4),
        student: small_train(seed + 1, 3),
        k_cap: 3,
        ..PipelineConfig::default()
    }
}

#[test]
fn recommendation_loss_falls_over_first_epochs() {
    let mut curves = Vec::new();
    for seed in [11, 12, 13] {
        let data = small_data(seed);
        let cfg = PipelineConfig {
            teacher: small_train(seed, 5),
            ..PipelineConfig::default()
        };
        let res = train_teacher(&data, &cfg, None).unwrap();
        curves.push(res.outcome.history.iter().map(|r| r.rec_loss).collect::<Vec<_>>());
    }
    let median: Vec<f64> = (0..5)
        .map(|e| {
            let mut v = [curves[0][e], curves[1][e], curves[2][e]];
            v.sort_by(f64::total_cmp);
            v[1]
        })
        .collect();
    for w in median.windows(2) {
        assert!(w[1] < w[0], "median loss not decreasing: {median:?}");
    }
}

#[test]
fn zero_gamma_pins_student_to_teacher() {
    let data = small_data(3);
    let mut cfg = small_pipeline(3);
    let teacher = train_teacher(&data, &cfg, None).unwrap().outcome.embeddings;
    let pseudo = generate_pseudo(&data, &teacher, &cfg).unwrap();
    cfg.gamma = 0.0;
    let student = train_student(&data, &teacher, &pseudo, &cfg, None).unwrap();
    assert_eq!(student.outcome.embeddings, teacher);
}

#[test]
fn teacher_is_not_modified_by_student_training() {
    let data = small_data(4);
    let cfg = small_pipeline(4);
    let teacher = train_teacher(&data, &cfg, None).unwrap().outcome.embeddings;
    let before = teacher.to_bytes();
    let pseudo = generate_pseudo(&data, &teacher, &cfg).unwrap();
    train_student(&data, &teacher, &pseudo, &cfg, None).unwrap();
    assert_eq!(teacher.to_bytes(), before);
}

#[test]
fn empty_pseudo_set_leaves_the_graph_unchanged() {
    let data = small_data(5);
    let g = build_graph(&data.train);
    let strong = strong_augment(&g, &PseudoInteractionSet::empty(1.0, 5));
    assert_eq!(strong.edges(), g.edges());
    assert_eq!(weak_augment(&g, 0.0, 9).edges(), g.edges());
}

#[test]
fn zero_mu_trains_without_consistency_loss() {
    let data = small_data(6);
    let mut cfg = small_pipeline(6);
    cfg.teacher.mu = 0.0;
    let res = train_teacher(&data, &cfg, None).unwrap();
    assert!(res.outcome.history.iter().all(|r| r.cr_loss == 0.0));
}

fn run_config(dir: &Path, teacher_only: bool) -> RunConfig {
    let text = r#"
seed = 21
k_cap = 3

[data]
kcore = 2

[data.synthetic]
users = 100
items = 60
min_interactions = 6
max_interactions = 12

[teacher]
lr = 0.01
dim = 8
layers = 2
batch_size = 256
max_epochs = 3

[student]
lr = 0.01
dim = 8
layers = 2
batch_size = 256
max_epochs = 2
"#;
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    RunConfig::load(
        &path,
        &Overrides {
            teacher_only,
            ..Overrides::default()
        },
    )
    .unwrap()
}

#[test]
fn teacher_only_run_matches_teacher_phase_of_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = run(&run_config(dir.path(), false), &dir.path().join("full")).unwrap();
    let base = run(&run_config(dir.path(), true), &dir.path().join("base")).unwrap();
    let read = |p: &Path, f: &str| fs::read(p.join(f)).unwrap();
    assert_eq!(read(&full.layout.root, "teacher.ckpt"), read(&base.layout.root, "teacher.ckpt"));
    assert_eq!(full.manifest.teacher, base.manifest.teacher);
    assert!(!base.layout.student_ckpt().exists() && !base.layout.pseudo().exists());
    assert!(base.manifest.student.is_none());
}

#[test]
fn rerun_from_manifest_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let first = run(&run_config(dir.path(), false), &dir.path().join("a")).unwrap();
    let again = RunConfig::load(&first.layout.manifest(), &Overrides::default()).unwrap();
    let second = run(&again, &dir.path().join("b")).unwrap();
    assert_eq!(first.manifest.artifacts, second.manifest.artifacts);
    assert_eq!(
        fs::read(first.layout.manifest()).unwrap(),
        fs::read(second.layout.manifest()).unwrap()
    );
}

#[test]
fn failed_run_leaves_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.tsv");
    fs::write(&data, "u1\ti1\nonly-one-field\n").unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    fs::write(&cfg_path, "[data]\npath = \"bad.tsv\"\n").unwrap();
    let cfg = RunConfig::load(&cfg_path, &Overrides::default()).unwrap();
    let out = dir.path().join("out");
    let err = run(&cfg, &out).unwrap_err();
    assert_eq!(err.kind(), "MalformedLine");
    let marker = fs::read_to_string(out.join("FAILED")).unwrap();
    assert!(marker.starts_with("MalformedLine"));
}
