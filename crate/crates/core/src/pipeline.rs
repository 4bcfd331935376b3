//! Teacher -> generation -> student orchestration.
//!
//! The teacher learns BPR on the training graph with a consistency term
//! between two edge-dropout views. Its propagated embeddings select pseudo
//! interactions; the student then trains on the graph augmented with them,
//! contrasting a dropout view of the original graph against the augmented
//! graph, and is pulled towards the frozen teacher after every epoch.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::{self, kcore_filter, load_interactions, Format, InteractionSet, SplitSet};
use crate::encoder::{propagate_final, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::generation::{generate_from_table, PseudoInteractionSet};
use crate::graph::{build_graph, strong_augment, weak_augment, BipartiteGraph};
use crate::losses::BatchSource;
use crate::rng::derive_seed;
use crate::synthetic;
use crate::trainer::{
    fresh_embeddings, train, Momentum, MomentumEvery, NegativeSampler, TrainConfig, TrainOutcome, TrainSetup, Validation,
    ViewSource,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentInit {
    /// Start from the teacher's embeddings.
    #[default]
    Teacher,
    /// Start from a fresh random table.
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    /// Momentum towards the teacher, in [0, 1].
    pub gamma: f64,
    pub alpha: f64,
    pub k_cap: usize,
    pub momentum_every: MomentumEvery,
    pub student_init: StudentInit,
    /// Use generated pairs as BPR positives as well as graph edges.
    pub pseudo_positives: bool,
    pub teacher_only: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            teacher: TrainConfig::default(),
            student: TrainConfig::default(),
            gamma: 0.3,
            alpha: 1.0,
            k_cap: 5,
            momentum_every: MomentumEvery::Epoch,
            student_init: StudentInit::Teacher,
            pseudo_positives: true,
            teacher_only: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if !(self.alpha > 0.0) || self.k_cap == 0 {
            return Err(Error::Config("alpha must be positive and k_cap at least 1".into()));
        }
        if self.teacher.dim != self.student.dim {
            return Err(Error::Config("teacher and student must share the embedding size".into()));
        }
        Ok(())
    }
}

/// `student <- gamma * student + (1 - gamma) * teacher` over both blocks.
pub fn momentum_accumulate(student: &EmbeddingTable, teacher: &EmbeddingTable, gamma: f64) -> Result<EmbeddingTable> {
    let mut out = student.clone();
    momentum_accumulate_in_place(&mut out, teacher, gamma)?;
    Ok(out)
}

pub fn momentum_accumulate_in_place(student: &mut EmbeddingTable, teacher: &EmbeddingTable, gamma: f64) -> Result<()> {
    if !student.same_shape(teacher) {
        return Err(Error::shape(teacher.shape_str(), student.shape_str()));
    }
    if gamma == 1.0 {
        return Ok(());
    }
    if gamma == 0.0 {
        student.as_mut_slice().copy_from_slice(teacher.as_slice());
        return Ok(());
    }
    for (s, &t) in student.as_mut_slice().iter_mut().zip(teacher.as_slice()) {
        // t + gamma (s - t); the clamp only removes rounding overshoot
        let mixed = t + gamma * (*s - t);
        *s = mixed.clamp(s.min(t), s.max(t));
    }
    Ok(())
}

/// Two independent dropout views of the training graph per epoch.
pub struct TeacherViews {
    pub base: Arc<BipartiteGraph>,
    pub rho: f64,
    pub seed: u64,
}

impl ViewSource for TeacherViews {
    fn epoch_views(&mut self, epoch: usize) -> (Arc<BipartiteGraph>, Arc<BipartiteGraph>) {
        let a = weak_augment(&self.base, self.rho, derive_seed(self.seed, "view-a", epoch as u64));
        let b = weak_augment(&self.base, self.rho, derive_seed(self.seed, "view-b", epoch as u64));
        (Arc::new(a), Arc::new(b))
    }
}

/// A dropout view of the training graph against the augmented graph.
pub struct StudentViews {
    pub base: Arc<BipartiteGraph>,
    pub strong: Arc<BipartiteGraph>,
    pub rho: f64,
    pub seed: u64,
}

impl ViewSource for StudentViews {
    fn epoch_views(&mut self, epoch: usize) -> (Arc<BipartiteGraph>, Arc<BipartiteGraph>) {
        let weak = weak_augment(&self.base, self.rho, derive_seed(self.seed, "view-weak", epoch as u64));
        (Arc::new(weak), self.strong.clone())
    }
}

pub struct PhaseResult {
    pub outcome: TrainOutcome,
    /// Graph the model propagates over at inference time.
    pub graph: Arc<BipartiteGraph>,
}

pub fn train_teacher(data: &SplitSet, cfg: &PipelineConfig, history: Option<&mut dyn Write>) -> Result<PhaseResult> {
    let tc = &cfg.teacher;
    let graph = Arc::new(build_graph(&data.train));
    let mut views = TeacherViews {
        base: graph.clone(),
        rho: tc.rho,
        seed: tc.seed,
    };
    let setup = TrainSetup {
        sampler: NegativeSampler::new(&data.train),
        rec_graph: graph.clone(),
        views: &mut views,
        validation: Some(Validation {
            heldout: &data.validation,
            exclude: &data.train,
        }),
        momentum: None,
        history_sink: history.map(|w| w as &mut dyn Write),
    };
    let init = fresh_embeddings(data.num_users(), data.num_items(), tc)?;
    let outcome = train(init, setup, tc)?;
    Ok(PhaseResult { outcome, graph })
}

/// Teacher propagation used for generation.
pub fn generate_pseudo(data: &SplitSet, teacher: &EmbeddingTable, cfg: &PipelineConfig) -> Result<PseudoInteractionSet> {
    let graph = build_graph(&data.train);
    let out = propagate_final(teacher, &graph, cfg.teacher.layers)?;
    generate_from_table(&out, &data.train, cfg.alpha, cfg.k_cap)
}

pub fn train_student(
    data: &SplitSet,
    teacher: &EmbeddingTable,
    pseudo: &PseudoInteractionSet,
    cfg: &PipelineConfig,
    history: Option<&mut dyn Write>,
) -> Result<PhaseResult> {
    let sc = &cfg.student;
    let base = Arc::new(build_graph(&data.train));
    let strong = Arc::new(strong_augment(&base, pseudo));
    let (positives, source) = if cfg.pseudo_positives && !pseudo.is_empty() {
        (data.train.union_pairs(pseudo.pairs())?, BatchSource::Augmented)
    } else {
        (data.train.clone(), BatchSource::Observed)
    };
    let mut views = StudentViews {
        base,
        strong: strong.clone(),
        rho: sc.rho,
        seed: sc.seed,
    };
    let init = match cfg.student_init {
        StudentInit::Teacher => teacher.clone(),
        StudentInit::Fresh => fresh_embeddings(data.num_users(), data.num_items(), sc)?,
    };
    let setup = TrainSetup {
        sampler: NegativeSampler::new(&positives).with_source(source),
        rec_graph: strong.clone(),
        views: &mut views,
        validation: Some(Validation {
            heldout: &data.validation,
            exclude: &data.train,
        }),
        momentum: Some(Momentum {
            teacher,
            gamma: cfg.gamma,
            every: cfg.momentum_every,
        }),
        history_sink: history.map(|w| w as &mut dyn Write),
    };
    let outcome = train(init, setup, sc)?;
    Ok(PhaseResult { outcome, graph: strong })
}

/// Test-set report of a table propagated over `graph`.
pub fn evaluate_model(data: &SplitSet, table: &EmbeddingTable, graph: &BipartiteGraph, cfg: &TrainConfig) -> Result<MetricsReport> {
    let out = propagate_final(table, graph, cfg.layers)?;
    eval::evaluate(&out, &data.test, &data.train, cfg.eval_k)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// File layout of a run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> RunLayout {
        RunLayout { root: root.into() }
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn teacher_ckpt(&self) -> PathBuf {
        self.root.join("teacher.ckpt")
    }
    pub fn student_ckpt(&self) -> PathBuf {
        self.root.join("student.ckpt")
    }
    pub fn pseudo(&self) -> PathBuf {
        self.root.join("pseudo.tsv")
    }
    pub fn history(&self, phase: &str) -> PathBuf {
        self.root.join(format!("{phase}_history.jsonl"))
    }
    pub fn report(&self, phase: &str) -> PathBuf {
        self.root.join(format!("{phase}_report.toml"))
    }
    pub fn report_csv(&self, phase: &str) -> PathBuf {
        self.root.join(format!("{phase}_report.csv"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.toml")
    }
    pub fn failure_marker(&self) -> PathBuf {
        self.root.join("FAILED")
    }
}

/// Loads or synthesizes interactions, applies k-core, splits, and writes the
/// splits under `layout.data_dir()`.
pub fn prepare(cfg: &RunConfig, layout: &RunLayout) -> Result<()> {
    let raw = match (&cfg.data.path, &cfg.data.synthetic) {
        (Some(path), None) => load_interactions(path, cfg.data.format.unwrap_or_else(|| Format::from_path(path)))?,
        (None, Some(syn)) => synthetic::generate(syn)?,
        _ => return Err(Error::Config("exactly one data source is required".into())),
    };
    let filtered = kcore_filter(&raw, cfg.data.kcore)?;
    let split = dataset::split(&filtered, cfg.data.ratios, cfg.split_seed())?;
    split.write_dir(&layout.data_dir(), cfg.split_seed(), cfg.data.ratios)
}

pub fn load_prepared(layout: &RunLayout) -> Result<SplitSet> {
    Ok(SplitSet::read_dir(&layout.data_dir())?.0)
}

fn write_report(layout: &RunLayout, phase: &str, report: &MetricsReport) -> Result<()> {
    fs::write(layout.report(phase), report.to_text())?;
    let mut w = BufWriter::new(File::create(layout.report_csv(phase))?);
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn with_history<T>(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<T>) -> Result<T> {
    let mut w = BufWriter::new(File::create(path)?);
    let out = f(&mut w)?;
    w.flush()?;
    Ok(out)
}

pub fn teacher_phase(cfg: &RunConfig, layout: &RunLayout) -> Result<PhaseSummary> {
    let data = load_prepared(layout)?;
    let p = &cfg.pipeline;
    let res = with_history(&layout.history("teacher"), |w| train_teacher(&data, p, Some(w)))?;
    res.outcome.embeddings.save(&layout.teacher_ckpt())?;
    let report = evaluate_model(&data, &res.outcome.embeddings, &res.graph, &p.teacher)?;
    write_report(layout, "teacher", &report)?;
    Ok(PhaseSummary::new(&res.outcome, report))
}

pub fn generation_phase(cfg: &RunConfig, layout: &RunLayout) -> Result<PseudoInteractionSet> {
    let data = load_prepared(layout)?;
    let teacher = EmbeddingTable::load(&layout.teacher_ckpt())?;
    let pseudo = generate_pseudo(&data, &teacher, &cfg.pipeline)?;
    fs::write(layout.pseudo(), pseudo.to_tsv_bytes())?;
    Ok(pseudo)
}

pub fn read_pseudo(layout: &RunLayout, cfg: &PipelineConfig) -> Result<PseudoInteractionSet> {
    let file = File::open(layout.pseudo())?;
    PseudoInteractionSet::read_tsv(BufReader::new(file), cfg.alpha, cfg.k_cap)
}

pub fn student_phase(cfg: &RunConfig, layout: &RunLayout) -> Result<PhaseSummary> {
    let data = load_prepared(layout)?;
    let p = &cfg.pipeline;
    let teacher = EmbeddingTable::load(&layout.teacher_ckpt())?;
    let pseudo = read_pseudo(layout, p)?;
    let teacher_hash = sha256_hex(&teacher.to_bytes());
    let res = with_history(&layout.history("student"), |w| train_student(&data, &teacher, &pseudo, p, Some(w)))?;
    if sha256_hex(&teacher.to_bytes()) != teacher_hash {
        return Err(Error::Checkpoint("teacher table changed during student training".into()));
    }
    res.outcome.embeddings.save(&layout.student_ckpt())?;
    let report = evaluate_model(&data, &res.outcome.embeddings, &res.graph, &p.student)?;
    write_report(layout, "student", &report)?;
    Ok(PhaseSummary::new(&res.outcome, report))
}

/// Re-evaluates whichever checkpoints exist in the run directory.
pub fn evaluation_phase(cfg: &RunConfig, layout: &RunLayout) -> Result<Vec<(String, MetricsReport)>> {
    let data = load_prepared(layout)?;
    let p = &cfg.pipeline;
    let base = build_graph(&data.train);
    let mut out = Vec::new();
    let teacher = EmbeddingTable::load(&layout.teacher_ckpt())?;
    let report = evaluate_model(&data, &teacher, &base, &p.teacher)?;
    write_report(layout, "teacher", &report)?;
    out.push(("teacher".to_owned(), report));
    if layout.student_ckpt().exists() {
        let student = EmbeddingTable::load(&layout.student_ckpt())?;
        let strong = strong_augment(&base, &read_pseudo(layout, p)?);
        let report = evaluate_model(&data, &student, &strong, &p.student)?;
        write_report(layout, "student", &report)?;
        out.push(("student".to_owned(), report));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_recall: Option<f64>,
    pub test_recall: f64,
    pub test_ndcg: f64,
    pub test_cold_recall: Option<f64>,
}

impl PhaseSummary {
    fn new(outcome: &TrainOutcome, report: MetricsReport) -> PhaseSummary {
        PhaseSummary {
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
            val_recall: outcome.best_recall,
            test_recall: report.recall,
            test_ndcg: report.ndcg,
            test_cold_recall: report.cold_recall(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub split: u64,
    pub teacher: u64,
    pub student: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    pub seeds: Seeds,
    pub num_users: usize,
    pub num_items: usize,
    pub num_pseudo: Option<usize>,
    pub teacher: PhaseSummary,
    pub student: Option<PhaseSummary>,
    /// File name -> SHA-256 of its bytes.
    pub artifacts: std::collections::BTreeMap<String, String>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineArtifacts {
    pub layout: RunLayout,
    pub manifest: Manifest,
}

const HASHED: &[&str] = &[
    "data/train.tsv",
    "data/validation.tsv",
    "data/test.tsv",
    "teacher.ckpt",
    "teacher_report.toml",
    "pseudo.tsv",
    "student.ckpt",
    "student_report.toml",
];

/// Full run: prepare, teacher, generation, student, evaluation, manifest.
/// On failure a `FAILED` marker holding the error is written and partial
/// artifacts are left in place.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<PipelineArtifacts> {
    let layout = RunLayout::new(out_dir);
    fs::create_dir_all(out_dir)?;
    let _ = fs::remove_file(layout.failure_marker());
    match run_inner(cfg, &layout) {
        Ok(a) => Ok(a),
        Err(e) => {
            let _ = fs::write(layout.failure_marker(), format!("{}: {e}\n", e.kind()));
            Err(e)
        }
    }
}

fn run_inner(cfg: &RunConfig, layout: &RunLayout) -> Result<PipelineArtifacts> {
    prepare(cfg, layout)?;
    let teacher = teacher_phase(cfg, layout)?;
    let (num_pseudo, student) = if cfg.pipeline.teacher_only {
        (None, None)
    } else {
        let pseudo = generation_phase(cfg, layout)?;
        // The student must consume exactly the persisted set.
        let persisted = fs::read(layout.pseudo())?;
        if sha256_hex(&persisted) != sha256_hex(&pseudo.to_tsv_bytes()) || read_pseudo(layout, &cfg.pipeline)? != pseudo {
            return Err(Error::Checkpoint("persisted pseudo interactions differ from generated set".into()));
        }
        (Some(pseudo.len()), Some(student_phase(cfg, layout)?))
    };

    let data = load_prepared(layout)?;
    let mut artifacts = std::collections::BTreeMap::new();
    for name in HASHED {
        let path = layout.root.join(name);
        if path.exists() {
            artifacts.insert((*name).to_owned(), sha256_hex(&fs::read(&path)?));
        }
    }
    let manifest = Manifest {
        status: "complete".into(),
        seeds: Seeds {
            run: cfg.seed,
            split: cfg.split_seed(),
            teacher: cfg.pipeline.teacher.seed,
            student: cfg.pipeline.student.seed,
        },
        num_users: data.num_users(),
        num_items: data.num_items(),
        num_pseudo,
        teacher,
        student,
        artifacts,
        config: cfg.clone(),
    };
    fs::write(layout.manifest(), toml::to_string(&manifest).expect("manifest serializes"))?;
    Ok(PipelineArtifacts {
        layout: layout.clone(),
        manifest,
    })
}

/// Data of an already prepared run directory, with the training set also
/// returned as a plain interaction set.
pub fn prepared_train(layout: &RunLayout) -> Result<InteractionSet> {
    Ok(load_prepared(layout)?.train)
}
