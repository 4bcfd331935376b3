//! Mini-batch BPR/consistency training with Adam and early stopping on
//! validation Recall@K.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionSet;
use crate::encoder::{init_embeddings, propagate_final, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{rank_users, DEFAULT_K};
use crate::graph::BipartiteGraph;
use crate::losses::{total_loss_and_grad, BatchSource, Denominator, GradientTable, LossConfig, ObjectiveGraphs, Terms, TripleBatch};
use crate::pipeline::momentum_accumulate_in_place;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda: f64,
    pub mu: f64,
    pub tau: f64,
    /// Edge dropout ratio of the weak augmentation.
    pub rho: f64,
    pub dim: usize,
    pub layers: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub denominator: Denominator,
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lambda: 1e-4,
            mu: 0.1,
            tau: 0.2,
            rho: 0.1,
            dim: 64,
            layers: 3,
            batch_size: 2048,
            max_epochs: 400,
            patience: 10,
            seed: 2023,
            init_scale: 0.1,
            denominator: Denominator::Full,
            eval_k: DEFAULT_K,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must be in [0, 1), got {}", self.rho));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size == 0 || self.dim == 0 || self.eval_k == 0 {
            return bad("batch_size, dim and eval_k must be at least 1".into());
        }
        if self.lambda < 0.0 || self.mu < 0.0 {
            return bad("lambda and mu must be non-negative".into());
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            mu: self.mu,
            tau: self.tau,
            layers: self.layers,
            denominator: self.denominator,
            terms: Terms::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam on the rows whose gradient is not identically zero.
pub fn adam_step(table: &mut EmbeddingTable, grad: &GradientTable, st: &mut AdamState, lr: f64) -> Result<()> {
    let g = grad.table();
    if !table.same_shape(g) || st.m.len() != table.as_slice().len() {
        return Err(Error::shape(table.shape_str(), g.shape_str()));
    }
    st.t += 1;
    let bc1 = 1.0 - st.beta1.powi(st.t as i32);
    let bc2 = 1.0 - st.beta2.powi(st.t as i32);
    let dim = table.dim();
    let x = table.as_mut_slice();
    for r in 0..g.num_rows() {
        if grad.row_is_zero(r) {
            continue;
        }
        for j in r * dim..(r + 1) * dim {
            let gj = g.as_slice()[j];
            st.m[j] = st.beta1 * st.m[j] + (1.0 - st.beta1) * gj;
            st.v[j] = st.beta2 * st.v[j] + (1.0 - st.beta2) * gj * gj;
            let m_hat = st.m[j] / bc1;
            let v_hat = st.v[j] / bc2;
            x[j] -= lr * m_hat / (v_hat.sqrt() + st.eps);
        }
    }
    Ok(())
}

/// Draws BPR triples: positives uniformly over pairs, negatives uniformly over
/// items the user has not interacted with.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    pairs: Vec<(u32, u32)>,
    by_user: Vec<Vec<u32>>,
    num_items: usize,
    source: BatchSource,
}

impl NegativeSampler {
    pub fn new(positives: &InteractionSet) -> NegativeSampler {
        NegativeSampler {
            pairs: positives.pairs().to_vec(),
            by_user: positives.items_by_user(),
            num_items: positives.num_items(),
            source: BatchSource::Observed,
        }
    }

    pub fn with_source(mut self, source: BatchSource) -> NegativeSampler {
        self.source = source;
        self
    }

    pub fn num_positives(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_observed(&self, user: u32, item: u32) -> bool {
        self.by_user[user as usize].binary_search(&item).is_ok()
    }

    pub fn sample_batch<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<TripleBatch> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut triples = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let (u, pos) = self.pairs[rng.random_range(0..self.pairs.len())];
            if self.by_user[u as usize].len() >= self.num_items {
                return Err(Error::NegativeSamplingStall { user: u });
            }
            let neg = loop {
                let j = rng.random_range(0..self.num_items as u32);
                if !self.is_observed(u, j) {
                    break j;
                }
            };
            triples.push((u, pos, neg));
        }
        Ok(TripleBatch {
            triples,
            source: self.source,
        })
    }
}

/// Supplies the two graphs contrasted by the consistency term each epoch.
pub trait ViewSource {
    fn epoch_views(&mut self, epoch: usize) -> (Arc<BipartiteGraph>, Arc<BipartiteGraph>);
}

/// No consistency views; only valid with `mu == 0`.
pub struct NoViews;

impl ViewSource for NoViews {
    fn epoch_views(&mut self, _epoch: usize) -> (Arc<BipartiteGraph>, Arc<BipartiteGraph>) {
        panic!("NoViews used with a non-zero consistency weight")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentumEvery {
    #[default]
    Epoch,
    Batch,
}

/// Pulls the trained table towards a frozen reference after each update.
pub struct Momentum<'a> {
    pub teacher: &'a EmbeddingTable,
    pub gamma: f64,
    pub every: MomentumEvery,
}

pub struct Validation<'a> {
    pub heldout: &'a InteractionSet,
    /// Items never ranked for a user, normally their training items.
    pub exclude: &'a InteractionSet,
}

pub struct TrainSetup<'a> {
    pub sampler: NegativeSampler,
    /// Graph scored by BPR and used for inference.
    pub rec_graph: Arc<BipartiteGraph>,
    pub views: &'a mut dyn ViewSource,
    pub validation: Option<Validation<'a>>,
    pub momentum: Option<Momentum<'a>>,
    /// Receives one JSON line per epoch.
    pub history_sink: Option<&'a mut dyn Write>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean recommendation loss per triple.
    pub rec_loss: f64,
    /// Mean consistency loss per batch.
    pub cr_loss: f64,
    pub val_recall: Option<f64>,
    pub val_ndcg: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation embeddings, or the last ones without validation.
    pub embeddings: EmbeddingTable,
    pub best_epoch: usize,
    pub best_recall: Option<f64>,
    pub history: Vec<EpochRecord>,
}

pub fn fresh_embeddings(num_users: usize, num_items: usize, cfg: &TrainConfig) -> Result<EmbeddingTable> {
    init_embeddings(num_users, num_items, cfg.dim, cfg.seed, cfg.init_scale)
}

fn validation_metrics(table: &EmbeddingTable, setup: &TrainSetup<'_>, cfg: &TrainConfig) -> Result<Option<(f64, f64)>> {
    let Some(val) = &setup.validation else {
        return Ok(None);
    };
    let out = propagate_final(table, &setup.rec_graph, cfg.layers)?;
    let rankings = rank_users(&out, val.heldout, val.exclude, cfg.eval_k)?;
    if rankings.is_empty() {
        return Ok(None);
    }
    let n = rankings.len() as f64;
    let recall = rankings.iter().map(|r| r.recall(cfg.eval_k)).sum::<f64>() / n;
    let ndcg = rankings.iter().map(|r| r.ndcg(cfg.eval_k)).sum::<f64>() / n;
    Ok(Some((recall, ndcg)))
}

pub fn train(init: EmbeddingTable, mut setup: TrainSetup<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if init.dim() != cfg.dim {
        return Err(Error::shape(format!("dim {}", cfg.dim), format!("dim {}", init.dim())));
    }
    let loss_cfg = cfg.loss_config();
    let mut table = init;
    let mut adam = AdamState::new(table.as_slice().len());
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, EmbeddingTable)> = None;
    let mut since_best = 0;
    let positives = setup.sampler.num_positives();
    let batches = positives.div_ceil(cfg.batch_size);

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let views = (cfg.mu != 0.0).then(|| setup.views.epoch_views(epoch));
        let graphs = ObjectiveGraphs {
            rec: &setup.rec_graph,
            views: views.as_ref().map(|(a, b)| (a.as_ref(), b.as_ref())),
        };
        let mut rng = rng::stream(cfg.seed, "batches", epoch as u64);
        let mut rec_sum = 0.0;
        let mut cr_sum = 0.0;
        for b in 0..batches {
            let size = cfg.batch_size.min(positives - b * cfg.batch_size);
            let batch = setup.sampler.sample_batch(size, &mut rng)?;
            let (report, grad) = total_loss_and_grad(&table, &batch, graphs, &loss_cfg)?;
            rec_sum += report.rec;
            cr_sum += report.cr();
            adam_step(&mut table, &grad, &mut adam, cfg.lr)?;
            if let Some(m) = setup.momentum.as_ref().filter(|m| m.every == MomentumEvery::Batch) {
                momentum_accumulate_in_place(&mut table, m.teacher, m.gamma)?;
            }
        }
        if let Some(m) = setup.momentum.as_ref().filter(|m| m.every == MomentumEvery::Epoch) {
            momentum_accumulate_in_place(&mut table, m.teacher, m.gamma)?;
        }

        let metrics = validation_metrics(&table, &setup, cfg)?;
        let record = EpochRecord {
            epoch,
            rec_loss: rec_sum / positives as f64,
            cr_loss: cr_sum / batches as f64,
            val_recall: metrics.map(|m| m.0),
            val_ndcg: metrics.map(|m| m.1),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: rec {:.6} cr {:.6} val recall {:?}",
            record.rec_loss,
            record.cr_loss,
            record.val_recall
        );
        if let Some(sink) = setup.history_sink.as_deref_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(sink, "{line}")?;
        }
        history.push(record);

        if let Some((recall, _)) = metrics {
            if best.as_ref().is_none_or(|b| recall > b.0) {
                best = Some((recall, epoch, table.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    break;
                }
            }
        }
    }

    Ok(match best {
        Some((recall, epoch, emb)) => TrainOutcome {
            embeddings: emb,
            best_epoch: epoch,
            best_recall: Some(recall),
            history,
        },
        None => TrainOutcome {
            best_epoch: history.len(),
            embeddings: table,
            best_recall: None,
            history,
        },
    })
}
