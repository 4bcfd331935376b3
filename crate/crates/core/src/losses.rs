//! Ranking and consistency objectives with closed-form gradients with respect
//! to the layer-0 embeddings.
//!
//! Backpropagation through LightGCN needs no stored activations: the layer
//! mean `P = (1/(L+1)) sum_l A_hat^l` is linear and symmetric, so
//! `dLoss/dE0 = P * dLoss/dFinal` is one more propagation pass per graph.

use rayon::prelude::*;

use crate::encoder::{dot, propagate_raw, EmbeddingTable};
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Where the triples of a batch were drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchSource {
    /// Observed training interactions only.
    Observed,
    /// Observed plus generated interactions.
    Augmented,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripleBatch {
    /// (user, positive item, negative item)
    pub triples: Vec<(u32, u32, u32)>,
    pub source: BatchSource,
}

impl TripleBatch {
    pub fn new(triples: Vec<(u32, u32, u32)>) -> TripleBatch {
        TripleBatch {
            triples,
            source: BatchSource::Observed,
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn unique_users(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.triples.iter().map(|t| t.0 as usize).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Positive and negative items, deduplicated.
    pub fn unique_items(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .triples
            .iter()
            .flat_map(|t| [t.1 as usize, t.2 as usize])
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Sum of `-ln sigmoid(pos - neg)` plus `lambda * params_l2`.
pub fn bpr_loss(pos: &[f64], neg: &[f64], params_l2: f64, lambda: f64) -> f64 {
    assert_eq!(pos.len(), neg.len(), "score lists must have equal length");
    pos.iter().zip(neg).map(|(p, n)| softplus(n - p)).sum::<f64>() + lambda * params_l2
}

/// Candidate set for the InfoNCE denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Every node of the block.
    #[default]
    Full,
    /// Only the anchors of the current batch.
    InBatch,
}

#[derive(Debug)]
struct NceOutcome {
    loss: f64,
    /// Gradients w.r.t. the raw rows of each view, same length as the view.
    grad_a: Vec<f64>,
    grad_b: Vec<f64>,
}

fn normalized_rows(view: &[f64], dim: usize, rows: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut unit = vec![0.0; rows.len() * dim];
    let mut norms = vec![0.0; rows.len()];
    for (k, &r) in rows.iter().enumerate() {
        let src = &view[r * dim..(r + 1) * dim];
        let norm = dot(src, src).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateRow { row: r });
        }
        norms[k] = norm;
        for (u, s) in unit[k * dim..(k + 1) * dim].iter_mut().zip(src) {
            *u = s / norm;
        }
    }
    Ok((unit, norms))
}

/// Maps a gradient w.r.t. a unit vector `n = z/|z|` onto `z`.
fn through_normalization(g: &mut [f64], n: &[f64], norm: f64) {
    let proj = dot(n, g);
    for (gi, ni) in g.iter_mut().zip(n) {
        *gi = (*gi - ni * proj) / norm;
    }
}

/// Per-anchor terms `-ln( exp(cos(a_k, b_k)/tau) / sum_j exp(cos(a_k, b_j)/tau) )`
/// with optional gradients.
fn info_nce_core(
    view_a: &[f64],
    view_b: &[f64],
    dim: usize,
    anchors: &[usize],
    denominator: Denominator,
    tau: f64,
    want_grad: bool,
) -> Result<(Vec<f64>, Option<NceOutcome>)> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if view_a.len() != view_b.len() {
        return Err(Error::shape(view_a.len(), view_b.len()));
    }
    let all: Vec<usize>;
    let (candidates, positive): (&[usize], Vec<usize>) = match denominator {
        Denominator::Full => {
            all = (0..view_b.len() / dim).collect();
            (&all, anchors.to_vec())
        }
        Denominator::InBatch => (anchors, (0..anchors.len()).collect()),
    };
    let (unit_a, norm_a) = normalized_rows(view_a, dim, anchors)?;
    let (unit_b, norm_b) = normalized_rows(view_b, dim, candidates)?;
    let nc = candidates.len();
    let inv_tau = 1.0 / tau;

    // Per anchor: term, softmax-minus-indicator row, gradient w.r.t. unit a.
    let per_anchor: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..anchors.len())
        .into_par_iter()
        .map(|k| {
            let a = &unit_a[k * dim..(k + 1) * dim];
            let mut logits: Vec<f64> = (0..nc)
                .map(|j| dot(a, &unit_b[j * dim..(j + 1) * dim]) * inv_tau)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            let term = lse - logits[positive[k]];
            if !want_grad {
                return (term, Vec::new(), Vec::new());
            }
            for l in logits.iter_mut() {
                *l = (*l - lse).exp();
            }
            logits[positive[k]] -= 1.0;
            let mut ga = vec![0.0; dim];
            for (j, &c) in logits.iter().enumerate() {
                let b = &unit_b[j * dim..(j + 1) * dim];
                for (g, x) in ga.iter_mut().zip(b) {
                    *g += c * x;
                }
            }
            for g in &mut ga {
                *g *= inv_tau;
            }
            (term, logits, ga)
        })
        .collect();

    let terms: Vec<f64> = per_anchor.iter().map(|t| t.0).collect();
    if !want_grad {
        return Ok((terms, None));
    }

    let mut grad_a = vec![0.0; view_a.len()];
    for (k, &r) in anchors.iter().enumerate() {
        let mut g = per_anchor[k].2.clone();
        through_normalization(&mut g, &unit_a[k * dim..(k + 1) * dim], norm_a[k]);
        for (dst, src) in grad_a[r * dim..(r + 1) * dim].iter_mut().zip(&g) {
            *dst += src;
        }
    }

    let grad_unit_b: Vec<Vec<f64>> = (0..nc)
        .into_par_iter()
        .map(|j| {
            let mut g = vec![0.0; dim];
            for (k, pa) in per_anchor.iter().enumerate() {
                let c = pa.1[j];
                let a = &unit_a[k * dim..(k + 1) * dim];
                for (gi, x) in g.iter_mut().zip(a) {
                    *gi += c * x;
                }
            }
            for gi in &mut g {
                *gi *= inv_tau;
            }
            through_normalization(&mut g, &unit_b[j * dim..(j + 1) * dim], norm_b[j]);
            g
        })
        .collect();
    let mut grad_b = vec![0.0; view_b.len()];
    for (j, &r) in candidates.iter().enumerate() {
        for (dst, src) in grad_b[r * dim..(r + 1) * dim].iter_mut().zip(&grad_unit_b[j]) {
            *dst += src;
        }
    }

    let loss = terms.iter().sum();
    Ok((
        terms,
        Some(NceOutcome {
            loss,
            grad_a,
            grad_b,
        }),
    ))
}

/// Per-anchor InfoNCE terms where every row is an anchor and the denominator
/// runs over all rows of `view_b`.
pub fn info_nce_terms(view_a: &[f64], view_b: &[f64], dim: usize, tau: f64) -> Result<Vec<f64>> {
    let anchors: Vec<usize> = (0..view_a.len() / dim).collect();
    Ok(info_nce_core(view_a, view_b, dim, &anchors, Denominator::Full, tau, false)?.0)
}

/// InfoNCE with cosine similarity over two views of the same node set.
pub fn info_nce(view_a: &[f64], view_b: &[f64], dim: usize, tau: f64) -> Result<f64> {
    Ok(info_nce_terms(view_a, view_b, dim, tau)?.iter().sum())
}

/// Which terms enter the optimized total. All on by default; individual terms
/// can be isolated for gradient checks and ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub rec: bool,
    pub cr_item: bool,
    pub cr_user: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Terms {
            rec: true,
            cr_item: true,
            cr_user: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub mu: f64,
    pub tau: f64,
    pub layers: usize,
    pub denominator: Denominator,
    pub terms: Terms,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1e-4,
            mu: 0.1,
            tau: 0.2,
            layers: 3,
            denominator: Denominator::Full,
            terms: Terms::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// BPR sum plus `lambda * l2`.
    pub rec: f64,
    pub cr_item: f64,
    pub cr_user: f64,
    /// Squared norm of the layer-0 rows touched by the batch.
    pub l2: f64,
    pub total: f64,
}

impl LossReport {
    pub fn cr(&self) -> f64 {
        self.cr_item + self.cr_user
    }
}

/// Gradient of the total objective w.r.t. the layer-0 embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTable(EmbeddingTable);

impl GradientTable {
    pub fn table(&self) -> &EmbeddingTable {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn row_is_zero(&self, r: usize) -> bool {
        self.0.row(r).iter().all(|&g| g == 0.0)
    }

    pub fn from_table(t: EmbeddingTable) -> GradientTable {
        GradientTable(t)
    }
}

/// Graphs feeding one objective evaluation: the graph scored by BPR and the
/// optional pair of views contrasted by the consistency term.
#[derive(Clone, Copy)]
pub struct ObjectiveGraphs<'a> {
    pub rec: &'a BipartiteGraph,
    pub views: Option<(&'a BipartiteGraph, &'a BipartiteGraph)>,
}

pub fn total_loss(e0: &EmbeddingTable, batch: &TripleBatch, graphs: ObjectiveGraphs<'_>, cfg: &LossConfig) -> Result<LossReport> {
    Ok(evaluate(e0, batch, graphs, cfg, false)?.0)
}

pub fn total_loss_and_grad(
    e0: &EmbeddingTable,
    batch: &TripleBatch,
    graphs: ObjectiveGraphs<'_>,
    cfg: &LossConfig,
) -> Result<(LossReport, GradientTable)> {
    let (report, grad) = evaluate(e0, batch, graphs, cfg, true)?;
    Ok((report, grad.expect("gradient requested")))
}

/// Accumulates output-space gradients per distinct graph so shared graphs are
/// backpropagated once.
struct GraphGrads<'a> {
    slots: Vec<(&'a BipartiteGraph, Vec<f64>)>,
}

impl<'a> GraphGrads<'a> {
    fn slot(&mut self, g: &'a BipartiteGraph, len: usize) -> &mut Vec<f64> {
        let idx = match self.slots.iter().position(|(h, _)| std::ptr::eq(*h, g)) {
            Some(i) => i,
            None => {
                self.slots.push((g, vec![0.0; len]));
                self.slots.len() - 1
            }
        };
        &mut self.slots[idx].1
    }
}

fn check_graph(g: &BipartiteGraph, e0: &EmbeddingTable) -> Result<()> {
    if g.num_users() != e0.num_users() || g.num_items() != e0.num_items() {
        return Err(Error::shape(e0.shape_str(), format!("graph {}+{}", g.num_users(), g.num_items())));
    }
    Ok(())
}

fn evaluate(
    e0: &EmbeddingTable,
    batch: &TripleBatch,
    graphs: ObjectiveGraphs<'_>,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossReport, Option<GradientTable>)> {
    let dim = e0.dim();
    let m = e0.num_users();
    let len = e0.as_slice().len();
    check_graph(graphs.rec, e0)?;
    let final_rec = propagate_raw(e0.as_slice(), graphs.rec, cfg.layers, dim);
    let rec_weight = if cfg.terms.rec { 1.0 } else { 0.0 };

    let mut grads = GraphGrads { slots: Vec::new() };
    let mut grad_e0 = if want_grad { vec![0.0; len] } else { Vec::new() };

    // Recommendation term.
    fn row(data: &[f64], r: usize, dim: usize) -> &[f64] {
        &data[r * dim..(r + 1) * dim]
    }
    let mut bpr = 0.0;
    {
        let g_rec = want_grad.then(|| grads.slot(graphs.rec, len));
        let mut g_rec = g_rec;
        for &(u, ip, ineg) in &batch.triples {
            let (u, ip, ineg) = (u as usize, m + ip as usize, m + ineg as usize);
            let fu = row(&final_rec, u, dim);
            let fp = row(&final_rec, ip, dim);
            let fneg = row(&final_rec, ineg, dim);
            let diff = dot(fu, fp) - dot(fu, fneg);
            bpr += softplus(-diff);
            if let Some(g) = g_rec.as_deref_mut() {
                // d softplus(-x)/dx = -sigmoid(-x)
                let c = -sigmoid(-diff) * rec_weight;
                for d in 0..dim {
                    g[u * dim + d] += c * (fp[d] - fneg[d]);
                    g[ip * dim + d] += c * fu[d];
                    g[ineg * dim + d] -= c * fu[d];
                }
            }
        }
    }
    let mut touched: Vec<usize> = batch.unique_users();
    touched.extend(batch.unique_items().into_iter().map(|i| m + i));
    let mut l2 = 0.0;
    for &r in &touched {
        let e = e0.row(r);
        l2 += dot(e, e);
        if want_grad {
            let coef = 2.0 * cfg.lambda * rec_weight;
            for (g, x) in grad_e0[r * dim..(r + 1) * dim].iter_mut().zip(e) {
                *g += coef * x;
            }
        }
    }
    let rec = bpr + cfg.lambda * l2;

    // Consistency terms.
    let mut cr_item = 0.0;
    let mut cr_user = 0.0;
    let wants_cr = cfg.mu != 0.0 && (cfg.terms.cr_item || cfg.terms.cr_user);
    if let (true, Some((ga, gb))) = (wants_cr, graphs.views) {
        check_graph(ga, e0)?;
        check_graph(gb, e0)?;
        let prop = |g: &BipartiteGraph| -> Vec<f64> {
            if std::ptr::eq(g, graphs.rec) {
                final_rec.clone()
            } else {
                propagate_raw(e0.as_slice(), g, cfg.layers, dim)
            }
        };
        let za = prop(ga);
        let zb = if std::ptr::eq(ga, gb) { za.clone() } else { prop(gb) };
        let split = m * dim;
        for (enabled, is_item) in [(cfg.terms.cr_item, true), (cfg.terms.cr_user, false)] {
            let (block_a, block_b, anchors, offset) = if is_item {
                (&za[split..], &zb[split..], batch.unique_items(), split)
            } else {
                (&za[..split], &zb[..split], batch.unique_users(), 0)
            };
            if anchors.is_empty() {
                continue;
            }
            let (terms, outcome) = info_nce_core(block_a, block_b, dim, &anchors, cfg.denominator, cfg.tau, want_grad)
                .map_err(|e| match e {
                    Error::DegenerateRow { row } => Error::DegenerateRow { row: row + offset / dim },
                    other => other,
                })?;
            let value: f64 = terms.iter().sum();
            if is_item {
                cr_item = value;
            } else {
                cr_user = value;
            }
            if let (true, Some(out)) = (enabled, outcome) {
                debug_assert_eq!(out.loss, value);
                let w = cfg.mu;
                let slot_a = grads.slot(ga, len);
                for (g, x) in slot_a[offset..offset + out.grad_a.len()].iter_mut().zip(&out.grad_a) {
                    *g += w * x;
                }
                let slot_b = grads.slot(gb, len);
                for (g, x) in slot_b[offset..offset + out.grad_b.len()].iter_mut().zip(&out.grad_b) {
                    *g += w * x;
                }
            }
        }
    }

    let mut total = rec_weight * rec;
    let cr_weighted = (if cfg.terms.cr_item { cr_item } else { 0.0 }) + (if cfg.terms.cr_user { cr_user } else { 0.0 });
    total += cfg.mu * cr_weighted;
    let report = LossReport {
        rec,
        cr_item,
        cr_user,
        l2,
        total,
    };
    for v in [rec, cr_item, cr_user, l2, total] {
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite loss value {v}")));
        }
    }
    if !want_grad {
        return Ok((report, None));
    }

    for (g, out_grad) in grads.slots {
        let back = propagate_raw(&out_grad, g, cfg.layers, dim);
        for (d, s) in grad_e0.iter_mut().zip(&back) {
            *d += s;
        }
    }
    let table = EmbeddingTable::from_vec(m, e0.num_items(), dim, grad_e0)?;
    Ok((report, Some(GradientTable(table))))
}
