//! Embedding storage, LightGCN propagation and dot-product scoring.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UCCEMB1\n";

/// `(M+N) x D` row-major table. Rows `0..M` are users, `M..M+N` items.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    num_users: usize,
    num_items: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> EmbeddingTable {
        EmbeddingTable {
            num_users,
            num_items,
            dim,
            data: vec![0.0; (num_users + num_items) * dim],
        }
    }

    pub fn from_vec(num_users: usize, num_items: usize, dim: usize, data: Vec<f64>) -> Result<EmbeddingTable> {
        let expected = (num_users + num_items) * dim;
        if data.len() != expected {
            return Err(Error::shape(expected, data.len()));
        }
        Ok(EmbeddingTable {
            num_users,
            num_items,
            dim,
            data,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_rows(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn user(&self, u: u32) -> &[f64] {
        self.row(u as usize)
    }

    pub fn item(&self, i: u32) -> &[f64] {
        self.row(self.num_users + i as usize)
    }

    /// The user block as one contiguous slice.
    pub fn users_block(&self) -> &[f64] {
        &self.data[..self.num_users * self.dim]
    }

    pub fn items_block(&self) -> &[f64] {
        &self.data[self.num_users * self.dim..]
    }

    pub fn same_shape(&self, other: &EmbeddingTable) -> bool {
        self.num_users == other.num_users && self.num_items == other.num_items && self.dim == other.dim
    }

    pub fn shape_str(&self) -> String {
        format!("({}+{})x{}", self.num_users, self.num_items, self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 24 + self.data.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for n in [self.num_users, self.num_items, self.dim] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingTable> {
        if bytes.len() < 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing UCCEMB1 header".into()));
        }
        let word = |k: usize| {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[8 + 8 * k..16 + 8 * k]);
            u64::from_le_bytes(b) as usize
        };
        let (m, n, d) = (word(0), word(1), word(2));
        let count = (m + n)
            .checked_mul(d)
            .ok_or_else(|| Error::Checkpoint("dimensions overflow".into()))?;
        let body = &bytes[32..];
        if body.len() != count * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} payload bytes for {m}+{n} rows of dim {d}, found {}",
                count * 8,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        EmbeddingTable::from_vec(m, n, d, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EmbeddingTable> {
        EmbeddingTable::from_bytes(&fs::read(path)?)
    }
}

/// I.i.d. `N(0, scale^2)` entries, deterministic per seed.
pub fn init_embeddings(num_users: usize, num_items: usize, dim: usize, seed: u64, scale: f64) -> Result<EmbeddingTable> {
    if num_users == 0 || num_items == 0 || dim == 0 {
        return Err(Error::InvalidArgument("embedding table needs M, N, D >= 1".into()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("init scale must be positive, got {scale}")));
    }
    let normal = Normal::new(0.0, scale).expect("positive finite std");
    let mut rng = rng::stream(seed, "init", 0);
    let data = (0..(num_users + num_items) * dim).map(|_| normal.sample(&mut rng)).collect();
    EmbeddingTable::from_vec(num_users, num_items, dim, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationOutput {
    pub final_embeddings: EmbeddingTable,
    /// Layer 0 is the input table; layer `l+1 = A_hat * layer l`.
    pub layers: Vec<Vec<f64>>,
}

impl PropagationOutput {
    pub fn num_users(&self) -> usize {
        self.final_embeddings.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.final_embeddings.num_items()
    }
}

fn check_graph(g: &BipartiteGraph, num_users: usize, num_items: usize) -> Result<()> {
    if g.num_users() != num_users || g.num_items() != num_items {
        return Err(Error::shape(
            format!("graph over {num_users}+{num_items} nodes"),
            format!("{}+{}", g.num_users(), g.num_items()),
        ));
    }
    Ok(())
}

/// `out = A_hat * x` for row-major `x` with `dim` columns.
fn spmm(g: &BipartiteGraph, x: &[f64], out: &mut [f64], dim: usize) {
    out.par_chunks_mut(dim).enumerate().for_each(|(v, dst)| {
        dst.fill(0.0);
        let (cols, coeffs) = g.row(v);
        for (&w, &c) in cols.iter().zip(coeffs) {
            let src = &x[w as usize * dim..(w as usize + 1) * dim];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += c * s;
            }
        }
    });
}

/// Layer-mean propagation without retaining the intermediate layers.
///
/// The propagation matrix `(1/(L+1)) sum_l A_hat^l` is symmetric, so the same
/// routine maps gradients with respect to the output back onto the input.
pub fn propagate_raw(x: &[f64], g: &BipartiteGraph, layers: usize, dim: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), g.num_nodes() * dim);
    let mut acc = x.to_vec();
    if layers == 0 {
        return acc;
    }
    let mut cur = x.to_vec();
    let mut next = vec![0.0; x.len()];
    for _ in 0..layers {
        spmm(g, &cur, &mut next, dim);
        for (a, n) in acc.iter_mut().zip(&next) {
            *a += n;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    let scale = 1.0 / (layers as f64 + 1.0);
    for a in &mut acc {
        *a *= scale;
    }
    acc
}

pub fn propagate_final(e0: &EmbeddingTable, g: &BipartiteGraph, layers: usize) -> Result<EmbeddingTable> {
    check_graph(g, e0.num_users(), e0.num_items())?;
    let data = propagate_raw(e0.as_slice(), g, layers, e0.dim());
    EmbeddingTable::from_vec(e0.num_users(), e0.num_items(), e0.dim(), data)
}

/// Full propagation keeping every layer.
pub fn propagate(e0: &EmbeddingTable, g: &BipartiteGraph, layers: usize) -> Result<PropagationOutput> {
    check_graph(g, e0.num_users(), e0.num_items())?;
    let dim = e0.dim();
    let mut all = Vec::with_capacity(layers + 1);
    all.push(e0.as_slice().to_vec());
    for l in 0..layers {
        let mut next = vec![0.0; e0.as_slice().len()];
        spmm(g, &all[l], &mut next, dim);
        all.push(next);
    }
    let mut mean = vec![0.0; e0.as_slice().len()];
    for layer in &all {
        for (m, x) in mean.iter_mut().zip(layer) {
            *m += x;
        }
    }
    let scale = 1.0 / (layers as f64 + 1.0);
    for m in &mut mean {
        *m *= scale;
    }
    Ok(PropagationOutput {
        final_embeddings: EmbeddingTable::from_vec(e0.num_users(), e0.num_items(), dim, mean)?,
        layers: all,
    })
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn score(out: &PropagationOutput, u: u32, i: u32) -> f64 {
    let e = &out.final_embeddings;
    dot(e.user(u), e.item(i))
}

/// Scores of every item for user `u`.
pub fn user_scores(e: &EmbeddingTable, u: u32) -> Vec<f64> {
    let user = e.user(u);
    (0..e.num_items() as u32).map(|i| dot(user, e.item(i))).collect()
}

/// Descending score, ties by ascending id. Adding 0.0 maps -0.0 to 0.0 so
/// the two zeros tie.
fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0))
}

/// The `k` best items among those with `excluded[i] == false`.
pub fn top_k_from_scores(scores: &[f64], k: usize, excluded: &[bool]) -> Vec<u32> {
    let mut cand: Vec<(u32, f64)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.get(*i).copied().unwrap_or(false))
        .map(|(i, &s)| (i as u32, s))
        .collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k, rank_order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(rank_order);
    cand.into_iter().map(|(i, _)| i).collect()
}

pub fn top_k(out: &PropagationOutput, u: u32, k: usize, exclude: &[u32]) -> Vec<u32> {
    let scores = user_scores(&out.final_embeddings, u);
    let mut mask = vec![false; scores.len()];
    for &i in exclude {
        if let Some(m) = mask.get_mut(i as usize) {
            *m = true;
        }
    }
    top_k_from_scores(&scores, k, &mask)
}
