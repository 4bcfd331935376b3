//! Independent reference implementations shared by the integration tests.
//! Everything here is deliberately naive: dense matrices, full sorts, and
//! plain loops, with no code shared with the library's fast paths.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ucc::dataset::InteractionSet;
use ucc::encoder::EmbeddingTable;
use ucc::graph::BipartiteGraph;
use ucc::losses::{total_loss, total_loss_and_grad, LossConfig, ObjectiveGraphs, Terms, TripleBatch};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_table(m: usize, n: usize, d: usize, rng: &mut ChaCha8Rng) -> EmbeddingTable {
    let data = (0..(m + n) * d).map(|_| StandardNormal.sample(rng)).collect();
    EmbeddingTable::from_vec(m, n, d, data).unwrap()
}

/// Each pair present with probability `p`.
pub fn random_edges(m: usize, n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<(u32, u32)> {
    let mut edges = Vec::new();
    for u in 0..m as u32 {
        for i in 0..n as u32 {
            if rng.random_bool(p) {
                edges.push((u, i));
            }
        }
    }
    edges
}

/// Dense `Â` over users then items with `1/sqrt(d_u d_i)` on every edge.
pub fn dense_adjacency(m: usize, n: usize, edges: &[(u32, u32)]) -> Vec<Vec<f64>> {
    let size = m + n;
    let mut adj = vec![vec![0.0; size]; size];
    for &(u, i) in edges {
        adj[u as usize][m + i as usize] = 1.0;
        adj[m + i as usize][u as usize] = 1.0;
    }
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    for a in 0..size {
        for b in 0..size {
            if adj[a][b] != 0.0 {
                adj[a][b] = 1.0 / (deg[a] * deg[b]).sqrt();
            }
        }
    }
    adj
}

/// Mean of `Â^l E` for `l = 0..=layers`, by repeated dense products.
pub fn dense_propagate(adj: &[Vec<f64>], e: &[Vec<f64>], layers: usize) -> Vec<Vec<f64>> {
    let size = e.len();
    let dim = e.first().map_or(0, Vec::len);
    let mut cur = e.to_vec();
    let mut acc = e.to_vec();
    for _ in 0..layers {
        let mut next = vec![vec![0.0; dim]; size];
        for a in 0..size {
            for b in 0..size {
                for k in 0..dim {
                    next[a][k] += adj[a][b] * cur[b][k];
                }
            }
        }
        for a in 0..size {
            for k in 0..dim {
                acc[a][k] += next[a][k];
            }
        }
        cur = next;
    }
    let scale = (layers + 1) as f64;
    acc.iter().map(|r| r.iter().map(|x| x / scale).collect()).collect()
}

pub fn rows(t: &EmbeddingTable) -> Vec<Vec<f64>> {
    (0..t.num_rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn brute_recall(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    let top: std::collections::BTreeSet<u32> = ranked.iter().take(k).copied().collect();
    let rel: std::collections::BTreeSet<u32> = relevant.iter().copied().collect();
    top.intersection(&rel).count() as f64 / rel.len() as f64
}

pub fn brute_ndcg(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            dcg += 1.0 / ((pos + 2) as f64).ln() * std::f64::consts::LN_2;
        }
    }
    let mut idcg = 0.0;
    for pos in 0..k.min(relevant.len()) {
        idcg += 1.0 / ((pos + 2) as f64).ln() * std::f64::consts::LN_2;
    }
    dcg / idcg
}

/// Full sort of every non-excluded item by (score desc, id asc).
pub fn brute_top_k(table: &EmbeddingTable, u: u32, k: usize, exclude: &[u32]) -> Vec<u32> {
    let mut all: Vec<(f64, u32)> = (0..table.num_items() as u32)
        .filter(|i| !exclude.contains(i))
        .map(|i| (naive_dot(table.user(u), table.item(i)), i))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

pub struct BruteReport {
    pub users: usize,
    pub recall: f64,
    pub ndcg: f64,
}

pub fn brute_evaluate(table: &EmbeddingTable, test: &InteractionSet, train: &InteractionSet, k: usize) -> BruteReport {
    let (mut recall, mut ndcg, mut users) = (0.0, 0.0, 0);
    for u in 0..table.num_users() as u32 {
        let relevant: Vec<u32> = test.pairs().iter().filter(|p| p.0 == u).map(|p| p.1).collect();
        if relevant.is_empty() {
            continue;
        }
        let seen: Vec<u32> = train.pairs().iter().filter(|p| p.0 == u).map(|p| p.1).collect();
        let top = brute_top_k(table, u, k, &seen);
        recall += brute_recall(&top, &relevant, k);
        ndcg += brute_ndcg(&top, &relevant, k);
        users += 1;
    }
    let n = users.max(1) as f64;
    BruteReport {
        users,
        recall: recall / n,
        ndcg: ndcg / n,
    }
}

/// Every (user, item) pair tested against the threshold, then the per-item
/// cap applied after a full sort.
pub fn enumerate_pseudo(table: &EmbeddingTable, train: &InteractionSet, alpha: f64, k_cap: usize) -> Vec<(u32, u32)> {
    let m = table.num_users();
    let mut out = Vec::new();
    for i in 0..table.num_items() as u32 {
        let item = table.item(i);
        let mut sum = 0.0;
        for u in 0..m as u32 {
            sum += naive_dot(table.user(u), item);
        }
        let threshold = alpha * (sum / m as f64);
        let mut survivors = Vec::new();
        for u in 0..m as u32 {
            if train.pairs().contains(&(u, i)) {
                continue;
            }
            let user = table.user(u);
            let d = (naive_dot(user, item).abs() / (naive_dot(user, user).sqrt() * naive_dot(item, item).sqrt())).min(1.0);
            if d > threshold {
                survivors.push((d, u));
            }
        }
        survivors.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        out.extend(survivors.into_iter().take(k_cap).map(|(_, u)| (u, i)));
    }
    out.sort_unstable();
    out
}

/// Greedy popularity sweep written out step by step.
pub fn sweep_groups(pop: &[usize], groups: usize) -> Vec<usize> {
    let total: usize = pop.iter().sum();
    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by(|&a, &b| pop[a].cmp(&pop[b]).then(a.cmp(&b)));
    let mut out = vec![0; pop.len()];
    let mut g = 0;
    let mut acc = 0.0;
    for i in order {
        out[i] = g;
        acc += pop[i] as f64;
        let share = (g + 1) as f64 * total as f64 / groups as f64;
        if g + 1 < groups && acc >= share - 1e-9 {
            g += 1;
        }
    }
    out
}

/// Repeatedly removes every user and item below `k`, until stable.
pub fn brute_kcore(pairs: &[(String, String)], k: usize) -> std::collections::BTreeSet<(String, String)> {
    let mut cur: std::collections::BTreeSet<(String, String)> = pairs.iter().cloned().collect();
    loop {
        let mut ud = std::collections::BTreeMap::new();
        let mut id = std::collections::BTreeMap::new();
        for (u, i) in &cur {
            *ud.entry(u.clone()).or_insert(0) += 1;
            *id.entry(i.clone()).or_insert(0) += 1;
        }
        let next: std::collections::BTreeSet<_> = cur.iter().filter(|(u, i)| ud[u] >= k && id[i] >= k).cloned().collect();
        if next.len() == cur.len() {
            return cur;
        }
        cur = next;
    }
}

pub struct GradCase {
    pub table: EmbeddingTable,
    pub batch: TripleBatch,
    pub rec: BipartiteGraph,
    pub view_a: BipartiteGraph,
    pub view_b: BipartiteGraph,
    pub layers: usize,
}

/// Small random objective instance: M, N <= 6, D <= 4, L <= 3.
pub fn grad_case(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let m = r.random_range(2..=6);
    let n = r.random_range(2..=6);
    let d = r.random_range(1..=4);
    let layers = r.random_range(0..=3);
    let table = random_table(m, n, d, &mut r);
    let graph = |r: &mut ChaCha8Rng, p: f64| BipartiteGraph::from_edges(m, n, random_edges(m, n, p, r));
    let rec = graph(&mut r, 0.5);
    let view_a = graph(&mut r, 0.4);
    let view_b = graph(&mut r, 0.6);
    let triples = (0..r.random_range(1..=6))
        .map(|_| {
            let u = r.random_range(0..m as u32);
            let p = r.random_range(0..n as u32);
            let q = (p + r.random_range(1..n as u32)) % n as u32;
            (u, p, q)
        })
        .collect();
    GradCase {
        table,
        batch: TripleBatch::new(triples),
        rec,
        view_a,
        view_b,
        layers,
    }
}

pub fn term_config(layers: usize, terms: Terms) -> LossConfig {
    LossConfig {
        lambda: 0.05,
        mu: 0.7,
        tau: 0.5,
        layers,
        terms,
        ..LossConfig::default()
    }
}

/// Largest per-entry `|analytic - fd| / max(|analytic|, |fd|, floor)`.
pub fn fd_relative_error(case: &GradCase, cfg: &LossConfig, h: f64, floor: f64) -> f64 {
    let graphs = ObjectiveGraphs {
        rec: &case.rec,
        views: Some((&case.view_a, &case.view_b)),
    };
    let (_, grad) = total_loss_and_grad(&case.table, &case.batch, graphs, cfg).unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..case.table.as_slice().len() {
        let mut plus = case.table.clone();
        plus.as_mut_slice()[j] += h;
        let mut minus = case.table.clone();
        minus.as_mut_slice()[j] -= h;
        let lp = total_loss(&plus, &case.batch, graphs, cfg).unwrap().total;
        let lm = total_loss(&minus, &case.batch, graphs, cfg).unwrap().total;
        let fd = (lp - lm) / (2.0 * h);
        let a = grad.as_slice()[j];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

pub const TERM_SETS: [(&str, Terms); 4] = [
    (
        "rec",
        Terms {
            rec: true,
            cr_item: false,
            cr_user: false,
        },
    ),
    (
        "cr_item",
        Terms {
            rec: false,
            cr_item: true,
            cr_user: false,
        },
    ),
    (
        "cr_user",
        Terms {
            rec: false,
            cr_item: false,
            cr_user: true,
        },
    ),
    (
        "total",
        Terms {
            rec: true,
            cr_item: true,
            cr_user: true,
        },
    ),
];
