//! Top-K ranking metrics and the popularity-group breakdown.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionSet;
use crate::encoder::{top_k_from_scores, user_scores, EmbeddingTable};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 20;
pub const NUM_GROUPS: usize = 10;
/// The least popular groups are reported as cold-start items.
pub const COLD_GROUPS: usize = 2;

/// Fraction of `relevant` found in the first `k` entries of `ranked`.
pub fn recall_at_k(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    assert!(!relevant.is_empty(), "recall needs a non-empty relevant set");
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-gain NDCG with `1/log2(rank+1)` discounts, ranks from 1.
pub fn ndcg_at_k(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    assert!(!relevant.is_empty(), "ndcg needs a non-empty relevant set");
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Top-K list for one evaluated user together with their held-out items.
#[derive(Clone, Debug, PartialEq)]
pub struct UserRanking {
    pub user: u32,
    pub top: Vec<u32>,
    pub relevant: Vec<u32>,
}

impl UserRanking {
    pub fn recall(&self, k: usize) -> f64 {
        recall_at_k(&self.top, &self.relevant, k)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        ndcg_at_k(&self.top, &self.relevant, k)
    }
}

fn check_space(e: &EmbeddingTable, set: &InteractionSet) -> Result<()> {
    if e.num_users() != set.num_users() || e.num_items() != set.num_items() {
        return Err(Error::shape(
            e.shape_str(),
            format!("interactions over {}x{}", set.num_users(), set.num_items()),
        ));
    }
    Ok(())
}

/// Ranks the full catalog for every user with at least one held-out item,
/// excluding that user's training items.
pub fn rank_users(e: &EmbeddingTable, heldout: &InteractionSet, train: &InteractionSet, k: usize) -> Result<Vec<UserRanking>> {
    check_space(e, heldout)?;
    check_space(e, train)?;
    let relevant = heldout.items_by_user();
    let seen = train.items_by_user();
    let users: Vec<u32> = (0..e.num_users() as u32)
        .filter(|&u| !relevant[u as usize].is_empty())
        .collect();
    Ok(users
        .par_iter()
        .map(|&u| {
            let mut excluded = vec![false; e.num_items()];
            for &i in &seen[u as usize] {
                excluded[i as usize] = true;
            }
            UserRanking {
                user: u,
                top: top_k_from_scores(&user_scores(e, u), k, &excluded),
                relevant: relevant[u as usize].clone(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group_id: usize,
    pub num_items: usize,
    /// Training interactions of the group's items.
    pub num_interactions: usize,
    /// Users with at least one held-out item in the group.
    pub num_users: usize,
    pub cold: bool,
    /// Absent when no user has a held-out item in the group.
    pub recall: Option<f64>,
    pub ndcg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub num_users: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub per_group: Vec<GroupMetrics>,
}

impl MetricsReport {
    /// Mean recall over the cold groups that have users, weighted by users.
    pub fn cold_recall(&self) -> Option<f64> {
        let (sum, n) = self
            .per_group
            .iter()
            .filter(|g| g.cold && g.recall.is_some())
            .fold((0.0, 0usize), |(s, n), g| (s + g.recall.unwrap() * g.num_users as f64, n + g.num_users));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["group_id", "items", "interactions", "users", "recall", "ndcg", "cold"])
            .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for g in &self.per_group {
            out.write_record([
                g.group_id.to_string(),
                g.num_items.to_string(),
                g.num_interactions.to_string(),
                g.num_users.to_string(),
                opt(g.recall),
                opt(g.ndcg),
                g.cold.to_string(),
            ])
            .map_err(io)?;
        }
        out.write_record(["all".to_string(), String::new(), String::new(), self.num_users.to_string(), self.recall.to_string(), self.ndcg.to_string(), String::new()])
            .map_err(io)?;
        out.flush()?;
        Ok(())
    }
}

/// Items bucketed by training popularity, group 0 least popular.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PopularityGroups {
    pub assignment: Vec<usize>,
    pub num_groups: usize,
    pub items_per_group: Vec<usize>,
    pub interactions_per_group: Vec<usize>,
}

impl PopularityGroups {
    pub fn is_cold(&self, group: usize) -> bool {
        group < COLD_GROUPS.min(self.num_groups)
    }

    pub fn items_in(&self, group: usize) -> Vec<u32> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == group)
            .map(|(i, _)| i as u32)
            .collect()
    }
}

/// Sweeps items in ascending popularity (ties by id), moving to the next
/// group once the running interaction count reaches the group's share of the
/// total. Every group's total lands within one maximal item popularity of
/// `total / G`.
pub fn popularity_groups(train: &InteractionSet, num_groups: usize) -> PopularityGroups {
    assert!(num_groups >= 1, "need at least one group");
    let pop = train.item_degrees();
    let total = train.len();
    let mut order: Vec<u32> = (0..pop.len() as u32).collect();
    order.sort_by_key(|&i| (pop[i as usize], i));

    let mut assignment = vec![0; pop.len()];
    let mut items_per_group = vec![0; num_groups];
    let mut interactions_per_group = vec![0; num_groups];
    let mut group = 0;
    let mut cumulative = 0usize;
    for i in order {
        assignment[i as usize] = group;
        items_per_group[group] += 1;
        interactions_per_group[group] += pop[i as usize];
        cumulative += pop[i as usize];
        // cumulative / total >= (group + 1) / G, in integers
        if group + 1 < num_groups && cumulative * num_groups >= (group + 1) * total {
            group += 1;
        }
    }
    PopularityGroups {
        assignment,
        num_groups,
        items_per_group,
        interactions_per_group,
    }
}

/// Metrics per group with each user's relevant set restricted to the group.
pub fn group_report(rankings: &[UserRanking], groups: &PopularityGroups, k: usize) -> Vec<GroupMetrics> {
    (0..groups.num_groups)
        .map(|g| {
            let mut recall = 0.0;
            let mut ndcg = 0.0;
            let mut users = 0;
            for r in rankings {
                let restricted: Vec<u32> = r
                    .relevant
                    .iter()
                    .copied()
                    .filter(|&i| groups.assignment[i as usize] == g)
                    .collect();
                if restricted.is_empty() {
                    continue;
                }
                users += 1;
                recall += recall_at_k(&r.top, &restricted, k);
                ndcg += ndcg_at_k(&r.top, &restricted, k);
            }
            let mean = |s: f64| (users > 0).then(|| s / users as f64);
            GroupMetrics {
                group_id: g,
                num_items: groups.items_per_group[g],
                num_interactions: groups.interactions_per_group[g],
                num_users: users,
                cold: groups.is_cold(g),
                recall: mean(recall),
                ndcg: mean(ndcg),
            }
        })
        .collect()
}

/// Overall and per-popularity-group Recall@K / NDCG@K on `heldout`.
pub fn evaluate(e: &EmbeddingTable, heldout: &InteractionSet, train: &InteractionSet, k: usize) -> Result<MetricsReport> {
    let rankings = rank_users(e, heldout, train, k)?;
    let groups = popularity_groups(train, NUM_GROUPS);
    Ok(report_from_rankings(&rankings, &groups, k))
}

pub fn report_from_rankings(rankings: &[UserRanking], groups: &PopularityGroups, k: usize) -> MetricsReport {
    let n = rankings.len();
    let (recall, ndcg) = rankings
        .iter()
        .fold((0.0, 0.0), |(r, g), u| (r + u.recall(k), g + u.ndcg(k)));
    let denom = n.max(1) as f64;
    MetricsReport {
        k,
        num_users: n,
        recall: recall / denom,
        ndcg: ndcg / denom,
        per_group: group_report(rankings, groups, k),
    }
}
