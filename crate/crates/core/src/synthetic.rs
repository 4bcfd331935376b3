//! Seeded long-tail interaction generator with a planted low-rank preference
//! structure.
//!
//! Items get Zipf popularity weights over a random popularity rank. Users and
//! items get unit latent factors; a user picks `c_u` distinct items with
//! probability proportional to `popularity * exp(affinity * <u, v>)` (Gumbel
//! top-k sampling).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionSet;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub rank: usize,
    pub zipf_exponent: f64,
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub affinity: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 1000,
            items: 500,
            rank: 8,
            zipf_exponent: 1.0,
            min_interactions: 15,
            max_interactions: 40,
            affinity: 4.0,
            seed: 7,
        }
    }
}

fn unit_factors<R: Rng>(n: usize, rank: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..rank).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect()
}

pub fn generate(cfg: &SyntheticConfig) -> Result<InteractionSet> {
    if cfg.users == 0 || cfg.items == 0 || cfg.rank == 0 {
        return Err(Error::Config("synthetic users, items and rank must be positive".into()));
    }
    if cfg.min_interactions == 0 || cfg.min_interactions > cfg.max_interactions || cfg.max_interactions > cfg.items {
        return Err(Error::Config(
            "synthetic interaction counts must satisfy 1 <= min <= max <= items".into(),
        ));
    }
    let mut rng = rng::stream(cfg.seed, "synthetic", 0);
    let mut pop_rank: Vec<usize> = (0..cfg.items).collect();
    pop_rank.shuffle(&mut rng);
    let log_pop: Vec<f64> = pop_rank
        .iter()
        .map(|&r| -cfg.zipf_exponent * ((r + 1) as f64).ln())
        .collect();
    let users = unit_factors(cfg.users, cfg.rank, &mut rng);
    let items = unit_factors(cfg.items, cfg.rank, &mut rng);

    let mut pairs = Vec::new();
    for (u, uf) in users.iter().enumerate() {
        let count = rng.random_range(cfg.min_interactions..=cfg.max_interactions);
        let mut keyed: Vec<(f64, u32)> = items
            .iter()
            .enumerate()
            .map(|(i, vf)| {
                let affinity: f64 = uf.iter().zip(vf).map(|(a, b)| a * b).sum();
                let uniform: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                let gumbel = -(-uniform.ln()).ln();
                (log_pop[i] + cfg.affinity * affinity + gumbel, i as u32)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        pairs.extend(keyed[..count].iter().map(|&(_, i)| (u as u32, i)));
    }
    InteractionSet::from_ids(cfg.users, cfg.items, pairs)
}
