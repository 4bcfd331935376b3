//! Uncertainty-aware pseudo-interaction generation from a trained teacher.
//!
//! For every item `n`, users with an unobserved pair are kept when their
//! absolute cosine `d_mn` beats `alpha * s_bar_n` (the item's mean dot-product
//! score over all users); at most `k_cap` survivors with the highest `d_mn`
//! are retained per item.

use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::dataset::InteractionSet;
use crate::encoder::{dot, EmbeddingTable, PropagationOutput};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoInteraction {
    pub user: u32,
    pub item: u32,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoInteractionSet {
    triples: Vec<PseudoInteraction>,
    pub alpha: f64,
    pub k_cap: usize,
}

fn export_order(a: &PseudoInteraction, b: &PseudoInteraction) -> std::cmp::Ordering {
    a.item
        .cmp(&b.item)
        .then(b.similarity.total_cmp(&a.similarity))
        .then(a.user.cmp(&b.user))
}

impl PseudoInteractionSet {
    /// Sorts into export order: item, descending similarity, user.
    pub fn from_triples(mut triples: Vec<PseudoInteraction>, alpha: f64, k_cap: usize) -> PseudoInteractionSet {
        triples.sort_by(export_order);
        PseudoInteractionSet { triples, alpha, k_cap }
    }

    pub fn empty(alpha: f64, k_cap: usize) -> PseudoInteractionSet {
        PseudoInteractionSet::from_triples(Vec::new(), alpha, k_cap)
    }

    pub fn triples(&self) -> &[PseudoInteraction] {
        &self.triples
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.triples.iter().map(|t| (t.user, t.item))
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Number of generated interactions per item.
    pub fn per_item_counts(&self, num_items: usize) -> Vec<usize> {
        let mut c = vec![0; num_items];
        for t in &self.triples {
            c[t.item as usize] += 1;
        }
        c
    }

    /// `user<TAB>item<TAB>similarity` lines, similarity with 17 significant
    /// digits.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.triples {
            writeln!(w, "{}\t{}\t{}", t.user, t.item, format_sig17(t.similarity))?;
        }
        Ok(())
    }

    pub fn to_tsv_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_tsv(&mut out).expect("writing to memory");
        out
    }

    pub fn read_tsv<R: BufRead>(reader: R, alpha: f64, k_cap: usize) -> Result<PseudoInteractionSet> {
        let mut triples = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| Error::MalformedLine {
                line_no: idx + 1,
                reason: reason.to_owned(),
            };
            let mut f = line.split('\t');
            let mut next = |what: &str| f.next().ok_or_else(|| bad(what));
            let user = next("missing user")?.trim().parse().map_err(|_| bad("bad user id"))?;
            let item = next("missing item")?.trim().parse().map_err(|_| bad("bad item id"))?;
            let similarity = next("missing similarity")?.trim().parse().map_err(|_| bad("bad similarity"))?;
            triples.push(PseudoInteraction { user, item, similarity });
        }
        Ok(PseudoInteractionSet::from_triples(triples, alpha, k_cap))
    }
}

/// Positional decimal with exactly 17 significant digits.
pub fn format_sig17(x: f64) -> String {
    if x == 0.0 {
        return "0.0000000000000000".to_owned();
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if mantissa.starts_with('-') { "-" } else { "" };
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let point = exp + 1;
    let body = if point <= 0 {
        format!("0.{}{digits}", "0".repeat((-point) as usize))
    } else if point as usize >= digits.len() {
        format!("{digits}{}", "0".repeat(point as usize - digits.len()))
    } else {
        let (int, frac) = digits.split_at(point as usize);
        format!("{int}.{frac}")
    };
    format!("{sign}{body}")
}

fn norm(row: &[f64]) -> f64 {
    dot(row, row).sqrt()
}

/// `|u . i| / (|u| |i|)`.
pub fn cosine_similarity(user: &[f64], item: &[f64]) -> Result<f64> {
    let (nu, ni) = (norm(user), norm(item));
    if nu == 0.0 {
        return Err(Error::DegenerateRow { row: 0 });
    }
    if ni == 0.0 {
        return Err(Error::DegenerateRow { row: 1 });
    }
    Ok(abs_cosine(dot(user, item), nu, ni))
}

#[inline]
fn abs_cosine(score: f64, nu: f64, ni: f64) -> f64 {
    (score.abs() / (nu * ni)).min(1.0)
}

/// Mean of the dot-product scores of item `i` over all users.
pub fn item_mean_score(out: &PropagationOutput, i: u32) -> f64 {
    mean_score(&out.final_embeddings, i)
}

fn mean_score(e: &EmbeddingTable, i: u32) -> f64 {
    let item = e.item(i);
    let total: f64 = (0..e.num_users() as u32).map(|u| dot(e.user(u), item)).sum();
    total / e.num_users() as f64
}

/// Threshold-then-cap selection over every item, using the teacher's
/// propagated embeddings.
pub fn generate(teacher: &PropagationOutput, train: &InteractionSet, alpha: f64, k_cap: usize) -> Result<PseudoInteractionSet> {
    generate_from_table(&teacher.final_embeddings, train, alpha, k_cap)
}

pub fn generate_from_table(e: &EmbeddingTable, train: &InteractionSet, alpha: f64, k_cap: usize) -> Result<PseudoInteractionSet> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if k_cap == 0 {
        return Err(Error::InvalidArgument("k_cap must be at least 1".into()));
    }
    if train.num_users() != e.num_users() || train.num_items() != e.num_items() {
        return Err(Error::shape(
            e.shape_str(),
            format!("interactions over {}x{}", train.num_users(), train.num_items()),
        ));
    }
    let m = e.num_users();
    let user_norms: Vec<f64> = (0..m as u32).map(|u| norm(e.user(u))).collect();
    if let Some(u) = user_norms.iter().position(|&n| n == 0.0) {
        return Err(Error::DegenerateRow { row: u });
    }
    let mut observed = vec![Vec::new(); e.num_items()];
    for &(u, i) in train.pairs() {
        observed[i as usize].push(u);
    }
    for users in &mut observed {
        users.sort_unstable();
    }

    let per_item: Vec<Result<Vec<PseudoInteraction>>> = (0..e.num_items() as u32)
        .into_par_iter()
        .map(|i| {
            let item = e.item(i);
            let ni = norm(item);
            if ni == 0.0 {
                return Err(Error::DegenerateRow { row: m + i as usize });
            }
            let scores: Vec<f64> = (0..m as u32).map(|u| dot(e.user(u), item)).collect();
            let threshold = alpha * (scores.iter().sum::<f64>() / m as f64);
            let seen = &observed[i as usize];
            let mut kept: Vec<PseudoInteraction> = scores
                .iter()
                .enumerate()
                .filter(|(u, _)| seen.binary_search(&(*u as u32)).is_err())
                .map(|(u, &s)| PseudoInteraction {
                    user: u as u32,
                    item: i,
                    similarity: abs_cosine(s, user_norms[u], ni),
                })
                .filter(|p| p.similarity > threshold)
                .collect();
            kept.sort_by(export_order);
            kept.truncate(k_cap);
            Ok(kept)
        })
        .collect();

    let mut triples = Vec::new();
    for r in per_item {
        triples.extend(r?);
    }
    Ok(PseudoInteractionSet::from_triples(triples, alpha, k_cap))
}
