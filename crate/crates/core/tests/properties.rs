mod common;

use proptest::prelude::*;

use common::*;
use ucc::dataset::{split, InteractionSet, Ratios};
use ucc::encoder::{propagate_final, top_k_from_scores, EmbeddingTable};
use ucc::eval::{ndcg_at_k, popularity_groups, recall_at_k};
use ucc::generation::{cosine_similarity, generate_from_table, PseudoInteractionSet};
use ucc::graph::{strong_augment, weak_augment, BipartiteGraph};
use ucc::losses::{info_nce_terms, total_loss, LossConfig, ObjectiveGraphs, TripleBatch};
use ucc::pipeline::momentum_accumulate;

fn table_strategy(max_users: usize, max_items: usize, max_dim: usize) -> impl Strategy<Value = EmbeddingTable> {
    (1..=max_users, 1..=max_items, 1..=max_dim).prop_flat_map(|(m, n, d)| {
        prop::collection::vec(-3.0f64..3.0, (m + n) * d).prop_map(move |v| EmbeddingTable::from_vec(m, n, d, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_stay_in_unit_interval(
        perm in Just((0u32..30).collect::<Vec<_>>()).prop_shuffle(),
        len in 0usize..30,
        relevant in prop::collection::btree_set(0u32..30, 1..10),
        k in 1usize..30,
    ) {
        let ranked = &perm[..len];
        let rel: Vec<u32> = relevant.into_iter().collect();
        let r = recall_at_k(ranked, &rel, k);
        let n = ndcg_at_k(ranked, &rel, k);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
    }

    #[test]
    fn ndcg_is_one_iff_relevant_fill_the_top(
        perm in Just((0u32..12).collect::<Vec<_>>()).prop_shuffle(),
        nrel in 1usize..12,
        k in 1usize..12,
    ) {
        let rel: Vec<u32> = (0..nrel as u32).collect();
        let top_ok = perm.iter().take(k.min(nrel)).all(|i| rel.contains(i));
        let n = ndcg_at_k(&perm, &rel, k);
        prop_assert_eq!((n - 1.0).abs() < 1e-12, top_ok);
    }

    #[test]
    fn top_k_is_sorted_and_skips_excluded(
        scores in prop::collection::vec(-5i32..5, 1..40),
        mask_bits in any::<u64>(),
        k in 0usize..45,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let excluded: Vec<bool> = (0..scores.len()).map(|i| mask_bits >> (i % 64) & 1 == 1).collect();
        let top = top_k_from_scores(&scores, k, &excluded);
        let allowed = excluded.iter().filter(|e| !**e).count();
        prop_assert_eq!(top.len(), k.min(allowed));
        prop_assert!(top.iter().all(|&i| !excluded[i as usize]));
        for w in top.windows(2) {
            let (a, b) = (scores[w[0] as usize], scores[w[1] as usize]);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
    }

    #[test]
    fn popularity_groups_partition_items(n in 1usize..60, raw in prop::collection::vec((0u32..20, 0u32..60), 1..200)) {
        let pairs: Vec<(u32, u32)> = raw.into_iter().map(|(u, i)| (u, i % n as u32)).collect();
        let train = InteractionSet::from_ids(20, n, pairs).unwrap();
        let g = popularity_groups(&train, 10);
        prop_assert_eq!(g.assignment.len(), n);
        prop_assert_eq!(g.items_per_group.iter().sum::<usize>(), n);
        prop_assert_eq!(g.interactions_per_group.iter().sum::<usize>(), train.len());
        let pop = train.item_degrees();
        // ascending popularity across groups
        for a in 0..n {
            for b in 0..n {
                if g.assignment[a] < g.assignment[b] {
                    prop_assert!(pop[a] <= pop[b]);
                }
            }
        }
    }

    #[test]
    fn momentum_is_convex(s in table_strategy(5, 5, 3), seed in any::<u64>(), gamma in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let t = random_table(s.num_users(), s.num_items(), s.dim(), &mut r);
        let out = momentum_accumulate(&s, &t, gamma).unwrap();
        for ((o, a), b) in out.as_slice().iter().zip(s.as_slice()).zip(t.as_slice()) {
            prop_assert!(*o >= a.min(*b) && *o <= a.max(*b));
        }
    }

    #[test]
    fn cosine_is_in_unit_interval(a in prop::collection::vec(-4.0f64..4.0, 3), b in prop::collection::vec(-4.0f64..4.0, 3)) {
        prop_assume!(a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0));
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert_eq!(cosine_similarity(&neg, &b).unwrap(), c);
    }

    #[test]
    fn generation_respects_cap_and_train(table in table_strategy(12, 12, 3), seed in any::<u64>(), alpha in 0.01f64..3.0, k_cap in 1usize..6) {
        prop_assume!((0..table.num_rows()).all(|r| table.row(r).iter().any(|x| *x != 0.0)));
        let mut r = rng(seed);
        let train = InteractionSet::from_ids(table.num_users(), table.num_items(), random_edges(table.num_users(), table.num_items(), 0.3, &mut r)).unwrap();
        let got = generate_from_table(&table, &train, alpha, k_cap).unwrap();
        prop_assert!(got.per_item_counts(table.num_items()).iter().all(|&c| c <= k_cap));
        prop_assert!(got.pairs().all(|p| !train.pairs().contains(&p)));
        prop_assert!(got.triples().iter().all(|t| (0.0..=1.0).contains(&t.similarity)));
        // export round trip
        let back = PseudoInteractionSet::read_tsv(&got.to_tsv_bytes()[..], alpha, k_cap).unwrap();
        prop_assert_eq!(back, got);
    }

    #[test]
    fn propagation_is_linear(table in table_strategy(6, 6, 3), seed in any::<u64>(), layers in 0usize..4, c in -3.0f64..3.0) {
        let mut r = rng(seed);
        let g = BipartiteGraph::from_edges(table.num_users(), table.num_items(), random_edges(table.num_users(), table.num_items(), 0.5, &mut r));
        let base = propagate_final(&table, &g, layers).unwrap();
        let scaled_in = EmbeddingTable::from_vec(table.num_users(), table.num_items(), table.dim(), table.as_slice().iter().map(|x| c * x).collect()).unwrap();
        let scaled = propagate_final(&scaled_in, &g, layers).unwrap();
        for (a, b) in scaled.as_slice().iter().zip(base.as_slice()) {
            prop_assert!((a - c * b).abs() <= 1e-12 * (1.0 + b.abs() * c.abs()));
        }
    }

    #[test]
    fn split_partitions_each_user(seed in any::<u64>(), m in 1usize..15, n in 2usize..15) {
        let mut r = rng(seed);
        let mut pairs = random_edges(m, n, 0.5, &mut r);
        for u in 0..m as u32 {
            pairs.push((u, u % n as u32));
        }
        let set = InteractionSet::from_ids(m, n, pairs).unwrap();
        let s = split(&set, Ratios::default(), seed).unwrap();
        let mut all: Vec<(u32, u32)> = s.train.pairs().iter().chain(s.validation.pairs()).chain(s.test.pairs()).copied().collect();
        all.sort_unstable();
        let mut expect = set.pairs().to_vec();
        expect.sort_unstable();
        prop_assert_eq!(all, expect);
        // every user keeps at least one training pair
        prop_assert!(s.train.user_degrees().iter().all(|&d| d > 0));
    }

    #[test]
    fn checkpoint_round_trips(table in table_strategy(6, 6, 4)) {
        prop_assert_eq!(EmbeddingTable::from_bytes(&table.to_bytes()).unwrap(), table);
    }

    #[test]
    fn dropout_keeps_a_subset(seed in any::<u64>(), rho in 0.0f64..0.9) {
        let mut r = rng(seed);
        let g = BipartiteGraph::from_edges(8, 8, random_edges(8, 8, 0.5, &mut r));
        let view = weak_augment(&g, rho, seed);
        prop_assert!(view.edges().iter().all(|&(u, i)| g.has_edge(u, i)));
        prop_assert_eq!((view.num_users(), view.num_items()), (8, 8));
    }

    #[test]
    fn strong_view_adds_exactly_the_pseudo_edges(seed in any::<u64>()) {
        let mut r = rng(seed);
        let table = random_table(8, 8, 3, &mut r);
        let train = InteractionSet::from_ids(8, 8, random_edges(8, 8, 0.3, &mut r)).unwrap();
        let g = BipartiteGraph::from_edges(8, 8, train.pairs().iter().copied());
        let pseudo = generate_from_table(&table, &train, 0.5, 2).unwrap();
        let strong = strong_augment(&g, &pseudo);
        prop_assert_eq!(strong.num_edges(), g.num_edges() + pseudo.len());
        prop_assert!(pseudo.pairs().all(|(u, i)| strong.has_edge(u, i)));
    }

    #[test]
    fn identical_views_favour_the_positive(table in table_strategy(6, 6, 3)) {
        prop_assume!((0..table.num_users()).all(|r| table.row(r).iter().any(|x| *x != 0.0)));
        // numerator is the largest term of each softmax, so terms are at most ln(N)
        let users = table.users_block();
        let terms = info_nce_terms(users, users, table.dim(), 0.2).unwrap();
        let bound = (table.num_users() as f64).ln() + 1e-12;
        prop_assert!(terms.iter().all(|&t| t <= bound && t >= -1e-12));
    }

    #[test]
    fn zero_mu_drops_the_consistency_term(seed in 0u64..1000) {
        let case = grad_case(seed);
        let graphs = ObjectiveGraphs { rec: &case.rec, views: Some((&case.view_a, &case.view_b)) };
        let cfg = LossConfig { mu: 0.0, layers: case.layers, ..LossConfig::default() };
        let with_views = total_loss(&case.table, &case.batch, graphs, &cfg).unwrap();
        let without = total_loss(&case.table, &case.batch, ObjectiveGraphs { rec: &case.rec, views: None }, &cfg).unwrap();
        prop_assert_eq!(with_views.total, without.total);
        prop_assert_eq!(with_views.total, with_views.rec);
    }
}

#[test]
fn batch_anchors_are_unique() {
    let b = TripleBatch::new(vec![(0, 1, 2), (0, 2, 3), (4, 1, 5)]);
    assert_eq!(b.unique_users(), vec![0, 4]);
    assert_eq!(b.unique_items(), vec![1, 2, 3, 5]);
}
