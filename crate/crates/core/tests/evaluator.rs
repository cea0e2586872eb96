mod common;

use mabsrec::evaluator::{
    buckets_from_edges, evaluate, model_ranks, ndcg_at_n, parse_bucket_edges, rank_items, recall_at_n, EvalReport,
    DEFAULT_BUCKET_EDGES,
};
use mabsrec::model::Model;
use proptest::prelude::*;

use common::*;

fn ranking(n: usize, seed: u64) -> Vec<u32> {
    let mut items: Vec<u32> = (1..=n as u32).collect();
    let mut x = seed;
    for i in (1..items.len()).rev() {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        items.swap(i, (x >> 33) as usize % (i + 1));
    }
    items
}

proptest! {
    #[test]
    fn ndcg_never_exceeds_recall(n in 1usize..60, seed: u64, pick in 0usize..60, cut in 1usize..70) {
        let ranked = ranking(n, seed);
        let target = ranked[pick % n];
        prop_assert!(ndcg_at_n(&ranked, target, cut).unwrap() <= recall_at_n(&ranked, target, cut).unwrap());
    }

    #[test]
    fn metrics_grow_with_cutoff(n in 1usize..60, seed: u64, pick in 0usize..60, cut in 1usize..70) {
        let ranked = ranking(n, seed);
        let target = ranked[pick % n];
        prop_assert!(recall_at_n(&ranked, target, cut).unwrap() <= recall_at_n(&ranked, target, cut + 1).unwrap());
        prop_assert!(ndcg_at_n(&ranked, target, cut).unwrap() <= ndcg_at_n(&ranked, target, cut + 1).unwrap());
    }

    #[test]
    fn buckets_are_a_weighted_partition(
        ranks in prop::collection::vec(1usize..40, 1..200),
        lens in prop::collection::vec(5usize..80, 200),
    ) {
        let lengths = &lens[..ranks.len()];
        let buckets = buckets_from_edges(&DEFAULT_BUCKET_EDGES).unwrap();
        let report = EvalReport::from_ranks(&ranks, lengths, Some(&buckets));
        let users: usize = report.buckets.iter().map(|b| b.users).sum();
        prop_assert_eq!(users, ranks.len());
        for metric in report.metrics.keys() {
            let weighted: f64 = report.buckets.iter().map(|b| b.metrics[metric] * b.users as f64).sum::<f64>()
                / ranks.len() as f64;
            prop_assert!((weighted - report.metric(metric)).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_ranking_is_an_error() {
    assert!(ndcg_at_n(&[], 1, 5).is_err());
}

#[test]
fn cutoff_examples() {
    let ranked: Vec<u32> = (1..=10).collect();
    assert_eq!(ndcg_at_n(&ranked, 1, 5).unwrap(), 1.0);
    assert_eq!(ndcg_at_n(&ranked, 6, 5).unwrap(), 0.0);
    assert_eq!(recall_at_n(&ranked, 10, 10).unwrap(), 1.0);
    assert_eq!(recall_at_n(&ranked, 10, 9).unwrap(), 0.0);
}

#[test]
fn ties_rank_lower_index_first() {
    assert_eq!(rank_items(&[0.5, 0.9, 0.5, 0.9]), vec![2, 4, 1, 3]);
}

#[test]
fn default_edges_give_four_reports_for_filtered_corpora() {
    let edges = parse_bucket_edges("5,10,20,50").unwrap();
    let buckets = buckets_from_edges(&edges).unwrap();
    let ranks = [1, 2, 3, 4, 5, 6];
    let lengths = [5, 9, 10, 25, 50, 300];
    let report = EvalReport::from_ranks(&ranks, &lengths, Some(&buckets));
    let labels: Vec<_> = report.buckets.iter().map(|b| b.range.as_str()).collect();
    assert_eq!(labels, ["[5,10)", "[10,20)", "[20,50)", "[50,inf)"]);
    assert_eq!(report.buckets.iter().map(|b| b.users).collect::<Vec<_>>(), [2, 1, 1, 2]);
}

#[test]
fn perfect_scores_give_perfect_metrics() {
    let ranks = vec![1; 17];
    let report = EvalReport::from_ranks(&ranks, &[5; 17], None);
    assert!(report.metrics.values().all(|&v| v == 1.0));
}

#[test]
fn seen_items_filter_only_raises_the_target() {
    let (data, config) = toy_data();
    let (model, params) = Model::new(data.n_items, data.normalized.clone(), &config).unwrap();
    let plain = model_ranks(&model, &params, &data.test, false).unwrap();
    let filtered = model_ranks(&model, &params, &data.test, true).unwrap();
    assert!(plain.iter().zip(&filtered).all(|(p, f)| f <= p));
    assert!(plain.iter().zip(&filtered).any(|(p, f)| f < p));
    let report = evaluate(&model, &params, &data.test, None).unwrap();
    assert_eq!(report.users, data.test.len());
}
