use std::collections::{BTreeMap, BTreeSet};

use poolbias::data::{GroundTruth, RankedList, Run};
use poolbias::eval::{mrr_at_k, ndcg_at_k, recall_at_k};
use proptest::prelude::*;

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

fn dcg(order: &[usize], rel: &BTreeSet<usize>, k: usize) -> f64 {
    order
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| {
            let gain = if rel.contains(d) { 1.0 } else { 0.0 };
            (2f64.powf(gain) - 1.0) / ((i + 2) as f64).log2()
        })
        .sum()
}

fn run_of(order: &[usize]) -> Run {
    let n = order.len() as f64;
    let list = RankedList::from_scores("q", order.iter().enumerate().map(|(i, d)| (format!("d{d}"), n - i as f64)))
        .unwrap();
    Run::from([("q".to_string(), list)])
}

fn truth_of(rel: &BTreeSet<usize>) -> GroundTruth {
    GroundTruth::new(BTreeMap::from([("q".to_string(), rel.iter().map(|d| format!("d{d}")).collect())]))
}

#[test]
fn metrics_match_brute_force_on_every_ranking_of_six_docs() {
    let docs: Vec<usize> = (0..6).collect();
    let all = permutations(&docs);
    assert_eq!(all.len(), 720);
    for mask in 1u32..(1 << 6) {
        let rel: BTreeSet<usize> = docs.iter().copied().filter(|d| mask & (1 << d) != 0).collect();
        let truth = truth_of(&rel);
        for k in 1..=6 {
            let ideal = all.iter().map(|p| dcg(p, &rel, k)).fold(0.0, f64::max);
            for order in all.iter().step_by(7) {
                let run = run_of(order);
                let rr = order.iter().take(k).position(|d| rel.contains(d)).map_or(0.0, |i| 1.0 / (i as f64 + 1.0));
                let hits = order.iter().take(k).filter(|d| rel.contains(d)).count();
                let m = mrr_at_k(&run, &truth, k).unwrap().macro_avg;
                let n = ndcg_at_k(&run, &truth, k).unwrap().macro_avg;
                let r = recall_at_k(&run, &truth, k).unwrap().macro_avg;
                assert!((m - rr).abs() < 1e-12);
                assert!((n - dcg(order, &rel, k) / ideal).abs() < 1e-12, "{order:?} {rel:?} {k}");
                assert!((r - hits as f64 / rel.len() as f64).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_monotone_in_k(
        scores in prop::collection::vec(-5.0f64..5.0, 1..30),
        rel_mask in prop::collection::vec(any::<bool>(), 30),
    ) {
        let list = RankedList::from_scores("q", scores.iter().enumerate().map(|(i, s)| (format!("d{i}"), *s))).unwrap();
        let run = Run::from([("q".to_string(), list)]);
        let rel: BTreeSet<String> = (0..scores.len()).filter(|i| rel_mask[*i]).map(|i| format!("d{i}")).collect();
        prop_assume!(!rel.is_empty());
        let truth = GroundTruth::new(BTreeMap::from([("q".to_string(), rel)]));
        let (mut last_mrr, mut last_recall) = (0.0, 0.0);
        for k in 1..=scores.len() + 2 {
            let m = mrr_at_k(&run, &truth, k).unwrap().macro_avg;
            let r = recall_at_k(&run, &truth, k).unwrap().macro_avg;
            let n = ndcg_at_k(&run, &truth, k).unwrap().macro_avg;
            for v in [m, r, n] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            prop_assert!(m >= last_mrr && r >= last_recall);
            last_mrr = m;
            last_recall = r;
        }
        prop_assert!((last_recall - 1.0).abs() < 1e-12);
    }
}
