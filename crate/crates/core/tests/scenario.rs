use enrichrec::evaluation::{evaluate_scenario, hr_at_k, ndcg_at_k, rank_of_target, NextItemScorer};
use enrichrec::scenario::{apply_to_all, enrich, mask_accounting};
use enrichrec::{EvalCase, ItemIndex, MaskPredictor, Result, ScenarioSpec, MASK};
use proptest::prelude::*;

/// Returns `k` items derived from the MASK position and the item before it.
struct EchoPredictor;

impl MaskPredictor for EchoPredictor {
    fn predict_top_k(&self, items: &[ItemIndex], k: usize) -> Result<Vec<ItemIndex>> {
        let pos = items.iter().position(|&i| i == MASK).unwrap();
        let before = if pos == 0 { 0 } else { items[pos - 1] };
        Ok((0..k as ItemIndex).map(|r| 1000 + before * 10 + r).collect())
    }
}

/// Scores by item index: larger index, higher score.
struct IndexScorer;

impl NextItemScorer for IndexScorer {
    fn score(&self, _history: &[ItemIndex], candidates: &[ItemIndex]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|&c| c as f64).collect())
    }
}

fn case(user: u32, prefix: Vec<ItemIndex>, boundaries: Vec<usize>) -> EvalCase {
    EvalCase { user_index: user, prefix, prefix_boundaries: boundaries, target: 50, negatives: vec![10, 60, 70], seen: vec![] }
}

proptest! {
    #[test]
    fn splice_matches_back_to_front_insertion(
        prefix in proptest::collection::vec(2u32..40, 1..12),
        raw_slots in proptest::collection::vec(0usize..100, 0..8),
    ) {
        let slots: Vec<usize> = raw_slots.iter().map(|s| s % (prefix.len() + 1)).collect();
        let e = enrich(&prefix, &slots, &EchoPredictor, 0).unwrap();

        let mut sorted = slots.clone();
        sorted.sort_unstable();
        let mut oracle = prefix.clone();
        let mut groups: Vec<(usize, usize)> = Vec::new();
        for s in sorted {
            match groups.last_mut() {
                Some((g, m)) if *g == s => *m += 1,
                _ => groups.push((s, 1)),
            }
        }
        for &(s, m) in groups.iter().rev() {
            let before = if s == 0 { 0 } else { prefix[s - 1] };
            for r in (0..m as ItemIndex).rev() {
                oracle.insert(s, 1000 + before * 10 + r);
            }
        }
        prop_assert_eq!(&e.items, &oracle);
        prop_assert_eq!(e.items.len(), prefix.len() + slots.len());
        let stripped: Vec<ItemIndex> = e.items.iter().zip(&e.imaginary).filter(|(_, &im)| !im).map(|(&i, _)| i).collect();
        prop_assert_eq!(stripped, prefix);
    }

    #[test]
    fn metrics_match_sort_oracle(target in -5i32..5, others in proptest::collection::vec(-5i32..5, 0..120)) {
        let others: Vec<f64> = others.into_iter().map(f64::from).collect();
        let target = f64::from(target);
        // Sort descending with the target placed after every equal score.
        let mut all: Vec<(f64, bool)> = others.iter().map(|&s| (s, false)).collect();
        all.push((target, true));
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let rank = all.iter().position(|&(_, t)| t).unwrap() + 1;
        prop_assert_eq!(rank_of_target(target, &others).unwrap(), rank);
        let hit = rank <= 10;
        prop_assert_eq!(hr_at_k(rank, 10), if hit { 1.0 } else { 0.0 });
        prop_assert_eq!(ndcg_at_k(rank, 10), if hit { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 });
    }
}

#[test]
fn session_accounting_doubles_for_top_two() {
    let cases = vec![
        case(0, vec![2, 3, 4, 5], vec![0, 2]),
        case(1, vec![6, 7], vec![0]),
        case(2, vec![8, 9, 10], vec![]),
    ];
    let s8 = ScenarioSpec::from_id(8, 0.2).unwrap();
    let s9 = ScenarioSpec::from_id(9, 0.2).unwrap();
    let e8 = apply_to_all(&cases, &s8, Some(&EchoPredictor), 3).unwrap();
    let e9 = apply_to_all(&cases, &s9, Some(&EchoPredictor), 3).unwrap();
    assert_eq!(e8[0].items, vec![2, 1020, 3, 4, 1040, 5]);
    assert_eq!(e9[1].items, vec![6, 1060, 1061, 7]);
    let a8 = mask_accounting(8, &cases, &e8);
    let a9 = mask_accounting(9, &cases, &e9);
    assert_eq!(a8.total_mask_count, 3);
    assert_eq!(a9.total_mask_count, 2 * a8.total_mask_count);
    assert_eq!(a8.median_mask_count, 1.0);
    assert_eq!(a8.candidate_slots, 5 + 3 + 4);
}

#[test]
fn random_placement_is_seeded_per_user() {
    let cases: Vec<EvalCase> = (0..20).map(|u| case(u, (2..12).collect(), vec![])).collect();
    let spec = ScenarioSpec::from_id(5, 0.2).unwrap();
    let a = apply_to_all(&cases, &spec, Some(&EchoPredictor), 9).unwrap();
    assert_eq!(a, apply_to_all(&cases, &spec, Some(&EchoPredictor), 9).unwrap());
    assert_ne!(a, apply_to_all(&cases, &spec, Some(&EchoPredictor), 10).unwrap());
    assert!(a.iter().all(|e| e.imaginary_count() == 4));
    // A single user's placement does not depend on who else is evaluated.
    assert_eq!(apply_to_all(&cases[7..8], &spec, Some(&EchoPredictor), 9).unwrap()[0], a[7]);
}

#[test]
fn evaluate_uses_pessimistic_rank() {
    let cases = vec![case(0, vec![2, 3], vec![])];
    let spec = ScenarioSpec::from_id(2, 0.2).unwrap();
    let out = evaluate_scenario(&IndexScorer, None, &cases, &spec, 0, 10).unwrap();
    // Target 50 ranks below 60 and 70.
    assert_eq!(out.metrics.hr, 1.0);
    assert_eq!(out.metrics.ndcg, 0.5);
}
