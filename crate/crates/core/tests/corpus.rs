use std::collections::{BTreeSet, HashSet};

use enrichrec::corpus::{
    five_core_filter, parse_interactions, read_corpus, session_boundaries, split_corpus, write_corpus, FieldMap,
    InputFormat, RowErrorPolicy,
};
use enrichrec::{Corpus, CorpusOptions, Interaction};
use proptest::prelude::*;

/// Largest sub-log in which every user and item keeps at least `k` rows,
/// found by trying every (user subset, item subset) pair. The union of
/// valid restrictions is itself valid, so it is the unique maximum.
fn brute_force_core(log: &[Interaction], k: usize) -> BTreeSet<usize> {
    let users: Vec<&str> = log.iter().map(|i| i.user_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let items: Vec<&str> = log.iter().map(|i| i.item_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut best = BTreeSet::new();
    for um in 0u32..(1 << users.len()) {
        for im in 0u32..(1 << items.len()) {
            let rows: Vec<usize> = (0..log.len())
                .filter(|&r| {
                    let u = users.iter().position(|&x| x == log[r].user_id).unwrap();
                    let i = items.iter().position(|&x| x == log[r].item_id).unwrap();
                    um & (1 << u) != 0 && im & (1 << i) != 0
                })
                .collect();
            let ok = (0..users.len()).filter(|u| um & (1 << u) != 0).all(|u| {
                rows.iter().filter(|&&r| log[r].user_id == users[u]).count() >= k
            }) && (0..items.len()).filter(|i| im & (1 << i) != 0).all(|i| {
                rows.iter().filter(|&&r| log[r].item_id == items[i]).count() >= k
            });
            if ok {
                best.extend(rows);
            }
        }
    }
    best
}

fn arb_log() -> impl Strategy<Value = Vec<Interaction>> {
    proptest::collection::vec((0u8..4, 0u8..5, 0i64..400_000), 1..18).prop_map(|rows| {
        rows.into_iter()
            .map(|(u, i, t)| Interaction::new(format!("u{u}"), format!("i{i}"), t))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filter_matches_brute_force(log in arb_log(), k in 1usize..4) {
        let kept = five_core_filter(&log, k).unwrap();
        let expected: Vec<Interaction> = brute_force_core(&log, k).into_iter().map(|r| log[r].clone()).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn boundaries_match_float_day_grouping(mut ts in proptest::collection::vec(-400_000i64..4_000_000, 0..20)) {
        ts.sort_unstable();
        let day = |t: i64| (t as f64 / 86_400.0).floor() as i64;
        let expected: Vec<usize> = (0..ts.len().saturating_sub(1)).filter(|&g| day(ts[g]) != day(ts[g + 1])).collect();
        prop_assert_eq!(session_boundaries(&ts), expected);
    }
}

#[test]
fn ten_row_log_core() {
    let rows = [
        ("a", "x", 1),
        ("a", "y", 2),
        ("a", "z", 3),
        ("b", "x", 4),
        ("b", "y", 5),
        ("b", "z", 6),
        ("c", "x", 7),
        ("c", "y", 8),
        ("c", "w", 9),
        ("d", "w", 10),
    ];
    let log: Vec<Interaction> = rows.iter().map(|&(u, i, t)| Interaction::new(u, i, t)).collect();
    for k in 1..=4 {
        let kept = five_core_filter(&log, k).unwrap();
        let expected: Vec<Interaction> = brute_force_core(&log, k).into_iter().map(|r| log[r].clone()).collect();
        assert_eq!(kept, expected, "k = {k}");
    }
    // k = 3: d goes, then w, then c, then x and y fall to 2 and unravel the rest.
    assert!(five_core_filter(&log, 3).unwrap().is_empty());
    // k = 2: d goes, which leaves w with a single row.
    let k2 = five_core_filter(&log, 2).unwrap();
    assert_eq!(k2.len(), 8);
    assert!(k2.iter().all(|it| it.item_id != "w"));
}

#[test]
fn ingest_to_split_pipeline() {
    let mut jsonl = String::new();
    for u in 0..6 {
        for i in 0..6 {
            let t = 86_400 * (i / 2) + u;
            jsonl.push_str(&format!("{{\"reviewerID\":\"U{u}\",\"asin\":\"A{}\",\"unixReviewTime\":{t}}}\n", (i + u) % 8));
        }
    }
    jsonl.push_str("not json\n");
    let parsed = parse_interactions(jsonl.as_bytes(), InputFormat::JsonLines, &FieldMap::amazon(), RowErrorPolicy::Skip).unwrap();
    assert_eq!(parsed.skipped.len(), 1);
    assert!(parse_interactions(jsonl.as_bytes(), InputFormat::JsonLines, &FieldMap::amazon(), RowErrorPolicy::Fail).is_err());

    let corpus = Corpus::build("toy", &parsed.interactions, &CorpusOptions { min_actions: 1 }).unwrap();
    let split = split_corpus(&corpus, 2, 5).unwrap();
    assert_eq!(split.cases.len(), 6);
    for (case, h) in split.cases.iter().zip(&corpus.histories) {
        assert_eq!(case.prefix.len() + 1, h.len());
        assert_eq!(case.target, *h.items.last().unwrap());
        let history: HashSet<_> = h.items.iter().collect();
        assert!(case.negatives.iter().all(|n| !history.contains(n)));
        assert!(case.prefix_boundaries.iter().all(|&g| g + 1 < case.prefix.len()));
    }
    // Negatives depend only on the seed and user.
    assert_eq!(split, split_corpus(&corpus, 2, 5).unwrap());

    let mut bytes = Vec::new();
    write_corpus(&mut bytes, &corpus).unwrap();
    assert_eq!(read_corpus(&bytes[..]).unwrap().corpus, corpus);
}
