use std::collections::HashSet;

use rand::seq::index::sample;

use super::{Corpus, ItemIndex, UserHistory, Vocab};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Leave-one-out evaluation material for one user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub user_index: u32,
    /// All items but the last.
    pub prefix: Vec<ItemIndex>,
    /// Session boundaries internal to the prefix (`g < prefix.len() - 1`).
    pub prefix_boundaries: Vec<usize>,
    pub target: ItemIndex,
    /// Sampled items the user never interacted with.
    pub negatives: Vec<ItemIndex>,
    /// Sorted distinct items of the full history.
    pub seen: Vec<ItemIndex>,
}

impl EvalCase {
    pub fn has_seen(&self, item: ItemIndex) -> bool {
        self.seen.binary_search(&item).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitCorpus {
    pub cases: Vec<EvalCase>,
    /// Users skipped because their history had fewer than two items.
    pub excluded: usize,
    pub negative_seed: u64,
}

/// `(items[..n-1], items[n-1])`, or `None` when `n < 2`.
pub fn split_leave_one_out(history: &UserHistory) -> Option<(&[ItemIndex], ItemIndex)> {
    match history.items.len() {
        0 | 1 => None,
        n => Some((&history.items[..n - 1], history.items[n - 1])),
    }
}

/// Draws `count` distinct items uniformly from those the user never touched.
/// The stream depends only on `(seed, user_index)`.
pub fn sample_eval_negatives(
    history: &UserHistory,
    vocab: &Vocab,
    count: usize,
    seed: u64,
) -> Result<Vec<ItemIndex>> {
    let seen: HashSet<ItemIndex> = history.items.iter().copied().collect();
    let eligible: Vec<ItemIndex> = vocab.real_items().filter(|i| !seen.contains(i)).collect();
    if eligible.len() < count {
        return Err(Error::Data(format!(
            "user {} has only {} unseen items, {count} negatives required",
            history.user_index,
            eligible.len()
        )));
    }
    let mut rng = rng_for(seed, "eval-negatives", u64::from(history.user_index));
    Ok(sample(&mut rng, eligible.len(), count).into_iter().map(|i| eligible[i]).collect())
}

/// Builds one [`EvalCase`] per user with at least two items.
pub fn split_corpus(corpus: &Corpus, negative_count: usize, seed: u64) -> Result<SplitCorpus> {
    let mut cases = Vec::with_capacity(corpus.histories.len());
    let mut excluded = 0;
    for h in &corpus.histories {
        let Some((prefix, target)) = split_leave_one_out(h) else {
            excluded += 1;
            continue;
        };
        let negatives = sample_eval_negatives(h, &corpus.vocab, negative_count, seed)?;
        let mut seen = h.items.clone();
        seen.sort_unstable();
        seen.dedup();
        debug_assert!(negatives.iter().all(|n| seen.binary_search(n).is_err()));
        cases.push(EvalCase {
            user_index: h.user_index,
            prefix: prefix.to_vec(),
            prefix_boundaries: h
                .session_boundaries
                .iter()
                .copied()
                .filter(|&g| g + 1 < prefix.len())
                .collect(),
            target,
            negatives,
            seen,
        });
    }
    if excluded > 0 {
        log::warn!("excluded {excluded} users with fewer than 2 items from evaluation");
    }
    Ok(SplitCorpus { cases, excluded, negative_seed: seed })
}
