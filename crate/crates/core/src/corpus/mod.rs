//! Interaction logs to per-user chronological histories.

mod container;
mod filter;
mod ingest;
mod split;
mod stats;
pub mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use container::{read_corpus, write_corpus, write_enriched_corpus, ContainerMeta, LoadedCorpus, CORPUS_MAGIC};
pub use filter::five_core_filter;
pub use ingest::{parse_interactions, FieldMap, InputFormat, ParseOutcome, RowErrorPolicy};
pub use split::{sample_eval_negatives, split_corpus, split_leave_one_out, EvalCase, SplitCorpus};
pub use stats::{write_stats_csv, DatasetStats};

use crate::error::{Error, Result};

/// Dense item index. `0` and `1` are reserved.
pub type ItemIndex = u32;

pub const PAD: ItemIndex = 0;
pub const MASK: ItemIndex = 1;
/// First index assigned to a real item.
pub const FIRST_ITEM: ItemIndex = 2;

const SECONDS_PER_DAY: i64 = 86_400;

/// One `(user, item, time)` event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, timestamp: i64) -> Self {
        Self { user_id: user_id.into(), item_id: item_id.into(), timestamp }
    }
}

/// Bijection between opaque item ids and dense indices `2..`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    item_to_index: HashMap<String, ItemIndex>,
    index_to_item: Vec<String>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary whose indices follow the order of `items`.
    pub fn from_items<I: IntoIterator<Item = String>>(items: I) -> Result<Self> {
        let mut v = Self::new();
        for item in items {
            if v.item_to_index.contains_key(&item) {
                return Err(Error::Data(format!("duplicate item id {item:?} in vocabulary")));
            }
            v.insert(item);
        }
        Ok(v)
    }

    /// Returns the index for `item`, assigning the next free one if new.
    pub fn insert(&mut self, item: String) -> ItemIndex {
        if let Some(&idx) = self.item_to_index.get(&item) {
            return idx;
        }
        let idx = FIRST_ITEM + self.index_to_item.len() as ItemIndex;
        self.item_to_index.insert(item.clone(), idx);
        self.index_to_item.push(item);
        idx
    }

    pub fn index(&self, item: &str) -> Option<ItemIndex> {
        self.item_to_index.get(item).copied()
    }

    pub fn item(&self, index: ItemIndex) -> Option<&str> {
        index
            .checked_sub(FIRST_ITEM)
            .and_then(|i| self.index_to_item.get(i as usize))
            .map(String::as_str)
    }

    /// Number of real items, `|V|`.
    pub fn len(&self) -> usize {
        self.index_to_item.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_item.is_empty()
    }

    /// Embedding table height: real items plus PAD and MASK.
    pub fn table_size(&self) -> usize {
        self.len() + FIRST_ITEM as usize
    }

    pub fn real_items(&self) -> impl Iterator<Item = ItemIndex> {
        FIRST_ITEM..FIRST_ITEM + self.len() as ItemIndex
    }

    pub fn item_ids(&self) -> &[String] {
        &self.index_to_item
    }
}

/// A user's chronologically ordered items with UTC-day session boundaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserHistory {
    pub user_index: u32,
    pub items: Vec<ItemIndex>,
    pub timestamps: Vec<i64>,
    /// `g` in this list means a session ends after `items[g]`.
    pub session_boundaries: Vec<usize>,
}

impl UserHistory {
    pub fn new(user_index: u32, items: Vec<ItemIndex>, timestamps: Vec<i64>) -> Self {
        let session_boundaries = session_boundaries(&timestamps);
        Self { user_index, items, timestamps, session_boundaries }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// UTC calendar day of a unix timestamp.
#[inline]
pub fn utc_day(timestamp: i64) -> i64 {
    timestamp.div_euclid(SECONDS_PER_DAY)
}

/// Gap positions `g` where `timestamps[g]` and `timestamps[g + 1]` fall on
/// different UTC days.
pub fn session_boundaries(timestamps: &[i64]) -> Vec<usize> {
    timestamps
        .windows(2)
        .enumerate()
        .filter(|(_, w)| utc_day(w[0]) != utc_day(w[1]))
        .map(|(g, _)| g)
        .collect()
}

/// Filtered, indexed interaction data for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dataset: String,
    pub vocab: Vocab,
    /// Opaque user id per dense user index.
    pub users: Vec<String>,
    pub histories: Vec<UserHistory>,
    /// Free-form record of the options used to build the corpus.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    pub min_actions: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self { min_actions: 5 }
    }
}

impl Corpus {
    /// Filters, indexes and orders raw interactions.
    ///
    /// Users left with fewer than two interactions are dropped with a
    /// warning since they have no prefix/target split.
    pub fn build(dataset: &str, interactions: &[Interaction], options: &CorpusOptions) -> Result<Self> {
        let filtered = five_core_filter(interactions, options.min_actions)?;
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for it in &filtered {
            *counts.entry(it.user_id.as_str()).or_default() += 1;
        }
        let kept: Vec<Interaction> = filtered
            .iter()
            .filter(|it| counts[it.user_id.as_str()] >= 2)
            .cloned()
            .collect();
        let dropped = counts.values().filter(|&&c| c < 2).count();
        if dropped > 0 {
            log::warn!("dropped {dropped} users with fewer than 2 interactions");
        }

        let mut vocab = Vocab::new();
        for it in &kept {
            vocab.insert(it.item_id.clone());
        }
        let (users, histories) = build_histories(&kept, &vocab)?;
        Ok(Self {
            dataset: dataset.to_string(),
            vocab,
            users,
            histories,
            config: serde_json::to_value(options).unwrap_or_default(),
        })
    }

    pub fn action_count(&self) -> usize {
        self.histories.iter().map(UserHistory::len).sum()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats::of(self)
    }
}

/// Groups interactions per user (first-appearance order) and sorts each
/// group by timestamp, keeping input order among equal timestamps.
pub fn build_histories(interactions: &[Interaction], vocab: &Vocab) -> Result<(Vec<String>, Vec<UserHistory>)> {
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut users: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<(i64, ItemIndex)>> = Vec::new();
    for it in interactions {
        let item = vocab
            .index(&it.item_id)
            .ok_or_else(|| Error::Data(format!("item {:?} missing from vocabulary", it.item_id)))?;
        let u = *user_index.entry(it.user_id.as_str()).or_insert_with(|| {
            users.push(it.user_id.clone());
            rows.push(Vec::new());
            users.len() - 1
        });
        rows[u].push((it.timestamp, item));
    }
    let histories = rows
        .into_iter()
        .enumerate()
        .map(|(u, mut events)| {
            events.sort_by_key(|&(t, _)| t);
            let (timestamps, items) = events.into_iter().unzip();
            UserHistory::new(u as u32, items, timestamps)
        })
        .collect();
    Ok((users, histories))
}
