//! Evaluation-time history edits: truncation, random or session-boundary
//! imaginary items filled in by a [`MaskPredictor`].

use std::fmt;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{EvalCase, ItemIndex, MASK};
use crate::enricher::MaskPredictor;
use crate::error::{Error, Result};
use crate::seed::{rng_for, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Drop the most recent `round(len * percent)` prefix items (at least
    /// one item always remains).
    RemoveRecent { percent: f64 },
    /// Leave the prefix untouched.
    Unchanged,
    /// Insert `round(len * percent)` imaginary items at distinct random slots.
    RandomPercent { percent: f64 },
    /// Insert the top-`per_gap` predictions at every session boundary
    /// inside the prefix.
    SessionTop { per_gap: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u8,
    pub strategy: Strategy,
}

pub const RANDOM_PERCENTS: [f64; 5] = [0.2, 0.3, 0.4, 0.5, 0.6];

impl ScenarioSpec {
    /// Scenarios 1-9. `remove_percent` only affects scenario 1.
    pub fn from_id(id: u8, remove_percent: f64) -> Result<Self> {
        let strategy = match id {
            1 => {
                if !(0.0..=1.0).contains(&remove_percent) {
                    return Err(Error::Config(format!("remove percent {remove_percent} outside [0, 1]")));
                }
                Strategy::RemoveRecent { percent: remove_percent }
            }
            2 => Strategy::Unchanged,
            3..=7 => Strategy::RandomPercent { percent: RANDOM_PERCENTS[(id - 3) as usize] },
            8 => Strategy::SessionTop { per_gap: 1 },
            9 => Strategy::SessionTop { per_gap: 2 },
            _ => return Err(Error::Config(format!("unknown scenario {id}; expected 1-9"))),
        };
        Ok(Self { id, strategy })
    }

    /// Random placement at `percent`; numbered 3-7 when on the standard
    /// grid, 0 otherwise.
    pub fn random(percent: f64) -> Result<Self> {
        if !(percent > 0.0 && percent <= 1.0) {
            return Err(Error::Config(format!("mask percent {percent} outside (0, 1]")));
        }
        let id = RANDOM_PERCENTS.iter().position(|&p| (p - percent).abs() < 1e-12).map_or(0, |i| i as u8 + 3);
        Ok(Self { id, strategy: Strategy::RandomPercent { percent } })
    }

    pub fn all(remove_percent: f64) -> Result<Vec<Self>> {
        (1..=9).map(|id| Self::from_id(id, remove_percent)).collect()
    }

    pub fn needs_predictor(&self) -> bool {
        matches!(self.strategy, Strategy::RandomPercent { .. } | Strategy::SessionTop { .. })
    }
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.strategy {
            Strategy::RemoveRecent { percent } => write!(f, "{}: remove {:.0}% most recent", self.id, percent * 100.0),
            Strategy::Unchanged => write!(f, "{}: unchanged", self.id),
            Strategy::RandomPercent { percent } => write!(f, "{}: random {:.0}%", self.id, percent * 100.0),
            Strategy::SessionTop { per_gap } => write!(f, "{}: session top-{per_gap}", self.id),
        }
    }
}

/// An evaluation input after a scenario was applied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnrichedHistory {
    pub items: Vec<ItemIndex>,
    /// Parallel to `items`; `true` for predicted (imaginary) items.
    pub imaginary: Vec<bool>,
    pub source_user: u32,
}

impl EnrichedHistory {
    pub fn observed(items: Vec<ItemIndex>, source_user: u32) -> Self {
        let imaginary = vec![false; items.len()];
        Self { items, imaginary, source_user }
    }

    pub fn imaginary_count(&self) -> usize {
        self.imaginary.iter().filter(|&&b| b).count()
    }
}

fn round_count(len: usize, percent: f64) -> usize {
    (len as f64 * percent).round() as usize
}

/// Distinct insertion slots in `0..=len`, sorted. Slot `s` means "before
/// `prefix[s]`" (`s = len` appends).
pub fn place_random_masks(len: usize, percent: f64, rng: &mut Rng) -> Vec<usize> {
    let count = round_count(len, percent).min(len + 1);
    let mut slots = sample(rng, len + 1, count).into_vec();
    slots.sort_unstable();
    slots
}

/// One slot per session boundary `g` (between `prefix[g]` and
/// `prefix[g + 1]`), repeated `per_gap` times.
pub fn place_session_masks(prefix_len: usize, boundaries: &[usize], per_gap: usize) -> Result<Vec<usize>> {
    let mut slots = Vec::with_capacity(boundaries.len() * per_gap);
    for &g in boundaries {
        if g + 1 >= prefix_len {
            return Err(Error::Contract(format!("boundary {g} is not inside a prefix of length {prefix_len}")));
        }
        slots.extend(std::iter::repeat_n(g + 1, per_gap));
    }
    Ok(slots)
}

/// Fills every slot from predictions on the original prefix, then splices
/// all of them in at once. `m` slots sharing a position receive the top-`m`
/// predictions for one MASK there, best first.
pub fn enrich(
    prefix: &[ItemIndex],
    slots: &[usize],
    predictor: &dyn MaskPredictor,
    source_user: u32,
) -> Result<EnrichedHistory> {
    let mut sorted = slots.to_vec();
    sorted.sort_unstable();
    if let Some(&bad) = sorted.last().filter(|&&s| s > prefix.len()) {
        return Err(Error::Contract(format!("slot {bad} beyond prefix of length {}", prefix.len())));
    }
    let mut fills: Vec<(usize, Vec<ItemIndex>)> = Vec::new();
    for group in sorted.chunk_by(|a, b| a == b) {
        let s = group[0];
        let mut query = Vec::with_capacity(prefix.len() + 1);
        query.extend_from_slice(&prefix[..s]);
        query.push(MASK);
        query.extend_from_slice(&prefix[s..]);
        let top = predictor.predict_top_k(&query, group.len())?;
        if top.len() != group.len() {
            return Err(Error::Contract(format!("predictor returned {} items, {} requested", top.len(), group.len())));
        }
        fills.push((s, top));
    }
    let mut out = EnrichedHistory {
        items: Vec::with_capacity(prefix.len() + slots.len()),
        imaginary: Vec::with_capacity(prefix.len() + slots.len()),
        source_user,
    };
    let mut next = fills.iter().peekable();
    for pos in 0..=prefix.len() {
        if let Some((_, items)) = next.next_if(|(s, _)| *s == pos) {
            out.items.extend_from_slice(items);
            out.imaginary.extend(std::iter::repeat_n(true, items.len()));
        }
        if pos < prefix.len() {
            out.items.push(prefix[pos]);
            out.imaginary.push(false);
        }
    }
    Ok(out)
}

/// Applies `spec` to one evaluation case. `rng` is only used by random
/// placement.
pub fn apply_scenario(
    case: &EvalCase,
    spec: &ScenarioSpec,
    predictor: Option<&dyn MaskPredictor>,
    rng: &mut Rng,
) -> Result<EnrichedHistory> {
    let prefix = &case.prefix;
    let need = || predictor.ok_or_else(|| Error::Config(format!("scenario {} needs a trained enricher", spec.id)));
    match spec.strategy {
        Strategy::RemoveRecent { percent } => {
            let drop = round_count(prefix.len(), percent).min(prefix.len().saturating_sub(1));
            Ok(EnrichedHistory::observed(prefix[..prefix.len() - drop].to_vec(), case.user_index))
        }
        Strategy::Unchanged => Ok(EnrichedHistory::observed(prefix.clone(), case.user_index)),
        Strategy::RandomPercent { percent } => {
            let slots = place_random_masks(prefix.len(), percent, rng);
            enrich(prefix, &slots, need()?, case.user_index)
        }
        Strategy::SessionTop { per_gap } => {
            let slots = place_session_masks(prefix.len(), &case.prefix_boundaries, per_gap)?;
            enrich(prefix, &slots, need()?, case.user_index)
        }
    }
}

/// Applies `spec` to every case in parallel. Each user draws from its own
/// stream derived from `run_seed`, so results do not depend on scheduling.
pub fn apply_to_all(
    cases: &[EvalCase],
    spec: &ScenarioSpec,
    predictor: Option<&dyn MaskPredictor>,
    run_seed: u64,
) -> Result<Vec<EnrichedHistory>> {
    cases
        .par_iter()
        .map(|case| {
            let mut rng = rng_for(run_seed, "scenario", case.user_index as u64);
            apply_scenario(case, spec, predictor, &mut rng)
        })
        .collect()
}

/// Imaginary-item counts for one scenario.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskAccounting {
    pub scenario: u8,
    /// Median over users of the per-user imaginary-item count.
    pub median_mask_count: f64,
    pub total_mask_count: usize,
    /// Insertion positions available in total: `Σ (prefix_len + 1)`.
    pub candidate_slots: usize,
}

pub fn median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

pub fn mask_accounting(scenario: u8, cases: &[EvalCase], enriched: &[EnrichedHistory]) -> MaskAccounting {
    let counts: Vec<usize> = enriched.iter().map(EnrichedHistory::imaginary_count).collect();
    MaskAccounting {
        scenario,
        median_mask_count: median(&counts),
        total_mask_count: counts.iter().sum(),
        candidate_slots: cases.iter().map(|c| c.prefix.len() + 1).sum(),
    }
}
