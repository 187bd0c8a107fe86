//! Synthetic review logs with the rough shape of a small Amazon category.
//!
//! Items belong to categories with Zipf-distributed popularity, and every
//! item has a fixed follow-up item in its category. A user shops in a few
//! preferred categories over several day-long sessions; follow-ups chain
//! purchases within and across sessions. Each session is then observed
//! only with some probability, modelling purchases made on another
//! platform. Timestamps have day resolution like `unixReviewTime`.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::{LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    /// Zipf exponent of item popularity within a category.
    pub popularity_exponent: f64,
    /// Median of the per-user expected session count (log-normal).
    pub median_sessions: f64,
    pub session_spread: f64,
    pub mean_session_items: f64,
    /// Probability that the next purchase is the follow-up of the previous one.
    pub follow_up_prob: f64,
    pub observed_session_prob: f64,
    pub mean_gap_days: f64,
    pub start_day: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// Sized so that 5-core filtering leaves about 1.4k users and 9k
    /// actions over roughly 600 items.
    fn default() -> Self {
        Self {
            users: 14_000,
            items: 4_000,
            categories: 60,
            popularity_exponent: 0.5,
            median_sessions: 0.6,
            session_spread: 0.8,
            mean_session_items: 2.0,
            follow_up_prob: 0.45,
            observed_session_prob: 0.8,
            mean_gap_days: 30.0,
            start_day: 15_000,
            seed: 2024,
        }
    }
}

struct Catalog {
    by_category: Vec<Vec<usize>>,
    popularity: Vec<WeightedIndex<f64>>,
    category_weights: WeightedIndex<f64>,
    category_of: Vec<usize>,
    follow_up: Vec<usize>,
}

impl Catalog {
    fn new(cfg: &SyntheticConfig) -> Result<Self> {
        if cfg.categories == 0 || cfg.items < 2 * cfg.categories {
            return Err(Error::Config("synthetic catalog needs at least two items per category".into()));
        }
        let mut rng = rng_for(cfg.seed, "synthetic-catalog", 0);
        let mut by_category = vec![Vec::new(); cfg.categories];
        let mut category_of = vec![0; cfg.items];
        for item in 0..cfg.items {
            let c = item % cfg.categories;
            by_category[c].push(item);
            category_of[item] = c;
        }
        let popularity: Vec<WeightedIndex<f64>> = by_category
            .iter()
            .map(|members| {
                let w = (0..members.len()).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_exponent));
                WeightedIndex::new(w).expect("positive weights")
            })
            .collect();
        let category_weights =
            WeightedIndex::new((0..cfg.categories).map(|c| 1.0 / ((c + 1) as f64).powf(0.7))).expect("positive weights");
        let mut follow_up = vec![0; cfg.items];
        for (c, members) in by_category.iter().enumerate() {
            for &item in members {
                let mut next = members[popularity[c].sample(&mut rng)];
                while next == item {
                    next = members[rng.random_range(0..members.len())];
                }
                follow_up[item] = next;
            }
        }
        Ok(Self { by_category, popularity, category_weights, category_of, follow_up })
    }

    fn draw(&self, category: usize, rng: &mut crate::seed::Rng) -> usize {
        self.by_category[category][self.popularity[category].sample(rng)]
    }
}

fn geometric(mean: f64, rng: &mut crate::seed::Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let p = 1.0 / (mean + 1.0);
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    (u.ln() / (1.0 - p).ln()).floor() as usize
}

/// Generates the raw (unfiltered) interaction log.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<Interaction>> {
    let catalog = Catalog::new(cfg)?;
    let activity = LogNormal::new(cfg.median_sessions.max(1e-9).ln(), cfg.session_spread)
        .map_err(|e| Error::Config(format!("session spread: {e}")))?;
    let mut log = Vec::new();
    for u in 0..cfg.users {
        let mut rng = rng_for(cfg.seed, "synthetic-user", u as u64);
        let primary = catalog.category_weights.sample(&mut rng);
        let mut secondary = catalog.category_weights.sample(&mut rng);
        if secondary == primary {
            secondary = (primary + 1) % cfg.categories;
        }
        let rate: f64 = activity.sample(&mut rng);
        let sessions = 1 + Poisson::new(rate.max(1e-9)).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);

        let mut day = cfg.start_day + rng.random_range(0..365);
        let mut bought: Vec<usize> = Vec::new();
        let mut last: Option<usize> = None;
        let mut observed: Vec<(usize, i64)> = Vec::new();
        for s in 0..sessions {
            if s > 0 {
                day += 1 + geometric(cfg.mean_gap_days - 1.0, &mut rng) as i64;
            }
            let category = if rng.random::<f64>() < 0.7 { primary } else { secondary };
            let count = 1 + geometric(cfg.mean_session_items - 1.0, &mut rng);
            let mut session = Vec::with_capacity(count);
            for _ in 0..count {
                let mut pick = None;
                for _ in 0..8 {
                    let candidate = match last {
                        Some(prev) if rng.random::<f64>() < cfg.follow_up_prob => catalog.follow_up[prev],
                        Some(prev) if rng.random::<f64>() < 0.5 => catalog.draw(catalog.category_of[prev], &mut rng),
                        _ => catalog.draw(category, &mut rng),
                    };
                    if !bought.contains(&candidate) {
                        pick = Some(candidate);
                        break;
                    }
                }
                if let Some(item) = pick {
                    bought.push(item);
                    session.push(item);
                    last = Some(item);
                }
            }
            let keep = s == sessions - 1 && observed.is_empty() || rng.random::<f64>() < cfg.observed_session_prob;
            if keep {
                observed.extend(session.into_iter().map(|i| (i, day * 86_400)));
            }
        }
        for (item, t) in observed {
            log.push(Interaction::new(format!("SU{u:05}"), format!("SI{item:05}"), t));
        }
    }
    Ok(log)
}

/// Writes interactions as Amazon-style JSON lines.
pub fn write_amazon_jsonl<W: Write>(mut w: W, log: &[Interaction]) -> Result<()> {
    for it in log {
        let row = serde_json::json!({
            "reviewerID": it.user_id,
            "asin": it.item_id,
            "unixReviewTime": it.timestamp,
        });
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}
