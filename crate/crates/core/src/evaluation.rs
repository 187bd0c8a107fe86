//! Sampled-candidate ranking metrics and repeated-run aggregation.

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{EvalCase, ItemIndex};
use crate::enricher::MaskPredictor;
use crate::error::{Error, Result};
use crate::scenario::{apply_to_all, mask_accounting, EnrichedHistory, MaskAccounting, ScenarioSpec};
use crate::seed::derive_seed;

pub const DEFAULT_K: usize = 10;

/// Scores candidate next items for a history.
pub trait NextItemScorer: Sync {
    fn score(&self, history: &[ItemIndex], candidates: &[ItemIndex]) -> Result<Vec<f64>>;
}

/// `1 + #{others >= target}`: ties count against the target.
pub fn rank_of_target(target: f64, others: &[f64]) -> Result<usize> {
    if target.is_nan() || others.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("rank_of_target", "NaN score"));
    }
    Ok(1 + others.iter().filter(|&&s| s >= target).count())
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub ndcg: f64,
    pub hr: f64,
    pub users: usize,
}

impl MetricSummary {
    pub fn from_ranks(ranks: &[usize], k: usize) -> Self {
        let n = ranks.len().max(1) as f64;
        Self {
            ndcg: ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n,
            hr: ranks.iter().map(|&r| hr_at_k(r, k)).sum::<f64>() / n,
            users: ranks.len(),
        }
    }
}

/// Rank of each case's target among its target and negatives, scored on
/// the matching history in `inputs`.
pub fn rank_cases(scorer: &dyn NextItemScorer, cases: &[EvalCase], inputs: &[EnrichedHistory]) -> Result<Vec<usize>> {
    if cases.len() != inputs.len() {
        return Err(Error::shape("rank_cases", format!("{} cases, {} inputs", cases.len(), inputs.len())));
    }
    cases
        .par_iter()
        .zip(inputs)
        .map(|(case, input)| {
            if case.negatives.contains(&case.target) {
                return Err(Error::Contract(format!("user {}: target among negatives", case.user_index)));
            }
            let mut candidates = Vec::with_capacity(case.negatives.len() + 1);
            candidates.push(case.target);
            candidates.extend_from_slice(&case.negatives);
            let scores = scorer.score(&input.items, &candidates)?;
            rank_of_target(scores[0], &scores[1..])
        })
        .collect()
}

/// Metrics and imaginary-item accounting of one scenario run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioOutcome {
    pub metrics: MetricSummary,
    pub accounting: MaskAccounting,
}

/// Applies `spec` with `run_seed` and scores every case.
pub fn evaluate_scenario(
    scorer: &dyn NextItemScorer,
    predictor: Option<&dyn MaskPredictor>,
    cases: &[EvalCase],
    spec: &ScenarioSpec,
    run_seed: u64,
    k: usize,
) -> Result<ScenarioOutcome> {
    let inputs = apply_to_all(cases, spec, predictor, run_seed)?;
    let ranks = rank_cases(scorer, cases, &inputs)?;
    Ok(ScenarioOutcome { metrics: MetricSummary::from_ranks(&ranks, k), accounting: mask_accounting(spec.id, cases, &inputs) })
}

/// Seed of repetition `run` under `base_seed`.
pub fn run_seed(base_seed: u64, run: usize) -> u64 {
    derive_seed(base_seed, "run", run as u64)
}

/// Mean and sample standard deviation (`n - 1`; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub metrics: MetricSummary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    pub hr_mean: f64,
    pub hr_std: f64,
}

impl Aggregate {
    pub fn of(runs: &[RunResult]) -> Self {
        let ndcg: Vec<f64> = runs.iter().map(|r| r.metrics.ndcg).collect();
        let hr: Vec<f64> = runs.iter().map(|r| r.metrics.hr).collect();
        let (ndcg_mean, ndcg_std) = mean_std(&ndcg);
        let (hr_mean, hr_std) = mean_std(&hr);
        Self { ndcg_mean, ndcg_std, hr_mean, hr_std }
    }
}

/// Calls `run_once(run, seed)` for `runs` repetitions and aggregates.
pub fn repeat_and_aggregate<F, E>(runs: usize, base_seed: u64, mut run_once: F) -> Result<(Vec<RunResult>, Aggregate), E>
where
    F: FnMut(usize, u64) -> Result<MetricSummary, E>,
    E: From<Error>,
{
    if runs == 0 {
        return Err(Error::Config("at least one run is required".into()).into());
    }
    let mut results = Vec::with_capacity(runs);
    for run in 0..runs {
        let seed = run_seed(base_seed, run);
        results.push(RunResult { run, seed, metrics: run_once(run, seed)? });
    }
    let agg = Aggregate::of(&results);
    Ok((results, agg))
}
