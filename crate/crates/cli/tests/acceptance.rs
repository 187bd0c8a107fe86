//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 8-10 run on the Amazon Beauty review dump when
//! `ENRICHREC_BEAUTY` names a JSON-lines file; otherwise on the bundled
//! synthetic generator's default log, which stands in for it.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use enrichrec::evaluation::{hr_at_k, ndcg_at_k, rank_of_target};
use enrichrec::nn::{finite_difference_check, softmax_rows, Parameterized, Tensor};
use enrichrec::recommender::{make_training_step, TrainingSequence};
use enrichrec::scenario::enrich;
use enrichrec::seed::Rng;
use enrichrec::{Enricher32, Enricher64, EnricherConfig, ItemIndex, MaskedExample, RecConfig, Recommender64, MASK};
use rand::{Rng as _, SeedableRng};

const BIN: &str = env!("CARGO_BIN_EXE_enrichrec");

// Pinned tolerances.
const SOFTMAX_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-3;
const FD_EPSILON: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const UNIFORM_HR_TOL: f64 = 0.01;
const HR_BAND: (f64, f64) = (0.55, 0.78);
const DIRECTION_SLACK: f64 = 0.01;
const E2E_BUDGET: Duration = Duration::from_secs(30 * 60);
const REFERENCE_SLOTS: f64 = 6711.0;

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
    /// False when the criterion's target data was not available, so the
    /// outcome is reported but cannot gate the run.
    binding: bool,
}

fn outcome(id: u8, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass, detail, binding: true }
}

fn enrichrec(args: &[&str]) -> String {
    let out = Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("spawn enrichrec");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "enrichrec {args:?} failed ({}):\n{stderr}", out.status);
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn softmax_normalization() -> Outcome {
    let mut rng = Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let rows = rng.random_range(1..8);
        let cols = rng.random_range(1..64);
        let scale: f64 = rng.random_range(0.01..100.0);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        if i % 2 == 0 {
            let s = softmax_rows(&Tensor::from_vec(rows, cols, data).unwrap()).unwrap();
            for r in 0..rows {
                worst = worst.max((s.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        } else {
            let data: Vec<f32> = data.into_iter().map(|v| v as f32).collect();
            let s = softmax_rows(&Tensor::from_vec(rows, cols, data).unwrap()).unwrap();
            for r in 0..rows {
                worst = worst.max((s.row(r).iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs());
            }
        }
    }
    outcome(1, "softmax rows sum to 1", worst <= SOFTMAX_TOL, format!("max |sum - 1| = {worst:.2e} over 1000 tensors"))
}

fn causality() -> Outcome {
    let cfg = RecConfig { blocks: 2, hidden_dim: 16, heads: 2, max_seq_len: 12, dropout: 0.0, ..Default::default() };
    let model = Recommender64::new(40, cfg).unwrap();
    let mut rng = Rng::seed_from_u64(2);
    let mut violations = 0usize;
    let mut checks = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(2..=12);
        let items: Vec<ItemIndex> = (0..n).map(|_| rng.random_range(2..40)).collect();
        let base = model.forward(&items).unwrap();
        let offset = 12 - n;
        for j in 1..n {
            let mut changed = items.clone();
            changed[j] = 2 + (changed[j] - 2 + rng.random_range(1..38)) % 38;
            let other = model.forward(&changed).unwrap();
            for t in 0..j {
                checks += 1;
                if base.row(offset + t) != other.row(offset + t) {
                    violations += 1;
                }
            }
        }
    }
    outcome(2, "causal outputs ignore later items", violations == 0, format!("{violations} of {checks} rows changed"))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let cfg = EnricherConfig { layers: 1, model_dim: 8, heads: 2, ffn_dim: 16, max_seq_len: 8, dropout: 0.0, ..Default::default() };
    let mut enricher = Enricher64::new(12, cfg).unwrap();
    let ex = MaskedExample { input: vec![4, MASK, 9, 2, MASK, 11], target_positions: vec![1, 4], target_items: vec![5, 10] };
    enricher.zero_grad();
    enricher.accumulate_gradients(&ex, 1.0, None).unwrap();
    let e = finite_difference_check(&mut enricher, |m| m.masked_loss(&ex).unwrap(), FD_EPSILON, None, 3);

    let cfg = RecConfig { blocks: 1, hidden_dim: 8, heads: 1, max_seq_len: 4, dropout: 0.0, ..Default::default() };
    let mut rec = Recommender64::new(12, cfg).unwrap();
    let mut rng = Rng::seed_from_u64(3);
    let steps: Vec<_> = [vec![2, 7, 3, 9, 4], vec![6, 11, 8], vec![3, 2]]
        .into_iter()
        .map(|items: Vec<ItemIndex>| {
            let mut seen = items.clone();
            seen.sort_unstable();
            make_training_step(&TrainingSequence { items, seen }, 12, 4, &mut rng).unwrap()
        })
        .collect();
    rec.zero_grad();
    rec.accumulate_gradients(&steps, None).unwrap();
    let r = finite_difference_check(&mut rec, |m| m.training_loss(&steps).unwrap(), FD_EPSILON, None, 4);

    let elapsed = start.elapsed();
    let all_groups = e.groups.len() == enricher.params().len() && r.groups.len() == rec.params().len();
    let worst = e.max_rel_error.max(r.max_rel_error);
    outcome(
        3,
        "analytic gradients match finite differences",
        worst < GRAD_REL_TOL && all_groups && elapsed < GRAD_BUDGET,
        format!(
            "max rel error {worst:.2e} over {} groups / {} coordinates in {:.1}s",
            e.groups.len() + r.groups.len(),
            e.coordinates_checked + r.coordinates_checked,
            elapsed.as_secs_f64()
        ),
    )
}

fn enrichment_arithmetic() -> Outcome {
    let cfg = EnricherConfig { layers: 1, model_dim: 8, heads: 2, ffn_dim: 16, max_seq_len: 128, dropout: 0.0, ..Default::default() };
    let predictor = Enricher32::new(40, cfg).unwrap();
    let mut rng = Rng::seed_from_u64(4);
    let mut failures = 0usize;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let history: Vec<ItemIndex> = (0..n).map(|_| rng.random_range(2..40)).collect();
        let positions = rng.random_range(0..=n.min(10));
        let top_k = rng.random_range(1..=3);
        let slots: Vec<usize> = rand::seq::index::sample(&mut rng, n + 1, positions)
            .into_iter()
            .flat_map(|s| std::iter::repeat_n(s, top_k))
            .collect();
        let e = enrich(&history, &slots, &predictor, 0).unwrap();
        let stripped: Vec<ItemIndex> =
            e.items.iter().zip(&e.imaginary).filter(|(_, &im)| !im).map(|(&i, _)| i).collect();
        if e.items.len() != n + slots.len() || e.imaginary_count() != slots.len() || stripped != history {
            failures += 1;
        }
    }
    outcome(4, "enrichment length and strip round trip", failures == 0, format!("{failures} of 1000 triples failed"))
}

fn metric_oracles() -> Outcome {
    let mut rng = Rng::seed_from_u64(5);
    let mut mismatches = 0usize;
    for _ in 0..10_000 {
        let levels = rng.random_range(1..200);
        let target = f64::from(rng.random_range(0..levels));
        let others: Vec<f64> = (0..99).map(|_| f64::from(rng.random_range(0..levels))).collect();
        // Descending sort with the target after every equal score.
        let mut all: Vec<(f64, bool)> = others.iter().map(|&s| (s, false)).collect();
        all.push((target, true));
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let rank = all.iter().position(|&(_, t)| t).unwrap() + 1;
        let hr = if rank <= 10 { 1.0 } else { 0.0 };
        let ndcg = if rank <= 10 { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 };
        let got = rank_of_target(target, &others).unwrap();
        if got != rank || hr_at_k(got, 10) != hr || ndcg_at_k(got, 10) != ndcg {
            mismatches += 1;
        }
    }
    let rank3 = ndcg_at_k(3, 10);
    outcome(
        5,
        "HR/NDCG match sort oracle",
        mismatches == 0 && rank3 == 0.5,
        format!("{mismatches} of 10000 mismatched; NDCG(rank 3) = {rank3}"),
    )
}

fn uniform_random_hr() -> Outcome {
    let mut rng = Rng::seed_from_u64(6);
    let users = 10_000;
    let mut hits = 0.0;
    for _ in 0..users {
        let target: f64 = rng.random();
        let others: Vec<f64> = (0..99).map(|_| rng.random()).collect();
        hits += hr_at_k(rank_of_target(target, &others).unwrap(), 10);
    }
    let hr = hits / users as f64;
    outcome(6, "uniform scores give HR@10 = 0.10", (hr - 0.10).abs() <= UNIFORM_HR_TOL, format!("HR@10 {hr:.4} over {users} users"))
}

/// Small but complete pipeline; returns the output directory.
fn small_pipeline(dir: &Path, raw: &Path) -> PathBuf {
    let corpus = dir.join("data.hrc");
    let enr = dir.join("enricher.ckpt");
    let rec = dir.join("recommender.ckpt");
    let out = dir.join("out");
    let seed = ["--seed", "7"];
    enrichrec(&[&seed[..], &["ingest", "--input", p(raw), "--dataset", "tiny", "--out", p(&corpus)]].concat());
    enrichrec(&[&seed[..], &["train-enricher", "--corpus", p(&corpus), "--out", p(&enr), "--epochs", "2"]].concat());
    enrichrec(&[&seed[..], &["train-recommender", "--corpus", p(&corpus), "--out", p(&rec), "--epochs", "3"]].concat());
    enrichrec(
        &[
            &seed[..],
            &[
                "scenario", "--corpus", p(&corpus), "--recommender", p(&rec), "--enricher", p(&enr), "--id", "1",
                "--id", "2", "--id", "4", "--id", "9", "--runs", "2", "--out-dir", p(&out),
            ],
        ]
        .concat(),
    );
    dir.to_path_buf()
}

fn csv_body(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.split_once('\n').map(|(_, body)| body.to_string()).unwrap_or_default()
}

fn determinism(scratch: &Path) -> Outcome {
    let raw = scratch.join("tiny.json");
    enrichrec(&["--seed", "11", "synth", "--out", p(&raw), "--users", "3000", "--items", "800"]);
    let a = small_pipeline(&scratch.join("a"), &raw);
    let b = small_pipeline(&scratch.join("b"), &raw);
    let binaries = ["data.hrc", "enricher.ckpt", "recommender.ckpt"];
    let csvs = [
        "data.hrc.stats.csv",
        "enricher.ckpt.log.csv",
        "recommender.ckpt.log.csv",
        "out/results.csv",
        "out/summary.csv",
        "out/accounting.csv",
    ];
    let mut differing: Vec<&str> = Vec::new();
    for f in binaries {
        if std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap() {
            differing.push(f);
        }
    }
    for f in csvs {
        if csv_body(&a.join(f)) != csv_body(&b.join(f)) {
            differing.push(f);
        }
    }
    outcome(
        7,
        "identical seeds give identical artifacts",
        differing.is_empty(),
        format!("{} files compared, differing: {differing:?}", binaries.len() + csvs.len()),
    )
}

/// Mean HR@10 of `scenario` from a summary CSV.
fn summary_mean_hr(path: &Path, scenario: u8) -> f64 {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    for rec in rd.records() {
        let rec = rec.unwrap();
        if rec[1].parse::<u8>().unwrap() == scenario && &rec[2] == "mean" {
            return rec[5].parse().unwrap();
        }
    }
    panic!("no mean row for scenario {scenario} in {}", path.display());
}

fn data_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    rd.records().map(|r| r.unwrap()).collect()
}

fn reproduction(scratch: &Path) -> Vec<Outcome> {
    let beauty = std::env::var_os("ENRICHREC_BEAUTY").map(PathBuf::from);
    let (raw, label) = match &beauty {
        Some(path) => (path.clone(), "Beauty"),
        None => {
            let raw = scratch.join("beauty-surrogate.json");
            enrichrec(&["--seed", "2024", "synth", "--out", p(&raw)]);
            (raw, "synthetic surrogate")
        }
    };
    let dir = scratch.join("beauty");
    let corpus = dir.join("beauty.hrc");
    let enr = dir.join("enricher.ckpt");
    let rec = dir.join("recommender.ckpt");
    let out = dir.join("scenarios");

    let start = Instant::now();
    enrichrec(&["ingest", "--input", p(&raw), "--dataset", "beauty", "--out", p(&corpus)]);
    enrichrec(&["train-enricher", "--corpus", p(&corpus), "--out", p(&enr)]);
    enrichrec(&["train-recommender", "--corpus", p(&corpus), "--out", p(&rec)]);
    let eval = ["--corpus", p(&corpus), "--recommender", p(&rec), "--enricher", p(&enr)];
    enrichrec(&[&["scenario"][..], &eval, &["--id", "2", "--id", "8", "--runs", "10", "--out-dir", p(&out)]].concat());
    let elapsed = start.elapsed();

    let summary = out.join("summary.csv");
    let (s2, s8) = (summary_mean_hr(&summary, 2), summary_mean_hr(&summary, 8));
    let in_band = (HR_BAND.0..=HR_BAND.1).contains(&s2);
    let direction = s8 >= s2 - DIRECTION_SLACK;
    let c8 = Outcome {
        id: 8,
        name: "end-to-end HR@10 band and session-mask direction",
        pass: in_band && direction && elapsed < E2E_BUDGET,
        detail: format!(
            "[{label}] scenario 2 HR@10 {s2:.4} (band {:.2}-{:.2}: {}), scenario 8 {s8:.4} (>= s2 - {DIRECTION_SLACK}: {}), {:.0}s",
            HR_BAND.0,
            HR_BAND.1,
            if in_band { "in" } else { "out" },
            if direction { "yes" } else { "no" },
            elapsed.as_secs_f64()
        ),
        binding: beauty.is_some(),
    };

    let acc = dir.join("accounting.csv");
    enrichrec(&["accounting", "--corpus", p(&corpus), "--enricher", p(&enr), "--id", "8", "--id", "9", "--out", p(&acc)]);
    let rows = data_rows(&acc);
    let total = |id: &str| -> usize { rows.iter().find(|r| &r[1] == id).unwrap()[3].parse().unwrap() };
    let slots: f64 = rows[0][4].parse().unwrap();
    let (t8, t9) = (total("8"), total("9"));
    let ratio = slots / REFERENCE_SLOTS;
    let c9 = outcome(
        9,
        "mask accounting",
        t9 == 2 * t8 && (0.5..=2.0).contains(&ratio),
        format!("[{label}] scenario 8 total {t8}, scenario 9 total {t9}; candidate slots {slots} ({ratio:.2}x of {REFERENCE_SLOTS})"),
    );

    let sweep = dir.join("sweep.csv");
    enrichrec(&[&["sweep"][..], &eval, &["--out", p(&sweep)]].concat());
    let rows = data_rows(&sweep);
    let complete = rows.len() == 5
        && rows.iter().all(|r| r[2].parse::<f64>().is_ok_and(f64::is_finite) && r[3].parse::<f64>().is_ok_and(f64::is_finite));
    let c10 = outcome(
        10,
        "mask-percentage sweep",
        complete,
        format!(
            "[{label}] {} rows: {}",
            rows.len(),
            rows.iter().map(|r| format!("p={} hr={}", &r[1], &r[3])).collect::<Vec<_>>().join(", ")
        ),
    );
    vec![c8, c9, c10]
}

#[test]
fn acceptance() {
    let scratch = tempfile::tempdir().unwrap();
    let mut outcomes = vec![
        softmax_normalization(),
        causality(),
        gradient_checks(),
        enrichment_arithmetic(),
        metric_oracles(),
        uniform_random_hr(),
        determinism(scratch.path()),
    ];
    outcomes.extend(reproduction(scratch.path()));

    println!();
    for o in &outcomes {
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = if o.binding { "" } else { " (non-gating: target dataset not supplied)" };
        println!("criterion {:>2} {status} {}: {}{note}", o.id, o.name, o.detail);
    }
    let failed: Vec<u8> = outcomes.iter().filter(|o| o.binding && !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
