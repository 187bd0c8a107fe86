use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use enrichrec::corpus::{
    parse_interactions, read_corpus, split_corpus, write_corpus, write_enriched_corpus, write_stats_csv, FieldMap,
    InputFormat, RowErrorPolicy,
};
use enrichrec::corpus::synthetic::{generate, write_amazon_jsonl, SyntheticConfig};
use enrichrec::evaluation::{rank_cases, repeat_and_aggregate, run_seed, Aggregate, MetricSummary, RunResult};
use enrichrec::recommender::{training_sequences, TrainingSequence};
use enrichrec::scenario::{apply_to_all, mask_accounting, MaskAccounting, RANDOM_PERCENTS};
use enrichrec::seed::derive_seed;
use enrichrec::{
    train_enricher, train_recommender, Corpus, CorpusOptions, Enricher32, EnricherConfig, MaskPredictor, RecConfig,
    Recommender32, ScenarioSpec, SplitCorpus,
};

use crate::output::{
    accounting_row, aggregate_rows, create_file, metric, open_file, result_row, sibling, CsvFile, ACCOUNTING_COLUMNS,
    RESULT_COLUMNS,
};
use crate::settings::{header_line, ConfigFile};
use crate::{
    AccountingArgs, Cli, Command, EvalArgs, IngestArgs, ReportArgs, ScenarioArgs, SweepArgs, SynthArgs,
    TrainEnricherArgs, TrainRecommenderArgs,
};

const DEFAULT_SEED: u64 = 42;

struct Ctx {
    file: ConfigFile,
    seed: u64,
}

pub fn run_command(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let seed = file.pick(cli.seed, "seed", DEFAULT_SEED)?;
    let ctx = Ctx { file, seed };
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::TrainEnricher(a) => train_enricher_cmd(&ctx, a),
        Command::TrainRecommender(a) => train_recommender_cmd(&ctx, a),
        Command::Scenario(a) => scenario(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Accounting(a) => accounting(&ctx, a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(&ctx, a),
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let loaded = read_corpus(BufReader::new(open_file(path)?)).with_context(|| format!("reading {}", path.display()))?;
    Ok(loaded.corpus)
}

fn load_enricher(path: &Path) -> Result<Enricher32> {
    Enricher32::load(BufReader::new(open_file(path)?)).with_context(|| format!("reading {}", path.display()))
}

fn load_recommender(path: &Path) -> Result<Recommender32> {
    Recommender32::load(BufReader::new(open_file(path)?)).with_context(|| format!("reading {}", path.display()))
}

fn ingest(ctx: &Ctx, a: IngestArgs) -> Result<()> {
    let f = &ctx.file;
    let format: InputFormat = match a.format.clone().or(f.text("format")) {
        Some(s) => s.parse()?,
        None => match a.input.extension().and_then(|e| e.to_str()) {
            Some("csv") => InputFormat::Csv,
            _ => InputFormat::JsonLines,
        },
    };
    let map: FieldMap = f.pick(a.map, "map", "amazon".to_string())?.parse()?;
    let min_actions = f.pick(a.min_actions, "min_actions", CorpusOptions::default().min_actions)?;
    let policy: RowErrorPolicy = f.pick(a.on_bad_row, "on_bad_row", "fail".to_string())?.parse()?;
    let dataset = match a.dataset.clone().or(f.text("dataset")) {
        Some(d) => d,
        None => a.input.file_stem().map_or("dataset".to_string(), |s| s.to_string_lossy().into_owned()),
    };

    let parsed = parse_interactions(BufReader::new(open_file(&a.input)?), format, &map, policy)
        .with_context(|| format!("parsing {}", a.input.display()))?;
    for (line, msg) in parsed.skipped.iter().take(5) {
        log::warn!("skipped line {line}: {msg}");
    }
    if !parsed.skipped.is_empty() {
        log::warn!("skipped {} malformed rows", parsed.skipped.len());
    }
    let corpus = Corpus::build(&dataset, &parsed.interactions, &CorpusOptions { min_actions })?;
    if corpus.histories.is_empty() {
        bail!("no users remain after {min_actions}-core filtering");
    }
    let mut w = create_file(&a.out)?;
    write_corpus(&mut w, &corpus)?;
    w.flush()?;

    let stats = corpus.stats();
    log::info!(
        "{}: {} users, {} items, {} actions ({:.2}/user, {:.2}/item)",
        stats.dataset,
        stats.users,
        stats.items,
        stats.actions,
        stats.avg_actions_per_user,
        stats.avg_actions_per_item
    );
    let stats_path = a.stats.unwrap_or_else(|| sibling(&a.out, ".stats.csv"));
    let settings = json!({ "command": "ingest", "dataset": dataset, "min_actions": min_actions, "map": [map.user, map.item, map.time] });
    let mut sw = create_file(&stats_path)?;
    writeln!(sw, "{}", header_line(ctx.seed, &settings))?;
    write_stats_csv(&mut sw, &[stats])?;
    sw.flush()?;
    Ok(())
}

fn enricher_config(ctx: &Ctx, a: &TrainEnricherArgs) -> Result<EnricherConfig> {
    let f = &ctx.file;
    let d = EnricherConfig::default();
    let cfg = EnricherConfig {
        layers: f.pick(a.layers, "enricher.layers", d.layers)?,
        model_dim: f.pick(a.dim, "enricher.dim", d.model_dim)?,
        heads: f.pick(a.heads, "enricher.heads", d.heads)?,
        ffn_dim: f.pick(a.ffn_dim, "enricher.ffn_dim", d.ffn_dim)?,
        max_seq_len: f.pick(a.max_len, "enricher.max_len", d.max_seq_len)?,
        mask_prob: f.pick(a.mask_prob, "enricher.mask_prob", d.mask_prob)?,
        learning_rate: f.pick(a.lr, "enricher.lr", d.learning_rate)?,
        batch_size: f.pick(a.batch_size, "enricher.batch_size", d.batch_size)?,
        epochs: f.pick(a.epochs, "enricher.epochs", d.epochs)?,
        dropout: f.pick(a.dropout, "enricher.dropout", d.dropout)?,
        seed: derive_seed(ctx.seed, "enricher", 0),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_enricher_cmd(ctx: &Ctx, a: TrainEnricherArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let cfg = enricher_config(ctx, &a)?;
    let log_path = a.log.clone().unwrap_or_else(|| sibling(&a.out, ".log.csv"));
    let settings = json!({ "command": "train-enricher", "dataset": corpus.dataset, "enricher": cfg });
    let mut log_csv = CsvFile::create(&log_path, &header_line(ctx.seed, &settings), &["epoch", "mean_loss", "masked_accuracy_at_10"])?;
    let histories: Vec<Vec<_>> = corpus.histories.iter().map(|h| h.items.clone()).collect();
    let mut write_err = None;
    let model = train_enricher::<f32>(&histories, corpus.vocab.table_size(), &cfg, |e| {
        log::info!("enricher epoch {}: loss {:.4}, masked acc@10 {:.4}", e.epoch, e.mean_loss, e.masked_accuracy_at_10);
        if let Err(err) = log_csv.row([e.epoch.to_string(), metric(e.mean_loss), metric(e.masked_accuracy_at_10)]) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(err);
    }
    log_csv.finish()?;
    let mut w = create_file(&a.out)?;
    model.save(&mut w)?;
    w.flush()?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn rec_config(ctx: &Ctx, a: &TrainRecommenderArgs) -> Result<RecConfig> {
    let f = &ctx.file;
    let d = RecConfig::default();
    let cfg = RecConfig {
        blocks: f.pick(a.blocks, "recommender.blocks", d.blocks)?,
        hidden_dim: f.pick(a.dim, "recommender.dim", d.hidden_dim)?,
        heads: f.pick(a.heads, "recommender.heads", d.heads)?,
        max_seq_len: f.pick(a.max_len, "recommender.max_len", d.max_seq_len)?,
        learning_rate: f.pick(a.lr, "recommender.lr", d.learning_rate)?,
        batch_size: f.pick(a.batch_size, "recommender.batch_size", d.batch_size)?,
        epochs: f.pick(a.epochs, "recommender.epochs", d.epochs)?,
        dropout: f.pick(a.dropout, "recommender.dropout", d.dropout)?,
        seed: derive_seed(ctx.seed, "recommender", 0),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn fit_recommender(sequences: &[TrainingSequence], vocab_size: usize, cfg: &RecConfig) -> Result<Recommender32> {
    Ok(train_recommender::<f32>(sequences, vocab_size, cfg, |e| {
        log::info!("recommender epoch {}: loss {:.4}", e.epoch, e.mean_loss);
    })?)
}

fn train_recommender_cmd(ctx: &Ctx, a: TrainRecommenderArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let cfg = rec_config(ctx, &a)?;
    let split = split_corpus(&corpus, 0, 0)?;
    let log_path = a.log.clone().unwrap_or_else(|| sibling(&a.out, ".log.csv"));
    let settings = json!({ "command": "train-recommender", "dataset": corpus.dataset, "recommender": cfg });
    let mut log_csv = CsvFile::create(&log_path, &header_line(ctx.seed, &settings), &["epoch", "mean_loss"])?;
    let mut write_err = None;
    let model = train_recommender::<f32>(&training_sequences(&split), corpus.vocab.table_size(), &cfg, |e| {
        log::info!("recommender epoch {}: loss {:.4}", e.epoch, e.mean_loss);
        if let Err(err) = log_csv.row([e.epoch.to_string(), metric(e.mean_loss)]) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(err);
    }
    log_csv.finish()?;
    let mut w = create_file(&a.out)?;
    model.save(&mut w)?;
    w.flush()?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

/// Resolved evaluation options plus the loaded models.
struct Evaluator {
    corpus: Corpus,
    recommender: Recommender32,
    enricher: Option<Enricher32>,
    runs: usize,
    negatives: usize,
    k: usize,
    retrain_per_run: bool,
    retrain_on_enriched: bool,
    redraw_negatives: bool,
    base_seed: u64,
    fixed_split: SplitCorpus,
}

impl Evaluator {
    fn new(ctx: &Ctx, a: &EvalArgs) -> Result<Self> {
        let f = &ctx.file;
        let corpus = load_corpus(&a.corpus)?;
        let recommender = load_recommender(&a.recommender)?;
        if recommender.vocab_size() != corpus.vocab.table_size() {
            bail!(
                "recommender vocabulary ({}) does not match corpus ({})",
                recommender.vocab_size(),
                corpus.vocab.table_size()
            );
        }
        let enricher = match &a.enricher {
            Some(p) => {
                let e = load_enricher(p)?;
                if e.vocab_size() != corpus.vocab.table_size() {
                    bail!("enricher vocabulary ({}) does not match corpus ({})", e.vocab_size(), corpus.vocab.table_size());
                }
                Some(e)
            }
            None => None,
        };
        let negatives = f.pick(a.negatives, "negatives", 99usize)?;
        let fixed_split = split_corpus(&corpus, negatives, derive_seed(ctx.seed, "negatives", 0))?;
        Ok(Self {
            corpus,
            recommender,
            enricher,
            runs: f.pick(a.runs, "runs", 10usize)?,
            negatives,
            k: f.pick(a.k, "k", 10usize)?,
            retrain_per_run: f.switch(a.retrain_per_run, "retrain_per_run")?,
            retrain_on_enriched: f.switch(a.retrain_on_enriched, "retrain_on_enriched")?,
            redraw_negatives: f.switch(a.redraw_negatives, "redraw_negatives")?,
            base_seed: ctx.seed,
            fixed_split,
        })
    }

    fn settings(&self) -> Value {
        json!({
            "dataset": self.corpus.dataset,
            "recommender": self.recommender.config(),
            "enricher": self.enricher.as_ref().map(|e| e.config()),
            "runs": self.runs,
            "negatives": self.negatives,
            "k": self.k,
            "retrain_per_run": self.retrain_per_run,
            "retrain_on_enriched": self.retrain_on_enriched,
            "redraw_negatives": self.redraw_negatives,
        })
    }

    fn predictor(&self, spec: &ScenarioSpec) -> Result<Option<&dyn MaskPredictor>> {
        if !spec.needs_predictor() {
            return Ok(None);
        }
        match &self.enricher {
            Some(e) => Ok(Some(e as &dyn MaskPredictor)),
            None => bail!("scenario {} needs an enricher checkpoint (--enricher)", spec.id),
        }
    }

    fn split_for(&self, run: usize, seed: u64) -> Result<std::borrow::Cow<'_, SplitCorpus>> {
        if self.redraw_negatives && run > 0 {
            Ok(std::borrow::Cow::Owned(split_corpus(&self.corpus, self.negatives, derive_seed(seed, "negatives", 0))?))
        } else {
            Ok(std::borrow::Cow::Borrowed(&self.fixed_split))
        }
    }

    /// One repetition of `spec`; also returns the edited inputs.
    fn run_once(&self, spec: &ScenarioSpec, run: usize, seed: u64) -> Result<(MetricSummary, MaskAccounting, Vec<enrichrec::EnrichedHistory>)> {
        let predictor = self.predictor(spec)?;
        let split = self.split_for(run, seed)?;
        let inputs = apply_to_all(&split.cases, spec, predictor, seed)?;
        let accounting = mask_accounting(spec.id, &split.cases, &inputs);

        let retrained;
        let scorer: &Recommender32 = if self.retrain_per_run || self.retrain_on_enriched {
            let mut cfg = self.recommender.config().clone();
            cfg.seed = derive_seed(seed, "recommender", 0);
            let sequences: Vec<TrainingSequence> = if self.retrain_on_enriched {
                split
                    .cases
                    .iter()
                    .zip(&inputs)
                    .map(|(c, e)| TrainingSequence { items: e.items.clone(), seen: c.seen.clone() })
                    .collect()
            } else {
                training_sequences(&split)
            };
            retrained = fit_recommender(&sequences, self.corpus.vocab.table_size(), &cfg)?;
            &retrained
        } else {
            &self.recommender
        };
        let ranks = rank_cases(scorer, &split.cases, &inputs)?;
        Ok((MetricSummary::from_ranks(&ranks, self.k), accounting, inputs))
    }
}

fn scenario(ctx: &Ctx, a: ScenarioArgs) -> Result<()> {
    let ev = Evaluator::new(ctx, &a.eval)?;
    let remove_percent = ctx.file.pick(a.remove_percent, "remove_percent", 0.2)?;
    let specs = if a.all || a.ids.is_empty() {
        ScenarioSpec::all(remove_percent)?
    } else {
        a.ids.iter().map(|&id| ScenarioSpec::from_id(id, remove_percent)).collect::<enrichrec::Result<Vec<_>>>()?
    };
    if let Some(spec) = specs.iter().find(|s| s.needs_predictor() && ev.enricher.is_none()) {
        bail!("scenario {} needs an enricher checkpoint (--enricher)", spec.id);
    }

    let mut settings = ev.settings();
    settings["command"] = json!("scenario");
    settings["scenarios"] = json!(specs);
    let header = header_line(ctx.seed, &settings);
    let dataset = ev.corpus.dataset.clone();

    let mut results = CsvFile::create(&a.out_dir.join("results.csv"), &header, &RESULT_COLUMNS)?;
    let mut summary = CsvFile::create(&a.out_dir.join("summary.csv"), &header, &RESULT_COLUMNS)?;
    let mut accounting_csv = CsvFile::create(&a.out_dir.join("accounting.csv"), &header, &ACCOUNTING_COLUMNS)?;

    for spec in &specs {
        log::info!("scenario {spec}");
        let mut first_run = None;
        let (runs, agg): (Vec<RunResult>, Aggregate) = repeat_and_aggregate::<_, anyhow::Error>(ev.runs, ev.base_seed, |run, seed| {
            let (metrics, acc, inputs) = ev.run_once(spec, run, seed)?;
            if run == 0 {
                first_run = Some((acc, inputs));
            }
            log::info!("  run {run}: NDCG@{k} {:.4} HR@{k} {:.4}", metrics.ndcg, metrics.hr, k = ev.k);
            Ok(metrics)
        })?;
        for r in &runs {
            results.row(result_row(&dataset, spec.id, r))?;
            summary.row(result_row(&dataset, spec.id, r))?;
        }
        let users = runs.first().map_or(0, |r| r.metrics.users);
        for row in aggregate_rows(&dataset, spec.id, ev.base_seed, &agg, users) {
            summary.row(row)?;
        }
        log::info!("scenario {}: NDCG@{k} {:.4} ± {:.4}, HR@{k} {:.4} ± {:.4}", spec.id, agg.ndcg_mean, agg.ndcg_std, agg.hr_mean, agg.hr_std, k = ev.k);

        let (acc, inputs) = first_run.expect("at least one run");
        if spec.id >= 3 {
            accounting_csv.row(accounting_row(&dataset, &acc))?;
        }
        if a.save_enriched {
            let path = a.out_dir.join(format!("scenario-{}.hrc", spec.id));
            let mut w = create_file(&path)?;
            write_enriched_corpus(&mut w, &ev.corpus, &inputs)?;
            w.flush()?;
        }
    }
    results.finish()?;
    summary.finish()?;
    accounting_csv.finish()?;
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad grid value `{s}`")))
        .collect()
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    let ev = Evaluator::new(ctx, &a.eval)?;
    let grid = match a.grid.clone().or(ctx.file.text("grid")) {
        Some(g) => parse_grid(&g)?,
        None => RANDOM_PERCENTS.to_vec(),
    };
    let specs = grid.iter().map(|&p| ScenarioSpec::random(p)).collect::<enrichrec::Result<Vec<_>>>()?;
    if ev.enricher.is_none() {
        bail!("sweep needs an enricher checkpoint (--enricher)");
    }
    let mut settings = ev.settings();
    settings["command"] = json!("sweep");
    settings["grid"] = json!(grid);
    let mut out = CsvFile::create(&a.out, &header_line(ctx.seed, &settings), &["dataset", "mask_percent", "ndcg_at_10", "hr_at_10"])?;
    for (spec, p) in specs.iter().zip(&grid) {
        let (_, agg) = repeat_and_aggregate::<_, anyhow::Error>(ev.runs, ev.base_seed, |run, seed| Ok(ev.run_once(spec, run, seed)?.0))?;
        log::info!("mask {p}: NDCG {:.4} HR {:.4}", agg.ndcg_mean, agg.hr_mean);
        out.row([ev.corpus.dataset.clone(), format!("{p}"), metric(agg.ndcg_mean), metric(agg.hr_mean)])?;
    }
    out.finish()
}

fn accounting(ctx: &Ctx, a: AccountingArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let enricher = load_enricher(&a.enricher)?;
    if enricher.vocab_size() != corpus.vocab.table_size() {
        bail!("enricher vocabulary ({}) does not match corpus ({})", enricher.vocab_size(), corpus.vocab.table_size());
    }
    let remove_percent = ctx.file.pick(None, "remove_percent", 0.2)?;
    let ids: Vec<u8> = if a.ids.is_empty() { (3..=9).collect() } else { a.ids.clone() };
    let specs = ids.iter().map(|&id| ScenarioSpec::from_id(id, remove_percent)).collect::<enrichrec::Result<Vec<_>>>()?;
    let split = split_corpus(&corpus, 0, 0)?;
    let seed = run_seed(ctx.seed, 0);
    let settings = json!({ "command": "accounting", "dataset": corpus.dataset, "scenarios": specs, "enricher": enricher.config() });
    let mut out = CsvFile::create(&a.out, &header_line(ctx.seed, &settings), &ACCOUNTING_COLUMNS)?;
    for spec in &specs {
        let predictor = spec.needs_predictor().then_some(&enricher as &dyn MaskPredictor);
        let inputs = apply_to_all(&split.cases, spec, predictor, seed)?;
        let acc = mask_accounting(spec.id, &split.cases, &inputs);
        log::info!("scenario {}: median {} total {} slots {}", spec.id, acc.median_mask_count, acc.total_mask_count, acc.candidate_slots);
        out.row(accounting_row(&corpus.dataset, &acc))?;
    }
    out.finish()
}

#[derive(Default)]
struct ReportRow {
    ndcg: [Option<String>; 2],
    hr: [Option<String>; 2],
}

fn report(a: ReportArgs) -> Result<()> {
    let mut rows: BTreeMap<(String, u8), ReportRow> = BTreeMap::new();
    for path in &a.summaries {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(open_file(path)?);
        let headers = rd.headers().with_context(|| format!("reading {}", path.display()))?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).with_context(|| format!("{}: missing column `{name}`", path.display()))
        };
        let (c_ds, c_sc, c_run, c_ndcg, c_hr) = (col("dataset")?, col("scenario")?, col("run")?, col("ndcg_at_10")?, col("hr_at_10")?);
        for rec in rd.records() {
            let rec = rec.with_context(|| format!("reading {}", path.display()))?;
            let slot = match &rec[c_run] {
                "mean" => 0,
                "std" => 1,
                _ => continue,
            };
            let scenario: u8 = rec[c_sc].parse().with_context(|| format!("{}: bad scenario `{}`", path.display(), &rec[c_sc]))?;
            let entry = rows.entry((rec[c_ds].to_string(), scenario)).or_default();
            entry.ndcg[slot] = Some(rec[c_ndcg].to_string());
            entry.hr[slot] = Some(rec[c_hr].to_string());
        }
    }
    if rows.is_empty() {
        bail!("no mean/std rows found in the given summaries");
    }
    let columns = ["dataset", "scenario", "ndcg_at_10_mean", "ndcg_at_10_std", "hr_at_10_mean", "hr_at_10_std"];
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|((ds, sc), r)| {
            let v = |x: &Option<String>| x.clone().unwrap_or_default();
            vec![ds.clone(), sc.to_string(), v(&r.ndcg[0]), v(&r.ndcg[1]), v(&r.hr[0]), v(&r.hr[1])]
        })
        .collect();
    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_writer(create_file(out)?);
        w.write_record(columns)?;
        for row in &table {
            w.write_record(row)?;
        }
        w.flush()?;
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "| Dataset | Scenario | NDCG@10 | HR@10 |")?;
    writeln!(stdout, "|---|---|---|---|")?;
    for r in &table {
        writeln!(stdout, "| {} | {} | {} ± {} | {} ± {} |", r[0], r[1], r[2], r[3], r[4], r[5])?;
    }
    Ok(())
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig { users: a.users.unwrap_or(d.users), items: a.items.unwrap_or(d.items), seed: ctx.seed, ..d };
    let log = generate(&cfg)?;
    let mut w = create_file(&a.out)?;
    write_amazon_jsonl(&mut w, &log)?;
    w.flush()?;
    log::info!("wrote {} interactions to {}", log.len(), a.out.display());
    Ok(())
}
