//! CSV files with a one-line `#` metadata header.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use enrichrec::evaluation::{Aggregate, RunResult};
use enrichrec::scenario::MaskAccounting;

pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("cannot create directory {}", parent.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn open_file(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

/// `path` with `suffix` appended to the file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub struct CsvFile {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvFile {
    pub fn create(path: &Path, header_line: &str, columns: &[&str]) -> Result<Self> {
        let mut file = create_file(path)?;
        writeln!(file, "{header_line}").with_context(|| format!("cannot write {}", path.display()))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(columns).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(Self { path: path.to_path_buf(), writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).with_context(|| format!("cannot write {}", self.path.display()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().with_context(|| format!("cannot write {}", self.path.display()))?;
        log::info!("wrote {}", self.path.display());
        Ok(())
    }
}

pub fn metric(x: f64) -> String {
    format!("{x:.6}")
}

pub const RESULT_COLUMNS: [&str; 7] = ["dataset", "scenario", "run", "seed", "ndcg_at_10", "hr_at_10", "users"];

pub fn result_row(dataset: &str, scenario: u8, r: &RunResult) -> Vec<String> {
    vec![
        dataset.to_string(),
        scenario.to_string(),
        r.run.to_string(),
        r.seed.to_string(),
        metric(r.metrics.ndcg),
        metric(r.metrics.hr),
        r.metrics.users.to_string(),
    ]
}

/// The `mean` and `std` rows that close a scenario block in a summary.
pub fn aggregate_rows(dataset: &str, scenario: u8, base_seed: u64, agg: &Aggregate, users: usize) -> [Vec<String>; 2] {
    let row = |label: &str, ndcg: f64, hr: f64| {
        vec![
            dataset.to_string(),
            scenario.to_string(),
            label.to_string(),
            base_seed.to_string(),
            metric(ndcg),
            metric(hr),
            users.to_string(),
        ]
    };
    [row("mean", agg.ndcg_mean, agg.hr_mean), row("std", agg.ndcg_std, agg.hr_std)]
}

pub const ACCOUNTING_COLUMNS: [&str; 5] =
    ["dataset", "scenario", "median_mask_count", "total_mask_count", "candidate_slots"];

pub fn accounting_row(dataset: &str, a: &MaskAccounting) -> Vec<String> {
    vec![
        dataset.to_string(),
        a.scenario.to_string(),
        format!("{}", a.median_mask_count),
        a.total_mask_count.to_string(),
        a.candidate_slots.to_string(),
    ]
}
