use std::io::Write;

use serde::Serialize;

use super::Corpus;
use crate::error::{Error, Result};

/// Dataset size summary in the shape of a users/items/actions table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub dataset: String,
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_actions_per_user: f64,
    pub avg_actions_per_item: f64,
}

impl DatasetStats {
    pub fn of(corpus: &Corpus) -> Self {
        let users = corpus.histories.len();
        let items = corpus.vocab.len();
        let actions = corpus.action_count();
        let ratio = |n: usize| if n == 0 { 0.0 } else { actions as f64 / n as f64 };
        Self {
            dataset: corpus.dataset.clone(),
            users,
            items,
            actions,
            avg_actions_per_user: ratio(users),
            avg_actions_per_item: ratio(items),
        }
    }
}

/// Writes `dataset,users,items,actions,avg_actions_per_user,avg_actions_per_item`.
pub fn write_stats_csv<W: Write>(w: W, rows: &[DatasetStats]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["dataset", "users", "items", "actions", "avg_actions_per_user", "avg_actions_per_item"])
        .map_err(csv_err)?;
    for s in rows {
        out.write_record([
            s.dataset.clone(),
            s.users.to_string(),
            s.items.to_string(),
            s.actions.to_string(),
            format!("{:.2}", s.avg_actions_per_user),
            format!("{:.2}", s.avg_actions_per_item),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
