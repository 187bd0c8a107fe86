//! `key = value` config files layered under command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Every key a config file may contain.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "dataset",
    "format",
    "map",
    "min_actions",
    "on_bad_row",
    "negatives",
    "k",
    "runs",
    "remove_percent",
    "retrain_per_run",
    "retrain_on_enriched",
    "redraw_negatives",
    "grid",
    "enricher.layers",
    "enricher.dim",
    "enricher.heads",
    "enricher.ffn_dim",
    "enricher.max_len",
    "enricher.mask_prob",
    "enricher.lr",
    "enricher.batch_size",
    "enricher.epochs",
    "enricher.dropout",
    "recommender.blocks",
    "recommender.dim",
    "recommender.heads",
    "recommender.max_len",
    "recommender.lr",
    "recommender.batch_size",
    "recommender.epochs",
    "recommender.dropout",
];

#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    path: Option<PathBuf>,
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    /// Lines are `key = value`; blank lines and `#` comments are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        Self::parse(&text, Some(path.to_path_buf()))
    }

    pub fn parse(text: &str, path: Option<PathBuf>) -> Result<Self> {
        let name = path.as_ref().map_or("<config>".to_string(), |p| p.display().to_string());
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{name}:{}: expected `key = value`", n + 1);
            };
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                bail!("{name}:{}: unknown key `{key}`", n + 1);
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                bail!("{name}:{}: duplicate key `{key}`", n + 1);
            }
        }
        Ok(Self { path, values })
    }

    fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(raw) = self.values.get(key) else {
            return Ok(None);
        };
        let name = self.path.as_ref().map_or("<config>".to_string(), |p| p.display().to_string());
        raw.parse::<T>()
            .map(Some)
            .map_err(|e| anyhow::anyhow!("{name}: invalid value `{raw}` for `{key}`: {e}"))
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    /// Raw file value for free-text keys.
    pub fn text(&self, key: &str) -> Option<String> {
        self.values.get(key).cloned()
    }

    /// Boolean switches: a set flag wins, otherwise the file decides.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.get::<bool>(key)?.unwrap_or(false))
    }
}

/// Hex SHA-256 prefix of the resolved settings as JSON.
pub fn digest<S: Serialize>(settings: &S) -> String {
    let json = serde_json::to_vec(settings).expect("settings serialize");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// First line of every CSV this tool writes.
pub fn header_line<S: Serialize>(seed: u64, settings: &S) -> String {
    format!("# enrichrec {} seed={seed} config={}", env!("CARGO_PKG_VERSION"), digest(settings))
}
