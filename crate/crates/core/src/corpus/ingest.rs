use std::io::{BufRead, BufReader, Read};
use std::str::FromStr;

use serde_json::Value;

use super::Interaction;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    JsonLines,
    Csv,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json-lines" | "json" | "ndjson" => Ok(Self::JsonLines),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown input format {other:?}"))),
        }
    }
}

/// Names of the source fields holding user, item and timestamp.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldMap {
    pub user: String,
    pub item: String,
    pub time: String,
}

impl FieldMap {
    /// Amazon review dump field names.
    pub fn amazon() -> Self {
        Self { user: "reviewerID".into(), item: "asin".into(), time: "unixReviewTime".into() }
    }
}

impl FromStr for FieldMap {
    type Err = Error;

    /// Accepts `amazon` or `user=<f>,item=<f>,time=<f>`.
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("amazon") {
            return Ok(Self::amazon());
        }
        let (mut user, mut item, mut time) = (None, None, None);
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad field map entry {part:?}")))?;
            let v = Some(v.trim().to_string());
            match k.trim() {
                "user" => user = v,
                "item" => item = v,
                "time" | "timestamp" => time = v,
                other => return Err(Error::Config(format!("unknown field map key {other:?}"))),
            }
        }
        match (user, item, time) {
            (Some(user), Some(item), Some(time)) => Ok(Self { user, item, time }),
            _ => Err(Error::Config(format!("field map {s:?} must name user, item and time"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RowErrorPolicy {
    #[default]
    Fail,
    Skip,
}

impl FromStr for RowErrorPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fail" => Ok(Self::Fail),
            "skip" => Ok(Self::Skip),
            other => Err(Error::Config(format!("unknown bad-row policy {other:?}; use fail or skip"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParseOutcome {
    pub interactions: Vec<Interaction>,
    /// `(line, message)` for every skipped row.
    pub skipped: Vec<(usize, String)>,
}

/// Reads one interaction per well-formed row, preserving input order.
pub fn parse_interactions<R: Read>(
    source: R,
    format: InputFormat,
    fields: &FieldMap,
    policy: RowErrorPolicy,
) -> Result<ParseOutcome> {
    match format {
        InputFormat::JsonLines => parse_json_lines(source, fields, policy),
        InputFormat::Csv => parse_csv(source, fields, policy),
    }
}

fn handle_row(
    out: &mut ParseOutcome,
    policy: RowErrorPolicy,
    line: usize,
    row: std::result::Result<Interaction, String>,
) -> Result<()> {
    match row {
        Ok(it) => out.interactions.push(it),
        Err(message) => match policy {
            RowErrorPolicy::Fail => return Err(Error::Row { line, message }),
            RowErrorPolicy::Skip => out.skipped.push((line, message)),
        },
    }
    Ok(())
}

fn make_interaction(user: String, item: String, time: i64) -> std::result::Result<Interaction, String> {
    if user.is_empty() {
        return Err("empty user id".into());
    }
    if item.is_empty() {
        return Err("empty item id".into());
    }
    if time < 0 {
        return Err(format!("negative timestamp {time}"));
    }
    Ok(Interaction { user_id: user, item_id: item, timestamp: time })
}

fn json_id(v: &Value) -> std::result::Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(format!("id field holds {other}")),
    }
}

fn json_time(v: &Value) -> std::result::Result<i64, String> {
    match v {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
            .ok_or_else(|| format!("timestamp {n} is not an integer")),
        Value::String(s) => s.trim().parse().map_err(|_| format!("timestamp {s:?} is not an integer")),
        other => Err(format!("timestamp field holds {other}")),
    }
}

fn parse_json_lines<R: Read>(source: R, fields: &FieldMap, policy: RowErrorPolicy) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                handle_row(&mut out, policy, line_no, Err(format!("invalid JSON: {e}")))?;
                continue;
            }
        };
        let Some(obj) = value.as_object() else {
            handle_row(&mut out, policy, line_no, Err("row is not a JSON object".into()))?;
            continue;
        };
        let get = |name: &str| {
            obj.get(name).ok_or_else(|| {
                Error::Config(format!("line {line_no}: mapped field {name:?} is missing"))
            })
        };
        let (u, it, t) = (get(&fields.user)?, get(&fields.item)?, get(&fields.time)?);
        let row = json_id(u).and_then(|u| {
            let item = json_id(it)?;
            let time = json_time(t)?;
            make_interaction(u, item, time)
        });
        handle_row(&mut out, policy, line_no, row)?;
    }
    Ok(out)
}

fn parse_csv<R: Read>(source: R, fields: &FieldMap, policy: RowErrorPolicy) -> Result<ParseOutcome> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(source);
    let mut out = ParseOutcome::default();
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => return Err(Error::Io(std::io::Error::other(e))),
        Err(e) => return Err(Error::Row { line: 1, message: e.to_string() }),
    };
    if headers.is_empty() {
        return Ok(out);
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("mapped field {name:?} is not a CSV column")))
    };
    let (cu, ci, ct) = (column(&fields.user)?, column(&fields.item)?, column(&fields.time)?);
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                handle_row(&mut out, policy, line, Err(e.to_string()))?;
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row = match (record.get(cu), record.get(ci), record.get(ct)) {
            (Some(u), Some(i), Some(t)) => t
                .trim()
                .parse::<i64>()
                .map_err(|_| format!("timestamp {t:?} is not an integer"))
                .and_then(|t| make_interaction(u.to_string(), i.to_string(), t)),
            _ => Err("row has too few columns".to_string()),
        };
        handle_row(&mut out, policy, line, row)?;
    }
    Ok(out)
}
