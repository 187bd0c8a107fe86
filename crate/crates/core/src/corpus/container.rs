//! Binary corpus container.
//!
//! Layout: magic `HRC1`, little-endian `u32` metadata length, UTF-8 JSON
//! metadata, then one record per user: `u32` length, that many `u32` item
//! indices, that many `i64` timestamps. Record version 2 appends one
//! provenance byte per item (`0` observed, `1` imaginary).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Corpus, ItemIndex, UserHistory, Vocab, FIRST_ITEM};
use crate::error::{Error, Result};
use crate::scenario::EnrichedHistory;

pub const CORPUS_MAGIC: &[u8; 4] = b"HRC1";
const PLAIN_RECORDS: u32 = 1;
const PROVENANCE_RECORDS: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerCounts {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerMeta {
    pub record_version: u32,
    pub dataset: String,
    /// Item ids in index order starting at index 2.
    pub items: Vec<String>,
    pub users: Vec<String>,
    pub counts: ContainerCounts,
    pub config: serde_json::Value,
}

fn write_header<W: Write>(w: &mut W, meta: &ContainerMeta) -> Result<()> {
    let json = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

fn write_record<W: Write>(w: &mut W, items: &[ItemIndex], timestamps: &[i64], provenance: Option<&[bool]>) -> Result<()> {
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for &i in items {
        w.write_all(&i.to_le_bytes())?;
    }
    for &t in timestamps {
        w.write_all(&t.to_le_bytes())?;
    }
    if let Some(flags) = provenance {
        let bytes: Vec<u8> = flags.iter().map(|&imaginary| u8::from(imaginary)).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &Corpus) -> Result<()> {
    let meta = ContainerMeta {
        record_version: PLAIN_RECORDS,
        dataset: corpus.dataset.clone(),
        items: corpus.vocab.item_ids().to_vec(),
        users: corpus.users.clone(),
        counts: ContainerCounts {
            users: corpus.histories.len(),
            items: corpus.vocab.len(),
            actions: corpus.action_count(),
        },
        config: corpus.config.clone(),
    };
    write_header(&mut w, &meta)?;
    for h in &corpus.histories {
        write_record(&mut w, &h.items, &h.timestamps, None)?;
    }
    w.flush()?;
    Ok(())
}

/// Persists enriched evaluation inputs with provenance flags. Imaginary
/// items inherit the timestamp of the nearest observed item before them
/// (or after them, at the front).
pub fn write_enriched_corpus<W: Write>(mut w: W, corpus: &Corpus, enriched: &[EnrichedHistory]) -> Result<()> {
    let meta = ContainerMeta {
        record_version: PROVENANCE_RECORDS,
        dataset: corpus.dataset.clone(),
        items: corpus.vocab.item_ids().to_vec(),
        users: enriched.iter().map(|e| corpus.users[e.source_user as usize].clone()).collect(),
        counts: ContainerCounts {
            users: enriched.len(),
            items: corpus.vocab.len(),
            actions: enriched.iter().map(|e| e.items.len()).sum(),
        },
        config: corpus.config.clone(),
    };
    write_header(&mut w, &meta)?;
    for e in enriched {
        let source = &corpus.histories[e.source_user as usize].timestamps;
        let first = source.first().copied().unwrap_or(0);
        let mut observed = 0usize;
        let mut last = first;
        let mut ts = Vec::with_capacity(e.items.len());
        for &imaginary in &e.imaginary {
            if !imaginary {
                last = source.get(observed).copied().unwrap_or(last);
                observed += 1;
            }
            ts.push(last);
        }
        write_record(&mut w, &e.items, &ts, Some(&e.imaginary))?;
    }
    w.flush()?;
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated container at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// A loaded container; `provenance` is present for version-2 records.
#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub provenance: Option<Vec<Vec<bool>>>,
}

pub fn read_corpus<R: Read>(mut r: R) -> Result<LoadedCorpus> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut rd = ByteReader { buf: &buf, pos: 0 };
    if rd.take(4)? != CORPUS_MAGIC {
        return Err(Error::Format("missing HRC1 magic".into()));
    }
    let meta_len = rd.u32()? as usize;
    let meta: ContainerMeta =
        serde_json::from_slice(rd.take(meta_len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let with_provenance = match meta.record_version {
        PLAIN_RECORDS => false,
        PROVENANCE_RECORDS => true,
        v => return Err(Error::Format(format!("unsupported record version {v}"))),
    };
    if meta.users.len() != meta.counts.users || meta.items.len() != meta.counts.items {
        return Err(Error::Format("metadata counts disagree with id lists".into()));
    }
    let vocab = Vocab::from_items(meta.items.iter().cloned())?;
    let max_index = FIRST_ITEM as usize + vocab.len();
    let mut histories = Vec::with_capacity(meta.counts.users);
    let mut provenance = with_provenance.then(Vec::new);
    let mut actions = 0usize;
    for u in 0..meta.counts.users {
        let n = rd.u32()? as usize;
        let items = (0..n).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
        if let Some(&bad) = items.iter().find(|&&i| (i as usize) >= max_index || i < FIRST_ITEM) {
            return Err(Error::Format(format!("user {u}: item index {bad} outside vocabulary")));
        }
        let timestamps = (0..n).map(|_| rd.i64()).collect::<Result<Vec<_>>>()?;
        if timestamps.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Format(format!("user {u}: timestamps not sorted")));
        }
        if let Some(p) = provenance.as_mut() {
            p.push(rd.take(n)?.iter().map(|&b| b != 0).collect());
        }
        actions += n;
        histories.push(UserHistory::new(u as u32, items, timestamps));
    }
    if rd.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - rd.pos)));
    }
    if actions != meta.counts.actions {
        return Err(Error::Format(format!("expected {} actions, found {actions}", meta.counts.actions)));
    }
    Ok(LoadedCorpus {
        corpus: Corpus { dataset: meta.dataset, vocab, users: meta.users, histories, config: meta.config },
        provenance,
    })
}
