use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::message::{Message, MessageKind, Party, Payload, Stage};

/// Append-only record of every simulated message.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommsLedger {
    records: Vec<Message>,
}

/// Parameter totals of one stage-one round.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTotals {
    pub round: usize,
    pub messages: usize,
    pub up: usize,
    pub down: usize,
    pub by_kind: BTreeMap<MessageKind, usize>,
}

impl CommsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, m: Message) {
        self.records.push(m);
    }

    pub fn records(&self) -> &[Message] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn since(&self, mark: usize) -> &[Message] {
        &self.records[mark.min(self.records.len())..]
    }

    pub fn total_parameters(&self) -> usize {
        self.records.iter().map(|m| m.parameter_count).sum()
    }

    pub fn count_kind(&self, kind: MessageKind) -> usize {
        self.records.iter().filter(|m| m.kind == kind).count()
    }

    /// Per-round totals over stage-one records, folded from the records.
    pub fn round_totals(&self) -> Vec<RoundTotals> {
        let mut map: BTreeMap<usize, RoundTotals> = BTreeMap::new();
        for m in self.records.iter().filter(|m| m.stage == Stage::Pretrain) {
            let t = map.entry(m.round).or_insert_with(|| RoundTotals {
                round: m.round,
                ..RoundTotals::default()
            });
            t.messages += 1;
            if m.upstream() {
                t.up += m.parameter_count;
            } else {
                t.down += m.parameter_count;
            }
            *t.by_kind.entry(m.kind).or_default() += m.parameter_count;
        }
        map.into_values().collect()
    }

    /// One JSON object per message; payloads appear as digests only.
    pub fn write_trace<W: Write>(&self, mut w: W) -> Result<()> {
        for m in &self.records {
            serde_json::to_writer(&mut w, m).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_trace(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(CommsLedger { records })
    }
}

/// Full payload bytes keyed by digest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PayloadArchive {
    blobs: BTreeMap<String, Vec<u8>>,
}

impl PayloadArchive {
    pub fn get(&self, digest: &str) -> Option<&[u8]> {
        self.blobs.get(digest).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    fn insert(&mut self, digest: String, data: Vec<u8>) {
        self.blobs.entry(digest).or_insert(data);
    }

    /// Sidecar layout: per blob, a 64-byte hex digest, a little-endian u64
    /// length, then the bytes.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for (d, data) in &self.blobs {
            w.write_all(d.as_bytes())?;
            w.write_all(&(data.len() as u64).to_le_bytes())?;
            w.write_all(data)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut buf: &[u8]) -> Result<Self> {
        let mut blobs = BTreeMap::new();
        while !buf.is_empty() {
            if buf.len() < 72 {
                return Err(Error::Format("truncated archive entry".into()));
            }
            let d = std::str::from_utf8(&buf[..64]).map_err(|e| Error::Format(e.to_string()))?.to_string();
            let n = u64::from_le_bytes(buf[64..72].try_into().expect("8 bytes")) as usize;
            if buf.len() < 72 + n {
                return Err(Error::Format("truncated archive blob".into()));
            }
            blobs.insert(d, buf[72..72 + n].to_vec());
            buf = &buf[72 + n..];
        }
        Ok(PayloadArchive { blobs })
    }
}

/// Optional latency model, used for reporting only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub per_message_s: f64,
    pub per_byte_s: f64,
}

impl LatencyModel {
    pub fn estimate(&self, ledger: &CommsLedger) -> f64 {
        ledger
            .records()
            .iter()
            .map(|m| self.per_message_s + self.per_byte_s * m.byte_count as f64)
            .sum()
    }
}

/// Lossless, zero-latency simulated network. Every send lands in the
/// ledger; with an archive, payload bytes are kept for auditing.
#[derive(Clone, Debug, Default)]
pub struct Network {
    pub ledger: CommsLedger,
    pub archive: Option<PayloadArchive>,
}

impl Network {
    pub fn new(keep_archive: bool) -> Self {
        Network {
            ledger: CommsLedger::new(),
            archive: keep_archive.then(PayloadArchive::default),
        }
    }

    pub fn send(&mut self, kind: MessageKind, sender: Party, receiver: Party, stage: Stage, round: usize, payload: Vec<Payload>) {
        let mut items = Vec::with_capacity(payload.len());
        for p in payload {
            if let Some(a) = self.archive.as_mut() {
                a.insert(p.item.digest.clone(), p.data);
            }
            items.push(p.item);
        }
        self.ledger.append(Message::new(kind, sender, receiver, stage, round, items));
    }
}
