//! JSON Lines dataset files.
//!
//! Line 1 is a header `{dims, lengths, splits, version}`; every further line
//! is one sample `{client, split, y, text, audio, visual}` with bodies as
//! nested arrays. Numbers are written with 17 significant digits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodels::{FeatureSequence, Modality};
use crate::numkit::Tensor;

use super::{ClientDataset, Federation, Sample, Split};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PerModality {
    text: usize,
    audio: usize,
    visual: usize,
}

impl PerModality {
    fn from_array(a: [usize; 3]) -> Self {
        PerModality {
            text: a[0],
            audio: a[1],
            visual: a[2],
        }
    }

    fn to_array(&self) -> [usize; 3] {
        [self.text, self.audio, self.visual]
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: PerModality,
    lengths: PerModality,
    splits: BTreeMap<Split, usize>,
    version: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    client: usize,
    split: Split,
    y: f64,
    text: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
    visual: Vec<Vec<f64>>,
}

fn push_number(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("string write");
}

fn push_body(out: &mut String, t: &Tensor) {
    out.push('[');
    for r in 0..t.rows() {
        if r > 0 {
            out.push(',');
        }
        out.push('[');
        for (c, &v) in t.row_slice(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            push_number(out, v);
        }
        out.push(']');
    }
    out.push(']');
}

/// Writes a federation (client side: bodies of every modality included).
pub fn export_federation<W: Write>(fed: &Federation, mut w: W) -> Result<()> {
    let header = Header {
        dims: PerModality::from_array(fed.dims),
        lengths: PerModality::from_array(fed.lengths),
        splits: Split::ALL.iter().map(|&s| (s, fed.client_count(s))).collect(),
        version: FORMAT_VERSION,
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    let mut line = String::new();
    for c in fed.clients() {
        let scope = c.scope();
        for (i, s) in c.samples().iter().enumerate() {
            line.clear();
            write!(line, "{{\"client\":{},\"split\":\"{}\",\"y\":", c.id(), c.split().as_str()).expect("string write");
            push_number(&mut line, s.y());
            for m in [Modality::Text, Modality::Audio, Modality::Visual] {
                write!(line, ",\"{}\":", m.as_str()).expect("string write");
                push_body(&mut line, scope.private(i, m).body());
            }
            line.push_str("}\n");
            w.write_all(line.as_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_federation(fed: &Federation, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    export_federation(fed, std::io::BufWriter::new(f))
}

fn body(rows: Vec<Vec<f64>>, dim: usize, len: usize, m: Modality, record: usize) -> Result<Tensor> {
    if rows.len() != len {
        return Err(Error::Format(format!(
            "record {record}: {m} has {} rows, header says {len}",
            rows.len()
        )));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Format(format!(
            "record {record}: {m} row of width {}, header says d = {dim}",
            r.len()
        )));
    }
    Tensor::from_rows(&rows)
}

/// Parses a dataset stream. Every sequence is real; `<CLS>` is re-pooled.
pub fn read_federation<R: BufRead>(r: R) -> Result<Federation> {
    let mut lines = r.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("header: {e}"),
        })?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", header.version)));
    }
    let dims = header.dims.to_array();
    let lengths = header.lengths.to_array();
    let mut order: Vec<(usize, Split)> = Vec::new();
    let mut grouped: BTreeMap<usize, (Split, Vec<Sample>)> = BTreeMap::new();
    let mut record = 0;
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let text = body(rec.text, dims[0], lengths[0], Modality::Text, record)?;
        let audio = body(rec.audio, dims[1], lengths[1], Modality::Audio, record)?;
        let visual = body(rec.visual, dims[2], lengths[2], Modality::Visual, record)?;
        let sample = Sample::new(
            FeatureSequence::real(Modality::Text, text)?,
            FeatureSequence::real(Modality::Audio, audio)?,
            FeatureSequence::real(Modality::Visual, visual)?,
            rec.y,
        )
        .map_err(|e| Error::Format(format!("record {record}: {e}")))?;
        match grouped.get_mut(&rec.client) {
            Some((split, samples)) => {
                if *split != rec.split {
                    return Err(Error::Format(format!(
                        "record {record}: client {} listed under {} and {}",
                        rec.client,
                        split.as_str(),
                        rec.split.as_str()
                    )));
                }
                samples.push(sample);
            }
            None => {
                order.push((rec.client, rec.split));
                grouped.insert(rec.client, (rec.split, vec![sample]));
            }
        }
        record += 1;
    }
    let mut clients = Vec::with_capacity(order.len());
    for (id, _) in order {
        let (split, samples) = grouped.remove(&id).expect("grouped above");
        clients.push(ClientDataset::new(id, split, samples)?);
    }
    for (split, &n) in &header.splits {
        let got = clients.iter().filter(|c| c.split() == *split).count();
        if got != n {
            return Err(Error::Format(format!(
                "header lists {n} {} clients, file has {got}",
                split.as_str()
            )));
        }
    }
    Federation::new(dims, lengths, clients)
}

pub fn ingest_features(path: &Path) -> Result<Federation> {
    let f = std::fs::File::open(path)?;
    read_federation(BufReader::new(f))
}
