//! Reading and writing records, pairs, labels and JSON artifacts.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CandidatePair, CandidatePairSet, IntentLabelMatrix, IntentSpec, Record, Split};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (no, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), no + 1)))?,
        );
    }
    Ok(out)
}

/// Reads records from CSV (by `.csv` extension) or JSON lines.
///
/// `id_column` names the id attribute; an optional `source` attribute is
/// lifted into [`Record::source`]. Empty CSV cells and JSON nulls become
/// null fields. Every other column is kept as an attribute, in file order.
pub fn read_records(path: &Path, id_column: &str) -> Result<Vec<Record>> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let rows: Vec<IndexMap<String, Option<String>>> = if is_csv {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers()?.clone();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(
                headers
                    .iter()
                    .zip(rec.iter())
                    .map(|(h, v)| (h.to_string(), (!v.is_empty()).then(|| v.to_string())))
                    .collect(),
            );
        }
        rows
    } else {
        read_jsonl::<IndexMap<String, serde_json::Value>>(path)?
            .into_iter()
            .map(|obj| {
                obj.into_iter()
                    .map(|(k, v)| {
                        let v = match v {
                            serde_json::Value::Null => None,
                            serde_json::Value::String(s) => Some(s),
                            other => Some(other.to_string()),
                        };
                        (k, v)
                    })
                    .collect()
            })
            .collect()
    };
    rows.into_iter()
        .enumerate()
        .map(|(i, mut row)| {
            let id = row
                .shift_remove(id_column)
                .flatten()
                .ok_or_else(|| Error::data(format!("{}: row {} has no `{id_column}`", path.display(), i + 1)))?;
            let source = row.shift_remove("source").flatten().unwrap_or_default();
            Ok(Record { id, source, fields: row })
        })
        .collect()
}

/// Writes records as JSON lines with `id`, `source` and the attributes.
pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let rows = records.iter().map(|r| {
        let mut obj = serde_json::Map::new();
        obj.insert("id".into(), r.id.clone().into());
        obj.insert("source".into(), r.source.clone().into());
        for (k, v) in &r.fields {
            obj.insert(k.clone(), v.clone().map_or(serde_json::Value::Null, Into::into));
        }
        serde_json::Value::Object(obj)
    });
    write_jsonl(path, rows)
}

pub fn write_pairs(path: &Path, pairs: &CandidatePairSet) -> Result<()> {
    write_jsonl(path, pairs.iter())
}

pub fn read_pairs(path: &Path) -> Result<CandidatePairSet> {
    CandidatePairSet::from_indexed(read_jsonl::<CandidatePair>(path)?)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelLine {
    pair_id: usize,
    split: Split,
    labels: Vec<u8>,
}

pub fn write_labels(path: &Path, labels: &IntentLabelMatrix) -> Result<()> {
    write_jsonl(
        path,
        (0..labels.num_pairs()).map(|i| LabelLine {
            pair_id: i,
            split: labels.split(i),
            labels: labels.row(i).iter().map(|&b| b as u8).collect(),
        }),
    )
}

/// Reads a label file. Lines may come in any order; pair ids must be
/// exactly `0..n` and every line must carry the same number of labels.
pub fn read_labels(path: &Path) -> Result<IntentLabelMatrix> {
    let mut lines = read_jsonl::<LabelLine>(path)?;
    lines.sort_by_key(|l| l.pair_id);
    let p = lines.first().map_or(0, |l| l.labels.len());
    let mut rows = Vec::with_capacity(lines.len());
    let mut splits = Vec::with_capacity(lines.len());
    for (i, l) in lines.into_iter().enumerate() {
        if l.pair_id != i {
            return Err(Error::data(format!("{}: missing or duplicate pair_id near {i}", path.display())));
        }
        if let Some(bad) = l.labels.iter().find(|&&v| v > 1) {
            return Err(Error::data(format!("{}: pair {i} has label {bad}", path.display())));
        }
        rows.push(l.labels.iter().map(|&v| v == 1).collect());
        splits.push(l.split);
    }
    IntentLabelMatrix::new(p, rows, splits).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_intents(path: &Path, intents: &[IntentSpec]) -> Result<()> {
    write_json(path, &intents)
}

pub fn read_intents(path: &Path) -> Result<Vec<IntentSpec>> {
    let intents: Vec<IntentSpec> = read_json(path)?;
    crate::model::validate_intents(&intents)?;
    Ok(intents)
}
