//! Pair serialization, a hashed character n-gram embedder, and the on-disk
//! embedding format shared with external encoders.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::{Error, Result};
use crate::io;
use crate::model::{CandidatePair, CandidatePairSet, Dataset};
use crate::nn::DenseMatrix;

pub const LEFT: &str = "«L»";
pub const RIGHT: &str = "«R»";
pub const ATTR: &str = "«A»";

const MAGIC: u32 = u32::from_le_bytes(*b"MIEV");
pub const FORMAT_VERSION: u32 = 1;
const SIGN_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const MIN_DIM: usize = 16;

/// Textual form of a record pair: `«L» a1 «A» a2 «R» b1 «A» b2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedPair {
    pub text: String,
}

fn escape(value: &str) -> String {
    value.replace('\\', "\\\\").replace('«', "\\«")
}

/// Attribute names in first-seen order over the dataset.
pub fn schema(records: &Dataset) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for r in records.records() {
        for k in r.fields.keys() {
            if !names.contains(k) {
                names.push(k.clone());
            }
        }
    }
    names
}

/// Serializes a pair over `fields`; missing or null values leave an empty
/// slot.
pub fn serialize_pair(pair: &CandidatePair, records: &Dataset, fields: &[String]) -> Result<SerializedPair> {
    let side = |id: &str| -> Result<String> {
        let r = records.require(id)?;
        Ok(fields.iter().map(|f| escape(r.get(f).unwrap_or(""))).collect::<Vec<_>>().join(&format!(" {ATTR} ")))
    };
    Ok(SerializedPair {
        text: format!("{LEFT} {} {RIGHT} {}", side(&pair.left_id)?, side(&pair.right_id)?),
    })
}

/// Recovers the left and right attribute slots of a serialization.
pub fn parse_serialized(text: &str) -> Result<(Vec<String>, Vec<String>)> {
    let bad = |why: &str| Error::data(format!("malformed serialized pair ({why}): {text:?}"));
    let mut segments: Vec<(char, String)> = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' => cur.push(chars.next().ok_or_else(|| bad("dangling escape"))?),
            '«' => {
                let kind = chars.next().ok_or_else(|| bad("truncated delimiter"))?;
                if chars.next() != Some('»') || !matches!(kind, 'L' | 'R' | 'A') {
                    return Err(bad("unknown delimiter"));
                }
                segments.push((kind, std::mem::take(&mut cur)));
            }
            _ => cur.push(c),
        }
    }
    // segments[i].1 is the text before delimiter i; the tail follows the last one.
    let tail = cur;
    let kinds: Vec<char> = segments.iter().map(|s| s.0).collect();
    let r_at = kinds.iter().position(|&k| k == 'R').ok_or_else(|| bad("missing right delimiter"))?;
    if kinds.first() != Some(&'L')
        || !segments[0].1.is_empty()
        || kinds[1..].iter().filter(|&&k| k != 'A').count() != 1
    {
        return Err(bad("delimiters out of order"));
    }
    let mut texts: Vec<String> = segments.into_iter().skip(1).map(|s| s.1).collect();
    texts.push(tail);
    let last = texts.len() - 1;
    let slots: Vec<String> = texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let t = t.strip_prefix(' ').unwrap_or(&t).to_string();
            if i < last {
                t.strip_suffix(' ').map(str::to_string).unwrap_or(t)
            } else {
                t
            }
        })
        .collect();
    let right = slots[r_at..].to_vec();
    let left = slots[..r_at].to_vec();
    Ok((left, right))
}

/// One intent's pair vectors, row `i` belonging to pair id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEmbeddingSet {
    pub intent_id: usize,
    dim: usize,
    data: Vec<f32>,
}

impl PairEmbeddingSet {
    pub fn new(intent_id: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not form rows of width {dim}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of pair {} at column {}", i / dim, i % dim)));
        }
        Ok(PairEmbeddingSet { intent_id, dim, data })
    }

    pub fn from_matrix(intent_id: usize, m: &DenseMatrix) -> Result<Self> {
        Self::new(intent_id, m.cols, m.data.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vector(&self, pair_id: usize) -> &[f32] {
        &self.data[pair_id * self.dim..(pair_id + 1) * self.dim]
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix {
            rows: self.len(),
            cols: self.dim,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn with_intent(&self, intent_id: usize) -> Self {
        PairEmbeddingSet { intent_id, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub dim: usize,
    pub seed: u64,
    /// Attributes to serialize; all attributes when absent.
    pub fields: Option<Vec<String>>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig { dim: 256, seed: 0, fields: None }
    }
}

/// Hashed counts of the distinct character 3- to 5-grams of `text`.
fn gram_counts(text: &str, seed: u64) -> Vec<(u64, u32)> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut counts: HashMap<u64, u32> = HashMap::new();
    let mut buf = String::new();
    for q in 3..=5 {
        for w in chars.windows(q) {
            buf.clear();
            buf.extend(w);
            *counts.entry(xxh3_64_with_seed(buf.as_bytes(), seed)).or_default() += 1;
        }
    }
    let mut out: Vec<(u64, u32)> = counts.into_iter().collect();
    out.sort_unstable();
    out
}

/// Lexical pair vectors. Each gram's count is scaled by its smoothed IDF,
/// `ln((1 + N) / (1 + df)) + 1`, with `N` and `df` taken over the pairs in
/// `train`, and added to bucket `hash(gram) mod dim`. Every bucket carries
/// a fixed sign drawn from a hash of the bucket index. Rows are L2
/// normalized; a pair with only empty slots gets a zero vector.
pub fn embed_lexical(
    pairs: &CandidatePairSet,
    records: &Dataset,
    train: &[usize],
    cfg: &EmbedConfig,
) -> Result<PairEmbeddingSet> {
    if cfg.dim < MIN_DIM {
        return Err(Error::Config(format!("embedding dim must be >= {MIN_DIM}, got {}", cfg.dim)));
    }
    let fields = match &cfg.fields {
        Some(f) if f.is_empty() => return Err(Error::Config("embedding field list is empty".into())),
        Some(f) => f.clone(),
        None => schema(records),
    };
    let serialized: Vec<(bool, Vec<(u64, u32)>)> = pairs
        .pairs()
        .par_iter()
        .map(|p| {
            let empty = [&p.left_id, &p.right_id]
                .iter()
                .all(|id| fields.iter().all(|f| records.get(id).and_then(|r| r.get(f)).unwrap_or("").is_empty()));
            serialize_pair(p, records, &fields).map(|s| (empty, gram_counts(&s.text, cfg.seed)))
        })
        .collect::<Result<_>>()?;

    let mut df: HashMap<u64, u32> = HashMap::new();
    for &i in train {
        let (_, grams) = serialized.get(i).ok_or_else(|| Error::data(format!("train pair {i} out of range")))?;
        for (g, _) in grams {
            *df.entry(*g).or_default() += 1;
        }
    }
    let n = train.len() as f64;
    let signs: Vec<f64> = (0..cfg.dim as u64)
        .map(|b| if xxh3_64_with_seed(&b.to_le_bytes(), cfg.seed ^ SIGN_SALT) & 1 == 1 { 1.0 } else { -1.0 })
        .collect();

    let rows: Vec<Vec<f32>> = serialized
        .par_iter()
        .map(|(empty, grams)| {
            let mut v = vec![0f64; cfg.dim];
            if !*empty {
                for (g, c) in grams {
                    let idf = ((1.0 + n) / (1.0 + *df.get(g).unwrap_or(&0) as f64)).ln() + 1.0;
                    v[(*g % cfg.dim as u64) as usize] += *c as f64 * idf;
                }
                for (x, s) in v.iter_mut().zip(&signs) {
                    *x *= s;
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
            }
            v.into_iter().map(|x| x as f32).collect()
        })
        .collect();
    let empties: Vec<usize> = serialized.iter().enumerate().filter(|(_, s)| s.0).map(|(i, _)| i).collect();
    if !empties.is_empty() {
        log::warn!("{} pairs serialize to empty text and get zero vectors (first: pair {})", empties.len(), empties[0]);
    }
    PairEmbeddingSet::new(0, cfg.dim, rows.concat())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingFile {
    pub intent_id: usize,
    pub matrix: String,
    pub index: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub version: u32,
    #[serde(rename = "P")]
    pub p: usize,
    pub dim: usize,
    pub pair_count: usize,
    pub files: Vec<EmbeddingFile>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes one matrix file and one pair-id index per set, plus the manifest.
pub fn export_embeddings(sets: &[PairEmbeddingSet], dir: &Path) -> Result<PathBuf> {
    let first = sets.first().ok_or_else(|| Error::data("no embedding sets to export"))?;
    for s in sets {
        if s.dim != first.dim || s.len() != first.len() {
            return Err(Error::Shape(format!(
                "intent {} has {}x{} embeddings, intent {} has {}x{}",
                s.intent_id,
                s.len(),
                s.dim,
                first.intent_id,
                first.len(),
                first.dim
            )));
        }
    }
    io::create_dir(dir)?;
    let mut files = Vec::with_capacity(sets.len());
    for s in sets {
        let matrix = format!("intent_{}.f32", s.intent_id);
        let index = format!("intent_{}.ids", s.intent_id);
        let mut bytes = Vec::with_capacity(16 + 4 * s.data.len());
        for word in [MAGIC, s.dim as u32, s.len() as u32, 0] {
            bytes.extend_from_slice(&word.to_le_bytes());
        }
        for v in &s.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mpath = dir.join(&matrix);
        fs::write(&mpath, bytes).map_err(|e| Error::io(&mpath, e))?;
        let ids: String = (0..s.len()).map(|i| format!("{i}\n")).collect();
        let ipath = dir.join(&index);
        fs::write(&ipath, ids).map_err(|e| Error::io(&ipath, e))?;
        files.push(EmbeddingFile { intent_id: s.intent_id, matrix, index });
    }
    let manifest = EmbeddingManifest {
        version: FORMAT_VERSION,
        p: sets.len(),
        dim: first.dim,
        pair_count: first.len(),
        files,
    };
    let path = dir.join(MANIFEST_NAME);
    io::write_json(&path, &manifest)?;
    Ok(path)
}

/// Reads every set referenced by a manifest, aligning rows by pair id.
pub fn import_embeddings(manifest_path: &Path) -> Result<Vec<PairEmbeddingSet>> {
    let m: EmbeddingManifest = io::read_json(manifest_path)?;
    if m.version != FORMAT_VERSION {
        return Err(Error::data(format!("{}: unsupported version {}", manifest_path.display(), m.version)));
    }
    if m.files.len() != m.p {
        return Err(Error::data(format!("{}: P = {} but {} files listed", manifest_path.display(), m.p, m.files.len())));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    m.files.iter().map(|f| import_one(&m, f, base)).collect()
}

fn import_one(m: &EmbeddingManifest, f: &EmbeddingFile, base: &Path) -> Result<PairEmbeddingSet> {
    let mpath = base.join(&f.matrix);
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let shown = mpath.display();
    if bytes.len() < 16 {
        return Err(Error::data(format!("{shown}: truncated header")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    if word(0) as u32 != MAGIC {
        return Err(Error::data(format!("{shown}: bad magic")));
    }
    let (dim, rows) = (word(1), word(2));
    if dim != m.dim {
        return Err(Error::data(format!("{shown}: dimension {dim} does not match manifest dimension {}", m.dim)));
    }
    if rows != m.pair_count {
        return Err(Error::data(format!("{shown}: {rows} rows but manifest lists {} pairs", m.pair_count)));
    }
    if bytes.len() != 16 + 4 * dim * rows {
        return Err(Error::data(format!("{shown}: expected {} bytes, found {}", 16 + 4 * dim * rows, bytes.len())));
    }
    let ipath = base.join(&f.index);
    let text = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let order: Vec<usize> = text
        .lines()
        .enumerate()
        .map(|(line, s)| {
            s.trim().parse::<usize>().map_err(|_| Error::data(format!("{}:{}: bad pair id {s:?}", ipath.display(), line + 1)))
        })
        .collect::<Result<_>>()?;
    if order.len() != rows {
        return Err(Error::data(format!("{}: {} pair ids for {rows} rows", ipath.display(), order.len())));
    }
    let mut slot = vec![usize::MAX; rows];
    for (row, &pid) in order.iter().enumerate() {
        if pid >= rows {
            return Err(Error::data(format!("{}: pair id {pid} out of range", ipath.display())));
        }
        if slot[pid] != usize::MAX {
            return Err(Error::data(format!("{}: pair id {pid} listed twice", ipath.display())));
        }
        slot[pid] = row;
    }
    if let Some(pid) = slot.iter().position(|&r| r == usize::MAX) {
        return Err(Error::data(format!("{}: missing pair {pid}", ipath.display())));
    }
    let values = &bytes[16..];
    let mut data = Vec::with_capacity(dim * rows);
    for (pid, &row) in slot.iter().enumerate() {
        for c in 0..dim {
            let at = 4 * (row * dim + c);
            let v = f32::from_le_bytes(values[at..at + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{shown}: pair {pid} column {c} is {v}")));
            }
            data.push(v);
        }
    }
    PairEmbeddingSet::new(f.intent_id, dim, data)
}
