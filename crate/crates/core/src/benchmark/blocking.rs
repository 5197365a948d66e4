use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CandidatePairSet, Record};

/// Character q-gram blocking over one text attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockingConfig {
    pub q: usize,
    /// Lowercase and collapse whitespace before extracting grams.
    pub normalize: bool,
    pub min_shared: usize,
    /// Skip pairs whose records come from the same source.
    pub clean_clean: bool,
    pub field: String,
}

impl Default for BlockingConfig {
    fn default() -> Self {
        BlockingConfig {
            q: 4,
            normalize: true,
            min_shared: 1,
            clean_clean: false,
            field: "title".into(),
        }
    }
}

impl BlockingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q < 2 {
            return Err(Error::Config(format!("blocking q must be >= 2, got {}", self.q)));
        }
        if self.min_shared < 1 {
            return Err(Error::Config("blocking min_shared must be >= 1".into()));
        }
        Ok(())
    }
}

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Distinct character q-grams of `text`; empty when shorter than `q`.
pub fn qgrams(text: &str, q: usize) -> BTreeSet<String> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < q {
        return BTreeSet::new();
    }
    chars.windows(q).map(|w| w.iter().collect()).collect()
}

fn record_grams(records: &[Record], cfg: &BlockingConfig) -> Vec<Option<BTreeSet<String>>> {
    records
        .iter()
        .map(|r| match r.get(&cfg.field) {
            Some(v) => {
                let text = if cfg.normalize { normalize_text(v) } else { v.to_string() };
                Some(qgrams(&text, cfg.q))
            }
            None => {
                log::warn!("record `{}` has no `{}` value; skipped by blocking", r.id, cfg.field);
                None
            }
        })
        .collect()
}

/// Index pairs `(i, j)`, `i < j`, of records sharing at least
/// `min_shared` distinct q-grams, optionally restricted by `allow`.
pub(crate) fn blocked_index_pairs(
    grams: &[Option<BTreeSet<String>>],
    cfg: &BlockingConfig,
    allow: &(dyn Fn(usize, usize) -> bool + Sync),
) -> Vec<(usize, usize)> {
    let mut index: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in grams.iter().enumerate() {
        for gram in g.iter().flatten() {
            index.entry(gram.as_str()).or_default().push(i);
        }
    }
    (0..grams.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut counts: HashMap<usize, usize> = HashMap::new();
            for gram in grams[i].iter().flatten() {
                for &j in &index[gram.as_str()] {
                    if j > i {
                        *counts.entry(j).or_default() += 1;
                    }
                }
            }
            let mut hits: Vec<(usize, usize)> = counts
                .into_iter()
                .filter(|&(j, c)| c >= cfg.min_shared && allow(i, j))
                .map(|(j, _)| (i, j))
                .collect();
            hits.sort_unstable();
            hits
        })
        .collect()
}

/// All record pairs sharing at least `min_shared` character q-grams of the
/// normalized designated field. Records without that field are skipped
/// with a warning.
pub fn block_qgram(records: &[Record], cfg: &BlockingConfig) -> Result<CandidatePairSet> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::data("blocking needs at least one record"));
    }
    let grams = record_grams(records, cfg);
    let allow = |i: usize, j: usize| !(cfg.clean_clean && records[i].source == records[j].source);
    let pairs = blocked_index_pairs(&grams, cfg, &allow);
    CandidatePairSet::from_unordered(pairs.into_iter().map(|(i, j)| (records[i].id.clone(), records[j].id.clone())))
}

/// Blocks across every pair of groups (never within a group), pools the
/// results and samples `n` of them uniformly without replacement.
/// Returns the whole pool, with a warning, when it holds fewer than `n`.
pub fn cross_group_negatives(groups: &[Vec<Record>], cfg: &BlockingConfig, n: usize, seed: u64) -> Result<CandidatePairSet> {
    use rand::SeedableRng;
    cfg.validate()?;
    if groups.len() < 2 {
        return Err(Error::data("cross-group sampling needs at least two groups"));
    }
    let mut all = Vec::new();
    let mut group_of = Vec::new();
    for (g, recs) in groups.iter().enumerate() {
        for r in recs {
            all.push(r.clone());
            group_of.push(g);
        }
    }
    let grams = record_grams(&all, cfg);
    let allow = |i: usize, j: usize| {
        group_of[i] != group_of[j] && !(cfg.clean_clean && all[i].source == all[j].source)
    };
    let pool = CandidatePairSet::from_unordered(
        blocked_index_pairs(&grams, cfg, &allow)
            .into_iter()
            .map(|(i, j)| (all[i].id.clone(), all[j].id.clone())),
    )?;
    if pool.len() < n {
        log::warn!("cross-group pool has {} pairs, fewer than the {n} requested; using all", pool.len());
        return Ok(pool);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, pool.len(), n);
    CandidatePairSet::from_unordered(picked.into_iter().map(|i| {
        let p = &pool.pairs()[i];
        (p.left_id.clone(), p.right_id.clone())
    }))
}
