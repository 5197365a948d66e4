use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::blocking::normalize_text;
use crate::error::{Error, Result};
use crate::model::{CandidatePairSet, Dataset};

fn default_separator() -> String {
    ",".into()
}

/// How one intent's labels are derived from record attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntentRule {
    /// Positive iff the pair is in a supplied duplicate list. Pairs can be
    /// given inline or as a CSV/JSONL file of `left_id,right_id` rows.
    EquivalenceList {
        #[serde(default)]
        pairs: Vec<(String, String)>,
        #[serde(default)]
        file: Option<PathBuf>,
    },
    /// Positive iff both normalized values are non-null and equal.
    FieldEquality { field: String },
    /// Positive iff the Jaccard similarity of the attribute parsed as a set
    /// reaches `threshold`.
    JaccardSets {
        field: String,
        threshold: f64,
        #[serde(default = "default_separator")]
        separator: String,
    },
    /// Logical AND of the children.
    Conjunction { children: Vec<IntentRule> },
}

impl IntentRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            IntentRule::JaccardSets { threshold, separator, .. } => {
                if !(*threshold > 0.0 && *threshold <= 1.0) {
                    return Err(Error::Config(format!("jaccard threshold must be in (0, 1], got {threshold}")));
                }
                if separator.is_empty() {
                    return Err(Error::Config("jaccard separator must not be empty".into()));
                }
                Ok(())
            }
            IntentRule::Conjunction { children } => {
                if children.len() < 2 {
                    return Err(Error::Config("conjunction needs at least two children".into()));
                }
                children.iter().try_for_each(IntentRule::validate)
            }
            IntentRule::EquivalenceList { pairs, file } => {
                if pairs.is_empty() && file.is_none() {
                    log::warn!("equivalence list is empty; every pair will be negative");
                }
                Ok(())
            }
            IntentRule::FieldEquality { .. } => Ok(()),
        }
    }

    /// Attribute names the rule reads.
    pub fn fields(&self) -> BTreeSet<&str> {
        match self {
            IntentRule::FieldEquality { field } | IntentRule::JaccardSets { field, .. } => [field.as_str()].into(),
            IntentRule::Conjunction { children } => children.iter().flat_map(IntentRule::fields).collect(),
            IntentRule::EquivalenceList { .. } => BTreeSet::new(),
        }
    }

    /// Loads any referenced duplicate-list file (relative to `base`) into
    /// the inline list.
    pub fn resolve_files(&mut self, base: &Path) -> Result<()> {
        match self {
            IntentRule::EquivalenceList { pairs, file } => {
                if let Some(f) = file.take() {
                    let path = if f.is_absolute() { f } else { base.join(f) };
                    pairs.extend(read_pair_list(&path)?);
                }
                Ok(())
            }
            IntentRule::Conjunction { children } => children.iter_mut().try_for_each(|c| c.resolve_files(base)),
            _ => Ok(()),
        }
    }
}

/// Reads `left_id,right_id` rows from a CSV (with header) or JSON lines of
/// `{"left_id":..,"right_id":..}`.
fn read_pair_list(path: &Path) -> Result<Vec<(String, String)>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let mut out = Vec::new();
        for row in rdr.records() {
            let row = row?;
            if row.len() < 2 {
                return Err(Error::data(format!("{}: duplicate rows need two ids", path.display())));
            }
            out.push((row[0].to_string(), row[1].to_string()));
        }
        Ok(out)
    } else {
        #[derive(Deserialize)]
        struct Line {
            left_id: String,
            right_id: String,
        }
        Ok(crate::io::read_jsonl::<Line>(path)?.into_iter().map(|l| (l.left_id, l.right_id)).collect())
    }
}

/// Labels for one intent plus the number of pairs where every value the
/// rule compared was null on both sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelOutcome {
    pub labels: Vec<bool>,
    pub both_null: usize,
}

fn parse_set(v: &str, sep: &str) -> BTreeSet<String> {
    v.split(sep).map(normalize_text).filter(|s| !s.is_empty()).collect()
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Labels every candidate pair under `rule`. Null values never yield a
/// positive; pairs where both sides are null are counted and logged.
pub fn label_intent(pairs: &CandidatePairSet, records: &Dataset, rule: &IntentRule) -> Result<LabelOutcome> {
    rule.validate()?;
    for f in rule.fields() {
        if !records.records().iter().any(|r| r.fields.contains_key(f)) {
            return Err(Error::data(format!("no record has attribute `{f}` used by an intent rule")));
        }
    }
    for p in pairs.iter() {
        records.require(&p.left_id)?;
        records.require(&p.right_id)?;
    }
    let out = label_inner(pairs, records, rule)?;
    if out.both_null > 0 {
        log::warn!("{} pairs labeled 0 because both compared values were null", out.both_null);
    }
    Ok(out)
}

fn label_inner(pairs: &CandidatePairSet, records: &Dataset, rule: &IntentRule) -> Result<LabelOutcome> {
    fn values<'a>(
        pairs: &'a CandidatePairSet,
        records: &'a Dataset,
        field: &'a str,
    ) -> impl Iterator<Item = (Option<&'a str>, Option<&'a str>)> + 'a {
        pairs.iter().map(move |p| {
            let l = records.get(&p.left_id).and_then(|r| r.get(field));
            let r = records.get(&p.right_id).and_then(|r| r.get(field));
            (l, r)
        })
    }
    let mut both_null = 0;
    let labels = match rule {
        IntentRule::FieldEquality { field } => values(pairs, records, field)
            .map(|v| match v {
                (Some(a), Some(b)) => normalize_text(a) == normalize_text(b),
                (None, None) => {
                    both_null += 1;
                    false
                }
                _ => false,
            })
            .collect(),
        IntentRule::JaccardSets { field, threshold, separator } => values(pairs, records, field)
            .map(|v| match v {
                (Some(a), Some(b)) => jaccard(&parse_set(a, separator), &parse_set(b, separator)) >= *threshold,
                (None, None) => {
                    both_null += 1;
                    false
                }
                _ => false,
            })
            .collect(),
        IntentRule::EquivalenceList { pairs: dups, .. } => {
            let set: HashSet<(&str, &str)> = dups
                .iter()
                .map(|(a, b)| if a <= b { (a.as_str(), b.as_str()) } else { (b.as_str(), a.as_str()) })
                .collect();
            pairs.iter().map(|p| set.contains(&(p.left_id.as_str(), p.right_id.as_str()))).collect()
        }
        IntentRule::Conjunction { children } => {
            let mut acc = vec![true; pairs.len()];
            for c in children {
                let o = label_inner(pairs, records, c)?;
                both_null += o.both_null;
                acc.iter_mut().zip(o.labels).for_each(|(a, b)| *a &= b);
            }
            acc
        }
    };
    Ok(LabelOutcome { labels, both_null })
}
